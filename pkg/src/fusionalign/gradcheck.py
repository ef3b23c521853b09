"""Central finite-difference verification of analytic gradients.

This is the independent oracle for the whole autodiff stack: it re-evaluates
the loss with perturbed parameters and never touches the tape's gradient
closures.
"""

from __future__ import annotations

import numpy as np

from .ndgrad import Tape, Tensor, backward


def check_gradients(build_loss, params: dict[str, Tensor],
                    num_points: int = 20, h: float = 1e-5,
                    seed: int = 0) -> float:
    """Max relative error |analytic - central_diff| / (|analytic| + 1e-8)
    over ``num_points`` seeded random elements of each parameter.

    ``build_loss`` must be a pure function of the current param values.
    """
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = build_loss()
        backward(loss, tape)
    analytic = {k: (p.grad.copy() if p.grad is not None
                    else np.zeros_like(p.data)) for k, p in params.items()}
    for p in params.values():
        p.grad = None

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in sorted(params):
        p = params[name]
        size = p.data.size
        idxs = rng.choice(size, size=min(num_points, size), replace=False)
        flat = p.data.reshape(-1)
        for idx in idxs:
            orig = flat[idx]
            flat[idx] = orig + h
            plus = build_loss().item()
            flat[idx] = orig - h
            minus = build_loss().item()
            flat[idx] = orig
            fd = (plus - minus) / (2 * h)
            a = analytic[name].reshape(-1)[idx]
            rel = abs(a - fd) / (abs(a) + 1e-8)
            worst = max(worst, rel)
    return worst
