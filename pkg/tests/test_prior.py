import numpy as np
import pytest

from fusionalign import ndgrad as ng
from fusionalign.errors import ContractError, ShapeError
from fusionalign.gradcheck import check_gradients
from fusionalign.ndgrad import Tensor
from fusionalign.prior import (
    DiffusionSchedule,
    ProjectorParams,
    ToyDenoiser,
    add_noise,
    export_conditions,
    load_conditions,
    prior_loss,
    project_condition,
    timestep_features,
)


def _zero_mlp(mlp):
    for t in (mlp.w1, mlp.b1, mlp.w2, mlp.b2):
        t.data = np.zeros_like(t.data)


def test_projector_zero_weights_is_identity():
    rng = np.random.default_rng(0)
    p = ProjectorParams.init(rng, d=6, d_hidden=12)
    _zero_mlp(p.mlp)
    z = rng.standard_normal((3, 6))
    np.testing.assert_array_equal(project_condition(p, Tensor(z)).data, z)


def test_projector_output_dim_independent_of_hidden():
    rng = np.random.default_rng(1)
    for d_hidden in (8, 4096):
        p = ProjectorParams.init(rng, d=16, d_hidden=d_hidden)
        out = project_condition(p, Tensor(rng.standard_normal((2, 16))))
        assert out.shape == (2, 16)


def test_projector_matches_two_matmul_reference():
    rng = np.random.default_rng(2)
    p = ProjectorParams.init(rng, d=5, d_hidden=7)
    z = rng.standard_normal((4, 5))
    out = project_condition(p, Tensor(z)).data
    # independent reference built only from numpy/scipy primitives
    from scipy.special import erf

    h = z @ p.mlp.w1.data + p.mlp.b1.data
    h = h * 0.5 * (1.0 + erf(h / np.sqrt(2.0)))
    ref = z + (h @ p.mlp.w2.data + p.mlp.b2.data)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_projector_dim_mismatch():
    rng = np.random.default_rng(3)
    p = ProjectorParams.init(rng, d=5, d_hidden=5)
    with pytest.raises(ShapeError):
        project_condition(p, Tensor(np.zeros((1, 4))))


def test_schedule_alpha_bar_strictly_decreasing():
    s = DiffusionSchedule.linear(50)
    assert s.num_steps == 50
    assert np.all(s.betas > 0) and np.all(s.betas < 1)
    assert np.all(np.diff(s.alpha_bars) < 0)


def test_schedule_invalid():
    with pytest.raises(ContractError):
        DiffusionSchedule.linear(0)
    with pytest.raises(ContractError):
        DiffusionSchedule.linear(10, beta_start=-0.1)
    with pytest.raises(ContractError):
        DiffusionSchedule.linear(10, beta_end=1.5)


def test_add_noise_low_noise_limit():
    s = DiffusionSchedule.linear(10, beta_start=1e-8, beta_end=1e-7)
    rng = np.random.default_rng(4)
    x0 = rng.standard_normal((2, 5))
    eps = rng.standard_normal((2, 5))
    x_t = add_noise(s, x0, 1, eps)
    assert np.max(np.abs(x_t - x0)) < np.sqrt(1e-7) * 10


def test_add_noise_pure_noise_limit():
    s = DiffusionSchedule.linear(5)
    s.alpha_bars = s.alpha_bars.copy()
    s.alpha_bars[-1] = 0.0  # hypothetical fully-noised endpoint
    rng = np.random.default_rng(5)
    x0 = rng.standard_normal((2, 4))
    eps = rng.standard_normal((2, 4))
    np.testing.assert_array_equal(add_noise(s, x0, 5, eps), eps)


def test_add_noise_timestep_bounds():
    s = DiffusionSchedule.linear(5)
    x = np.zeros((1, 2))
    with pytest.raises(ContractError):
        add_noise(s, x, 0, x)
    with pytest.raises(ContractError):
        add_noise(s, x, 6, x)
    with pytest.raises(ShapeError):
        add_noise(s, x, 1, np.zeros((1, 3)))


def test_add_noise_norm_expectation_monte_carlo():
    s = DiffusionSchedule.linear(50)
    rng = np.random.default_rng(6)
    dim = 8
    x0 = rng.standard_normal(dim)
    t = 30
    abar = s.alpha_bars[t - 1]
    draws = np.array([
        np.sum(add_noise(s, x0, t, rng.standard_normal(dim)) ** 2)
        for _ in range(10_000)
    ])
    expected = abar * np.sum(x0 ** 2) + (1 - abar) * dim
    assert abs(draws.mean() - expected) / expected < 0.05


def test_add_noise_linear_in_each_argument():
    s = DiffusionSchedule.linear(20)
    rng = np.random.default_rng(7)
    x0, eps = rng.standard_normal((2, 6)), rng.standard_normal((2, 6))
    for t in (1, 10, 20):
        # power-of-two scales keep float multiplication exactly associative
        np.testing.assert_array_equal(add_noise(s, 4.0 * x0, t, eps * 0.0),
                                      4.0 * add_noise(s, x0, t, eps * 0.0))
        np.testing.assert_array_equal(add_noise(s, x0 * 0.0, t, 2.0 * eps),
                                      2.0 * add_noise(s, x0 * 0.0, t, eps))


def test_timestep_features_shape_and_range():
    f = timestep_features(np.array([1, 25, 50]), 50)
    assert f.shape == (3, 32)
    assert np.all(np.abs(f) <= 1.0)
    # distinct timesteps get distinct feature rows
    assert not np.array_equal(f[0], f[2])


def test_prior_loss_oracle_denoiser_zero():
    """A denoiser that reproduces eps exactly drives the loss to zero."""
    s = DiffusionSchedule.linear(10)
    rng = np.random.default_rng(8)
    den = ToyDenoiser.init(rng, x_dim=4, cond_dim=3, width=8)

    class _Echo:
        x_dim, cond_dim = 4, 3

        def forward(self, x_t, t, z_c, num_steps):
            return Tensor(self._eps)

    echo = _Echo()
    x0 = rng.standard_normal((5, 4))
    z_c = Tensor(rng.standard_normal((5, 3)))
    draw_rng = np.random.default_rng(99)
    # replay the internal draws to hand the echo denoiser the exact eps
    probe = np.random.default_rng(99)
    probe.integers(1, 11, size=5)
    echo._eps = probe.standard_normal((5, 4))
    loss = prior_loss(echo, s, x0, z_c, draw_rng)
    assert loss.item() == 0.0
    del den


def test_prior_loss_zero_denoiser_near_dim():
    s = DiffusionSchedule.linear(10)
    rng = np.random.default_rng(9)
    dim = 6
    den = ToyDenoiser.init(rng, x_dim=dim, cond_dim=2, width=8)
    for t in (den.w_in, den.b_in, den.w_mid, den.b_mid, den.w_out, den.b_out):
        t.data = np.zeros_like(t.data)
    x0 = rng.standard_normal((256, dim))
    z_c = Tensor(rng.standard_normal((256, 2)))
    loss = prior_loss(den, s, x0, z_c, np.random.default_rng(10)).item()
    assert abs(loss - dim) / dim < 0.10


def test_prior_loss_batch_mismatch():
    s = DiffusionSchedule.linear(5)
    rng = np.random.default_rng(11)
    den = ToyDenoiser.init(rng, x_dim=3, cond_dim=2, width=4)
    with pytest.raises(ShapeError):
        prior_loss(den, s, np.zeros((4, 3)), Tensor(np.zeros((3, 2))), rng)


def test_denoiser_shape_contract():
    rng = np.random.default_rng(12)
    den = ToyDenoiser.init(rng, x_dim=5, cond_dim=3, width=8)
    out = den.forward(Tensor(rng.standard_normal((2, 5))), np.array([1, 2]),
                      Tensor(rng.standard_normal((2, 3))), 10)
    assert out.shape == (2, 5)
    with pytest.raises(ShapeError):
        den.forward(Tensor(np.zeros((1, 4))), np.array([1]),
                    Tensor(np.zeros((1, 3))), 10)


def test_denoiser_backbone_not_trainable():
    rng = np.random.default_rng(13)
    den = ToyDenoiser.init(rng, x_dim=4, cond_dim=2, width=8)
    assert den.backbone_w.requires_grad is False
    assert "denoiser.backbone.w" in den.tensors()


def test_prior_loss_gradients_finite_difference():
    s = DiffusionSchedule.linear(8)
    rng = np.random.default_rng(14)
    den = ToyDenoiser.init(rng, x_dim=3, cond_dim=2, width=4)
    x0 = rng.standard_normal((3, 3))
    z_c = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    params = {k: v for k, v in den.tensors().items() if v.requires_grad}
    params["z_c"] = z_c

    def loss():
        return prior_loss(den, s, x0, z_c, np.random.default_rng(15))

    assert check_gradients(loss, params, num_points=10, seed=14) < 1e-4


def test_condition_export_round_trip(tmp_path):
    rng = np.random.default_rng(16)
    z_c = rng.standard_normal((200, 32)).astype(np.float32).astype(np.float64)
    export_conditions(z_c, tmp_path / "cond", stage="stage-i")
    back = load_conditions(tmp_path / "cond")
    assert back.shape == (200, 32)
    np.testing.assert_array_equal(back, z_c.astype(np.float32))
    assert (tmp_path / "cond" / "conditions.f32").stat().st_size == 200 * 32 * 4


def test_exported_conditions_match_projector_output(tmp_path):
    rng = np.random.default_rng(17)
    p = ProjectorParams.init(rng, d=8, d_hidden=16)
    z = Tensor(rng.standard_normal((5, 8)))
    z_c = project_condition(p, z).data
    export_conditions(z_c, tmp_path / "cond")
    back = load_conditions(tmp_path / "cond")
    np.testing.assert_allclose(back, z_c, atol=1e-6)
