import numpy as np
import pytest

from fusionalign import ndgrad as ng
from fusionalign.errors import ContractError, DegenerateInputError, ShapeError
from fusionalign.gradcheck import check_gradients
from fusionalign.ndgrad import Tape, Tensor, backward


def test_matmul_identity():
    a = ng.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(a.data, [[1.0, 2.0], [3.0, 4.0]])


def test_matmul_projector_row():
    out = ng.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0], [7.0]]))
    np.testing.assert_array_equal(out.data, [[5.0], [0.0]])


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(7)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    out = ng.matmul(Tensor(a), Tensor(b)).data
    assert np.max(np.abs(out - ref)) < 1e-12


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ng.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_identity_associativity():
    rng = np.random.default_rng(0)
    x = Tensor(rng.integers(-4, 5, size=(3, 3)).astype(float))
    w = Tensor(rng.integers(-4, 5, size=(3, 2)).astype(float))
    eye = Tensor(np.eye(3))
    lhs = ng.matmul(ng.matmul(x, eye), w).data
    rhs = ng.matmul(x, w).data
    np.testing.assert_array_equal(lhs, rhs)


def test_layer_norm_hand_case():
    # mean 2, population std sqrt(2/3)
    out = ng.layer_norm(Tensor([[1.0, 2.0, 3.0]]), Tensor(np.ones(3)),
                        Tensor(np.zeros(3)), eps=0.0)
    np.testing.assert_allclose(out.data, [[-1.2247, 0.0, 1.2247]], atol=1e-4)


def test_layer_norm_constant_row():
    out = ng.layer_norm(Tensor(np.full((2, 5), 3.7)), Tensor(np.ones(5)),
                        Tensor(np.zeros(5)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_layer_norm_affine_collapse():
    beta = np.array([5.0, -1.0, 2.0, 0.5])
    out = ng.layer_norm(Tensor(np.random.default_rng(1).standard_normal((3, 4))),
                        Tensor(np.zeros(4)), Tensor(beta))
    for row in out.data:
        np.testing.assert_array_equal(row, beta)


def test_layer_norm_zero_width_rejected():
    with pytest.raises(ShapeError):
        ng.layer_norm(Tensor(np.zeros((2, 0))), Tensor(np.zeros(0)),
                      Tensor(np.zeros(0)))


def test_gelu_values():
    assert ng.gelu(Tensor([0.0])).data[0] == 0.0
    assert abs(ng.gelu(Tensor([10.0])).data[0] - 10.0) < 1e-6
    assert abs(ng.gelu(Tensor([1.0])).data[0] - 0.841345) < 1e-4


def test_l2_normalize_345():
    out = ng.l2_normalize(Tensor([[3.0, 4.0]]))
    np.testing.assert_allclose(out.data, [[0.6, 0.8]])


def test_l2_normalize_idempotent_and_scale_invariant():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((5, 7))
    once = ng.l2_normalize(Tensor(x)).data
    twice = ng.l2_normalize(Tensor(once)).data
    np.testing.assert_allclose(once, twice, atol=1e-15)
    scaled = ng.l2_normalize(Tensor(3.25 * x)).data
    assert np.max(np.abs(scaled - once)) < 1e-12


def test_l2_normalize_zero_row_names_index():
    x = np.ones((4, 3))
    x[2] = 0.0
    with pytest.raises(DegenerateInputError, match="2"):
        ng.l2_normalize(Tensor(x))


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape() as tape:
        loss = ng.sum_all(x)
        backward(loss, tape)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_squared_norm():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape() as tape:
        loss = ng.sum_all(ng.mul(x, x))
        backward(loss, tape)
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_rejects_nonscalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = ng.scale(x, 2.0)
        with pytest.raises(ContractError):
            backward(y, tape)


def test_backward_accumulates_over_paths():
    x = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        loss = ng.sum_all(ng.add(x, x))  # d/dx = 2
        backward(loss, tape)
    np.testing.assert_array_equal(x.grad, [2.0])


@pytest.mark.parametrize("seed", range(5))
def test_composite_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    g = Tensor(rng.standard_normal(4), requires_grad=True)
    b = Tensor(rng.standard_normal(4), requires_grad=True)
    weight = Tensor(rng.standard_normal((3, 4)))

    def loss():
        h = ng.gelu(ng.matmul(x, w))
        h = ng.layer_norm(ng.add(x, h), g, b)
        h = ng.l2_normalize(h)
        return ng.sum_all(ng.mul(h, weight))

    err = check_gradients(loss, {"x": x, "w": w, "g": g, "b": b}, seed=seed)
    assert err < 1e-4


def test_forward_determinism():
    def run():
        rng = np.random.default_rng(11)
        x = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
        with Tape() as tape:
            loss = ng.sum_all(ng.gelu(ng.matmul(x, x)))
            backward(loss, tape)
        return loss.data.copy(), x.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert l1.tobytes() == l2.tobytes()
    assert g1.tobytes() == g2.tobytes()


def test_tensor_rejects_nonfinite():
    with pytest.raises(Exception):
        Tensor([np.nan])
