import numpy as np
import pytest

import beatkit.autodiff as ad
from beatkit.autodiff import (
    NonFiniteGradientError,
    OptimizerState,
    Tape,
    TapeError,
    Tensor,
    adamw_step,
    apply,
    cosine_lr,
    grad_check,
)

rng = np.random.default_rng(7)


def _t(*shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape))


def test_basic_forward_values():
    assert apply("mul", Tensor([2.0]), Tensor([3.0])).data.tolist() == [6.0]
    a = rng.normal(size=(3, 4))
    assert np.array_equal(apply("matmul", Tensor(np.eye(3)), Tensor(a)).data, a)
    assert ad.gelu(Tensor([0.0])).data[0] == 0.0


def test_square_gradient_at_three():
    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        y = ad.sum_(ad.square(x))
    assert tape.backward(y)[x][0] == 6.0


def test_sum_of_product_gradient_is_other_factor():
    a, b = _t(3, 4), _t(3, 4)
    a.requires_grad = True
    with Tape() as tape:
        y = ad.sum_(a * b)
    assert np.allclose(tape.backward(y)[a], b.data)
    assert grad_check(lambda x: ad.sum_(x * b), a, h=1e-5).max_rel_error < 1e-8


def test_tape_reuse_and_non_scalar_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ValueError):
        tape.backward(y)
    with Tape() as tape:
        z = ad.sum_(x * 2.0)
    tape.backward(z)
    with pytest.raises(TapeError):
        tape.backward(z)


def test_division_by_zero_needs_epsilon():
    with pytest.raises(ZeroDivisionError):
        ad.div(Tensor([1.0]), Tensor([0.0]))
    assert np.isfinite(ad.div(Tensor([1.0]), Tensor([0.0]), eps=1e-8).data).all()


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        ad.add(_t(2, 3), _t(4, 5))
    with pytest.raises(ValueError):
        ad.matmul(_t(2, 3), _t(4, 5))
    with pytest.raises(ValueError):
        apply("nope", _t(2))


def test_min_max_route_to_first_index_on_ties():
    x = Tensor([[1.0, 5.0, 5.0, 1.0]], requires_grad=True)
    with Tape() as tape:
        y = ad.sum_(ad.max_reduce(x, axis=1)) + 2.0 * ad.sum_(ad.min_reduce(x, axis=1))
    g = tape.backward(y)[x]
    assert g.tolist() == [[2.0, 1.0, 0.0, 0.0]]


UNARY = {
    "square": (ad.square, (-2, 2)),
    "sqrt": (ad.sqrt, (0.5, 3)),
    "abs": (ad.abs_, (0.2, 2)),
    "gelu": (ad.gelu, (-3, 3)),
    "cumsum": (lambda x: ad.cumsum(x, axis=-1), (-1, 1)),
    "scale": (lambda x: ad.scale(x, -2.5), (-1, 1)),
    "transpose": (lambda x: ad.transpose(x), (-1, 1)),
    "mean": (lambda x: ad.mean(x, axis=0), (-1, 1)),
    "broadcast": (lambda x: ad.broadcast(x[0:1], (4, 5)), (-1, 1)),
    "split": (lambda x: ad.split(x, 2, axis=1)[1], (-1, 1)),
    "reshape": (lambda x: ad.reshape(x, (5, 4)), (-1, 1)),
    "min_reduce": (lambda x: ad.min_reduce(x, axis=1), (-1, 1)),
    "max_reduce": (lambda x: ad.max_reduce(x, axis=0), (-1, 1)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_pass_grad_check_on_20_inputs(name):
    fn, (lo, hi) = UNARY[name]
    weights = rng.normal(size=50)
    for _ in range(20):
        x = _t(4, 6 if name == "split" else 5, low=lo, high=hi)
        if name == "abs":
            x.data *= rng.choice([-1, 1], size=x.shape)

        def f(v):
            out = fn(v)
            return ad.sum_(out * weights[: out.size].reshape(out.shape))

        assert grad_check(f, x).max_rel_error < 1e-4


BINARY = {
    "add": ad.add,
    "sub": ad.sub,
    "mul": ad.mul,
    "div": lambda a, b: ad.div(a, b),
    "matmul": lambda a, b: ad.matmul(a, ad.transpose(b)),
    "concat": lambda a, b: ad.concat([a, b], axis=0),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_ops_pass_grad_check_on_20_inputs(name):
    fn = BINARY[name]
    for _ in range(20):
        a = _t(3, 4)
        b = _t(3, 4, low=0.5, high=2.0) if name == "div" else _t(3, 4)
        w = rng.normal(size=(6, 4) if name == "concat" else (3, 3) if name == "matmul" else (3, 4))
        assert grad_check(lambda x, y: ad.sum_(fn(x, y) * w), [a, b]).max_rel_error < 1e-4


def test_relu_hinge_and_fold_gradients():
    for _ in range(20):
        x = _t(6)
        x.data[np.abs(x.data) < 0.05] = 0.3
        w = rng.normal(size=6)
        assert grad_check(lambda v: ad.sum_(ad.relu_hinge(v) * w), x).max_rel_error < 1e-4
        win = _t(4, 5)
        w2 = rng.normal(size=11)
        assert grad_check(lambda v: ad.sum_(ad.fold(v, 2, 11) * w2), win).max_rel_error < 1e-4


def test_index_select_gradient_accumulates_repeats():
    x = _t(5, 3)
    idx = np.array([0, 2, 2, 4])
    w = rng.normal(size=(4, 3))
    assert grad_check(lambda v: ad.sum_(v[idx] * w), x).max_rel_error < 1e-4


def test_minmax_normalization_composite_matches_finite_differences():
    for _ in range(20):
        s = _t(4, 7)

        def f(v):
            lo = ad.min_reduce(v, axis=1, keepdims=True)
            hi = ad.max_reduce(v, axis=1, keepdims=True)
            return ad.sum_(ad.square(ad.div(v - lo, hi - lo)))

        res = grad_check(f, s)
        assert res.max_rel_error < 1e-4


def test_fused_minmax_attention_matches_composite_and_gradients():
    q, k, v = _t(2, 6, 3), _t(2, 6, 3), _t(2, 6, 4)
    out, n_deg = ad.minmax_attention(q, k, v, scale_by=0.5)
    s = 0.5 * q.data @ np.swapaxes(k.data, -1, -2)
    a = (s - s.min(-1, keepdims=True)) / (s.max(-1, keepdims=True) - s.min(-1, keepdims=True))
    assert n_deg == 0
    assert np.allclose(out.data, a @ v.data, atol=1e-12)
    assert np.allclose(a.min(-1), 0) and np.allclose(a.max(-1), 1)
    w = rng.normal(size=out.shape)
    res = grad_check(lambda x, y, z: ad.sum_(ad.minmax_attention(x, y, z)[0] * w), [q, k, v])
    assert res.max_rel_error < 1e-4


def test_degenerate_attention_rows_map_to_zero():
    q = Tensor(np.ones((1, 1, 3)))
    k = Tensor(np.ones((1, 1, 3)))
    v = Tensor(np.full((1, 1, 2), 4.0))
    out, n_deg = ad.minmax_attention(q, k, v)
    assert n_deg == 1 and np.all(out.data == 0)


def test_grad_check_flags_kink_at_tie():
    x = Tensor(np.array([[0.5, 0.5, -0.2]]))
    res = grad_check(lambda v: ad.sum_(ad.max_reduce(v, axis=1)), x)
    assert (0, 0) in res.degenerate and (0, 1) in res.degenerate
    with pytest.raises(ValueError):
        grad_check(lambda v: v * 2.0, Tensor([1.0, 2.0]))


def test_sum_of_squares_grad_check_tight():
    assert grad_check(lambda v: ad.sum_(ad.square(v)), _t(10)).max_rel_error < 1e-8


def test_adamw_zero_gradient_without_decay_keeps_params():
    p = {"w": np.array([1.0, -2.0])}
    new, _ = adamw_step(p, {"w": np.zeros(2)}, OptimizerState(weight_decay=0.0), lr=0.1)
    assert np.array_equal(new["w"], p["w"])


def test_adamw_first_step_hand_value():
    new, state = adamw_step({"p": np.array(1.0)}, {"p": np.array(1.0)},
                            OptimizerState(weight_decay=0.0), lr=0.1)
    # bias-corrected m/sqrt(v) = 1 / (1 + eps)
    assert float(new["p"]) == pytest.approx(0.900000001, abs=1e-12)
    assert state.step == 1


def test_adamw_decoupled_decay():
    new, _ = adamw_step({"p": np.array([2.0])}, {"p": np.array([0.0])},
                        OptimizerState(weight_decay=0.01), lr=0.1)
    assert new["p"][0] == pytest.approx(2.0 * (1 - 0.1 * 0.01), abs=1e-15)


def test_adamw_respects_fixed_mask_and_rejects_nan():
    p = {"w": np.array([[1.0, 1.0], [2.0, 2.0]])}
    g = {"w": np.ones((2, 2))}
    mask = {"w": np.array([[True, True], [False, False]])}
    new, _ = adamw_step(p, g, OptimizerState(), 0.1, fixed=mask)
    assert np.array_equal(new["w"][0], p["w"][0])
    assert not np.array_equal(new["w"][1], p["w"][1])
    state = OptimizerState()
    with pytest.raises(NonFiniteGradientError):
        adamw_step(p, {"w": np.array([[np.nan, 0], [0, 0]])}, state, 0.1)
    assert state.step == 0


def test_cosine_schedule_endpoints():
    assert cosine_lr(0, 100) == 5e-4
    assert cosine_lr(100, 100, lr_min=1e-5) == pytest.approx(1e-5)
    assert cosine_lr(50, 100, 5e-4, 1e-4) == pytest.approx(3e-4)
    with pytest.raises(ValueError):
        cosine_lr(0, 0)


def test_backward_is_deterministic():
    def run():
        x = Tensor(np.linspace(-1, 1, 12).reshape(3, 4), requires_grad=True)
        with Tape() as tape:
            y = ad.sum_(ad.gelu(x @ ad.transpose(x)))
        return tape.backward(y)[x]

    assert np.array_equal(run(), run())
