import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import tapd.numkit as nk
from tapd.numkit import (
    GradientError,
    OptimState,
    ShapeError,
    Tape,
    Tensor,
    UnknownPrimitiveError,
    adamw_step,
    apply_primitive,
    backward,
    cosine_alpha,
    parameter,
)

from fd import fd_grad, rel_err, tape_grad


# ---------------------------------------------------------------------------
# forward values
# ---------------------------------------------------------------------------


def test_matmul_identity():
    eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
    v = Tensor([[3.0], [4.0]])
    out = apply_primitive("matmul", [eye, v])
    assert np.array_equal(out.numpy(), [[3.0], [4.0]])


def test_softmax_uniform():
    out = nk.softmax(Tensor([0.0, 0.0, 0.0]))
    assert np.allclose(out.numpy(), [1 / 3, 1 / 3, 1 / 3], rtol=0, atol=0)


def test_concat_shape():
    a = Tensor(np.zeros((2, 3)))
    b = Tensor(np.ones((4, 3)))
    out = apply_primitive("concat-along-axis", [a, b], axis=0)
    assert out.shape == (6, 3)


def test_unknown_primitive_rejected():
    with pytest.raises(UnknownPrimitiveError):
        apply_primitive("convolve", [Tensor([1.0])])


def test_shape_mismatch_names_op():
    with pytest.raises(ShapeError, match="matmul"):
        nk.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ShapeError, match="concat"):
        nk.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4)))], axis=0)


def test_tensor_rejects_nonfinite():
    with pytest.raises(ValueError):
        Tensor([1.0, float("nan")])
    with pytest.raises(ValueError):
        Tensor([float("inf")])


def test_determinism_bit_identical():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(5, 7)))
    b = Tensor(rng.normal(size=(7, 3)))
    first = nk.matmul(a, b).numpy()
    second = nk.matmul(a, b).numpy()
    assert np.array_equal(first, second)
    assert nk.sdpa(a, a, a).numpy().tobytes() == nk.sdpa(a, a, a).numpy().tobytes()


# ---------------------------------------------------------------------------
# gradients vs finite differences
# ---------------------------------------------------------------------------

H_FD = 1e-5
TOL = 1e-4


def check_op(build_tape, build_raw, arrays, seed_margin=None):
    tensors = [parameter(a) for a in arrays]
    grads = tape_grad(lambda *ts: build_tape(*ts), tensors)
    for i in range(len(arrays)):
        ref = fd_grad(build_raw, arrays, i, h=H_FD)
        assert grads[i] is not None
        assert rel_err(grads[i], ref) < TOL


def _rand(rng, *shape):
    return rng.normal(size=shape)


@pytest.mark.parametrize("trial", range(10))
def test_grad_matmul(trial):
    rng = np.random.default_rng(100 + trial)
    a, b = _rand(rng, 3, 4), _rand(rng, 4, 2)
    check_op(
        lambda x, y: nk.sum_(nk.matmul(x, y)),
        lambda x, y: float((x @ y).sum()),
        [a, b],
    )


def test_grad_matmul_batched():
    rng = np.random.default_rng(7)
    a, b = _rand(rng, 2, 3, 4), _rand(rng, 4, 5)
    check_op(
        lambda x, y: nk.sum_(nk.matmul(x, y)),
        lambda x, y: float(np.matmul(x, y).sum()),
        [a, b],
    )


@pytest.mark.parametrize("trial", range(10))
def test_grad_add_mul_broadcast(trial):
    rng = np.random.default_rng(200 + trial)
    a, b = _rand(rng, 3, 4), _rand(rng, 4)
    check_op(
        lambda x, y: nk.sum_(nk.mul(nk.add(x, y), x)),
        lambda x, y: float(((x + y) * x).sum()),
        [a, b],
    )


def test_grad_concat_slice_reshape():
    rng = np.random.default_rng(3)
    a, b = _rand(rng, 2, 3), _rand(rng, 4, 3)

    def tape_fn(x, y):
        c = nk.concat([x, y], axis=0)
        s = nk.slice_(c, (slice(1, 5), slice(0, 2)))
        return nk.sum_(nk.mul(nk.reshape(s, (8,)), nk.reshape(s, (8,))))

    def raw_fn(x, y):
        c = np.concatenate([x, y], axis=0)
        s = c[1:5, 0:2].reshape(8)
        return float((s * s).sum())

    check_op(tape_fn, raw_fn, [a, b])


@pytest.mark.parametrize("trial", range(10))
def test_grad_relu(trial):
    rng = np.random.default_rng(300 + trial)
    a = _rand(rng, 4, 5)
    a[np.abs(a) < 1e-3] = 0.1  # keep clear of the kink, where FD is invalid
    check_op(
        lambda x: nk.sum_(nk.mul(nk.relu(x), x)),
        lambda x: float((np.maximum(x, 0) * x).sum()),
        [a],
    )


@pytest.mark.parametrize("trial", range(10))
def test_grad_tanh_softmax(trial):
    rng = np.random.default_rng(400 + trial)
    a = _rand(rng, 3, 5)
    w = _rand(rng, 3, 5)

    def tape_fn(x, y):
        return nk.sum_(nk.mul(nk.softmax(nk.tanh(x), axis=-1), y))

    def raw_fn(x, y):
        t = np.tanh(x)
        e = np.exp(t - t.max(axis=-1, keepdims=True))
        return float((e / e.sum(axis=-1, keepdims=True) * y).sum())

    check_op(tape_fn, raw_fn, [a, w])


@pytest.mark.parametrize("trial", range(10))
def test_grad_mean_sum_axes(trial):
    rng = np.random.default_rng(500 + trial)
    a = _rand(rng, 3, 4, 2)
    check_op(
        lambda x: nk.sum_(nk.mul(nk.mean(x, axis=1), nk.mean(x, axis=1))),
        lambda x: float((x.mean(axis=1) ** 2).sum()),
        [a],
    )


@pytest.mark.parametrize("trial", range(10))
def test_grad_sdpa(trial):
    rng = np.random.default_rng(600 + trial)
    q, k, v = _rand(rng, 3, 4), _rand(rng, 5, 4), _rand(rng, 5, 2)

    def raw_fn(qq, kk, vv):
        s = qq @ kk.T / math.sqrt(qq.shape[-1])
        e = np.exp(s - s.max(axis=-1, keepdims=True))
        return float(((e / e.sum(axis=-1, keepdims=True)) @ vv).sum())

    check_op(
        lambda a, b, c: nk.sum_(nk.sdpa(a, b, c)),
        raw_fn,
        [q, k, v],
    )


@pytest.mark.parametrize("trial", range(10))
def test_grad_layer_norm(trial):
    rng = np.random.default_rng(700 + trial)
    x, g, b = _rand(rng, 4, 6), _rand(rng, 6), _rand(rng, 6)
    eps = 1e-5

    def raw_fn(xx, gg, bb):
        mu = xx.mean(axis=-1, keepdims=True)
        var = ((xx - mu) ** 2).mean(axis=-1, keepdims=True)
        return float((gg * (xx - mu) / np.sqrt(var + eps) + bb).sum())

    check_op(
        lambda a, c, d: nk.sum_(nk.layer_norm(a, c, d, eps=eps)),
        raw_fn,
        [x, g, b],
    )


@pytest.mark.parametrize("trial", range(10))
def test_grad_smooth_l1(trial):
    rng = np.random.default_rng(800 + trial)
    p, t = _rand(rng, 3, 4), _rand(rng, 3, 4)
    d = np.abs(p - t)
    p[np.abs(d - 1.0) < 1e-3] += 0.01  # stay off the C1 transition for FD

    def raw_fn(pp, tt):
        r = pp - tt
        a = np.abs(r)
        return float(np.where(a < 1, 0.5 * r * r, a - 0.5).mean())

    check_op(lambda a, b: nk.smooth_l1_loss(a, b), raw_fn, [p, t])


@pytest.mark.parametrize("trial", range(10))
def test_grad_cross_entropy(trial):
    rng = np.random.default_rng(900 + trial)
    logits = _rand(rng, 6)
    target = int(rng.integers(0, 6))

    def raw_fn(z):
        s = z - z.max()
        return float(np.log(np.exp(s).sum()) - s[target])

    check_op(lambda z: nk.cross_entropy_loss(z, target), raw_fn, [logits])


def test_grad_amax_tree():
    rng = np.random.default_rng(42)
    a = _rand(rng, 2, 7, 3)
    # gaps between candidates keep FD off the max switch points
    a += np.arange(7).reshape(1, 7, 1) * 0.5
    check_op(
        lambda x: nk.sum_(nk.amax(x, axis=1)),
        lambda x: float(x.max(axis=1).sum()),
        [a],
    )


def test_grad_two_layer_net():
    rng = np.random.default_rng(11)
    x = _rand(rng, 5, 3)
    w1, b1 = _rand(rng, 3, 8), _rand(rng, 8)
    w2, b2 = _rand(rng, 8, 2), _rand(rng, 2)

    def tape_fn(xx, ww1, bb1, ww2, bb2):
        h = nk.tanh(nk.linear(xx, ww1, bb1))
        return nk.sum_(nk.mul(nk.linear(h, ww2, bb2), nk.linear(h, ww2, bb2)))

    def raw_fn(xx, ww1, bb1, ww2, bb2):
        h = np.tanh(xx @ ww1 + bb1)
        o = h @ ww2 + bb2
        return float((o * o).sum())

    tensors = [parameter(a) for a in (x, w1, b1, w2, b2)]
    grads = tape_grad(tape_fn, tensors)
    for i, arrs in enumerate([x, w1, b1, w2, b2]):
        ref = fd_grad(raw_fn, [x, w1, b1, w2, b2], i)
        assert rel_err(grads[i], ref) < TOL


# ---------------------------------------------------------------------------
# backward semantics
# ---------------------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = parameter(np.random.default_rng(1).normal(size=(3, 4)))
    with Tape() as tape:
        loss = nk.sum_(x)
    backward(loss, tape)
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_detach_semantics():
    rng = np.random.default_rng(2)
    x = parameter(rng.normal(size=(4,)))
    y = parameter(rng.normal(size=(4,)))
    with Tape() as tape:
        loss = nk.sum_(nk.mul(x, nk.detach(y)))
    backward(loss, tape)
    assert np.array_equal(y.grad, np.zeros(4))
    assert np.allclose(x.grad, y.numpy(), atol=0, rtol=0)


def test_detach_blocks_upstream_flow():
    # loss = sum(x * detach(x*x)): without the wall the gradient would be
    # 3x^2; with it, only the outer factor contributes (x*x).
    x = parameter(np.arange(1.0, 5.0))
    with Tape() as tape:
        loss = nk.sum_(nk.mul(x, nk.detach(nk.mul(x, x))))
    backward(loss, tape)
    assert np.allclose(x.grad, x.numpy() ** 2, atol=0, rtol=0)


def test_backward_rejects_nonscalar_and_consumed_tape():
    x = parameter(np.ones((2, 2)))
    with Tape() as tape:
        y = nk.mul(x, x)
        loss = nk.sum_(y)
    with pytest.raises(GradientError):
        backward(y, tape)
    backward(loss, tape)
    with pytest.raises(GradientError):
        backward(loss, tape)


def test_no_tape_means_no_recording():
    x = parameter(np.ones(3))
    out = nk.mul(x, x)  # no active tape
    assert out.requires_grad
    with Tape() as tape:
        with nk.no_grad():
            nk.mul(x, x)
        assert len(tape) == 0


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def test_adamw_zero_grad_zero_decay_is_noop():
    p = parameter(np.array([1.0, -2.0]))
    p.zero_grad()
    state = OptimState.for_params([p], lr=0.1, weight_decay=0.0)
    before = p.numpy().copy()
    adamw_step([p], state)
    assert np.array_equal(p.numpy(), before)
    assert state.step == 1


def test_adamw_descends_quadratic():
    w = parameter(np.array([1.0]))
    state = OptimState.for_params([w], lr=0.1, weight_decay=0.0)
    with Tape() as tape:
        loss = nk.sum_(nk.mul(w, w))
    backward(loss, tape)
    adamw_step([w], state)
    assert 0.0 < float(w.numpy()[0]) < 1.0


def test_adamw_converges_on_two_var_quadratic():
    # minimum at (3, -1); closed-form optimum value 0
    w = parameter(np.array([0.0, 0.0]))
    target = Tensor(np.array([3.0, -1.0]))
    state = OptimState.for_params([w], lr=0.1, weight_decay=0.0)
    loss_val = None
    for _ in range(200):
        w.zero_grad()
        with Tape() as tape:
            d = nk.add(w, nk.neg(target))
            loss = nk.sum_(nk.mul(d, d))
        loss_val = loss.item()
        backward(loss, tape)
        adamw_step([w], state)
    assert loss_val < 1e-4


def test_adamw_missing_gradient_raises():
    p = parameter(np.ones(2))
    state = OptimState.for_params([p])
    with pytest.raises(GradientError, match="missing gradient"):
        adamw_step([p], state)


def test_clip_global_norm():
    p = parameter(np.zeros(4))
    p.grad = np.full(4, 10.0)
    norm, clipped = nk.clip_global_norm([p], 5.0)
    assert clipped and norm == pytest.approx(20.0)
    assert np.linalg.norm(p.grad) == pytest.approx(5.0)


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


def test_cosine_alpha_endpoints_exact():
    assert cosine_alpha(0, 30) == 0.0
    assert cosine_alpha(30, 30) == 1.0
    assert cosine_alpha(15, 30) == 0.5


def test_cosine_alpha_rejects_bad_args():
    with pytest.raises(ValueError):
        cosine_alpha(-1, 10)
    with pytest.raises(ValueError):
        cosine_alpha(11, 10)
    with pytest.raises(ValueError):
        cosine_alpha(0, 0)


@given(st.integers(min_value=1, max_value=200))
@settings(max_examples=40, deadline=None)
def test_cosine_alpha_monotone_in_unit_interval(total):
    values = [cosine_alpha(e, total) for e in range(total + 1)]
    assert all(0.0 <= v <= 1.0 for v in values)
    assert all(b >= a for a, b in zip(values, values[1:]))


# ---------------------------------------------------------------------------
# loss values
# ---------------------------------------------------------------------------


def test_smooth_l1_values():
    z = Tensor(np.zeros(1))
    assert nk.smooth_l1_loss(Tensor([5.0]), Tensor([5.0])).item() == 0.0
    assert nk.smooth_l1_loss(Tensor([2.0]), z).item() == pytest.approx(1.5, abs=1e-12)
    assert nk.smooth_l1_loss(Tensor([0.5]), z).item() == pytest.approx(0.125, abs=1e-12)


def test_smooth_l1_is_c1_at_transition():
    def f(d):
        return nk.smooth_l1_loss(Tensor([d]), Tensor([0.0])).item()

    h = 1e-7
    left = (f(1.0) - f(1.0 - h)) / h
    right = (f(1.0 + h) - f(1.0)) / h
    assert abs(left - right) < 1e-6


def test_cross_entropy_values():
    uniform = Tensor(np.zeros(6))
    assert nk.cross_entropy_loss(uniform, 3).item() == pytest.approx(math.log(6), abs=1e-12)
    tiny = nk.cross_entropy_loss(Tensor([10.0, -10.0]), 0).item()
    assert tiny == pytest.approx(math.log(1 + math.exp(-20.0)), rel=1e-9)
    with pytest.raises(IndexError):
        nk.cross_entropy_loss(uniform, 6)


def test_cross_entropy_strictly_decreases_in_target_logit():
    others = [0.3, -0.2, 0.1]
    prev = None
    for z in np.linspace(-2, 2, 9):
        val = nk.cross_entropy_loss(Tensor([z] + others), 0).item()
        if prev is not None:
            assert val < prev
        prev = val


def test_layer_norm_values():
    out = nk.layer_norm(Tensor([5.0, 5.0, 5.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    assert np.allclose(out.numpy(), 0.0, atol=1e-6)
    # direct-formula oracle: mu=2, sigma=1 -> (x-mu)/sigma * 1 + 2 = [1, 3]
    out2 = nk.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor([2.0, 2.0]), eps=1e-12)
    assert np.allclose(out2.numpy(), [1.0, 3.0], atol=1e-6)
    with pytest.raises(ValueError):
        nk.layer_norm(Tensor([1.0, 2.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)


def test_layer_norm_grad_of_sum_matches_fd():
    # random gamma so the sum is not constant in x (all-ones gamma makes
    # sum(xhat) identically zero and FD pure noise)
    rng = np.random.default_rng(77)
    x = rng.normal(size=(3, 5))
    g = rng.normal(size=5)
    b = rng.normal(size=5)

    def raw_fn(xx, gg, bb):
        mu = xx.mean(axis=-1, keepdims=True)
        var = ((xx - mu) ** 2).mean(axis=-1, keepdims=True)
        return float((gg * (xx - mu) / np.sqrt(var + 1e-5) + bb).sum())

    tensors = [parameter(a) for a in (x, g, b)]
    grads = tape_grad(lambda a, c, d: nk.sum_(nk.layer_norm(a, c, d, eps=1e-5)), tensors)
    ref = fd_grad(raw_fn, [x, g, b], 0)
    assert rel_err(grads[0], ref) < 1e-5


# ---------------------------------------------------------------------------
# misc helpers
# ---------------------------------------------------------------------------


def test_maximum_and_abs_helpers():
    a = Tensor([-1.0, 2.0, 0.5])
    b = Tensor([1.0, -3.0, 0.5])
    assert np.array_equal(nk.maximum(a, b).numpy(), [1.0, 2.0, 0.5])
    assert np.array_equal(nk.abs_(Tensor([-2.0, 3.0])).numpy(), [2.0, 3.0])


def test_cumsum_steps():
    x = Tensor(np.arange(6.0).reshape(3, 2))
    out = nk.cumsum_steps(x)
    assert np.allclose(out.numpy(), np.cumsum(x.numpy(), axis=0))


def test_debug_checks_toggle():
    assert not nk.debug_checks_enabled()
    nk.set_debug_checks(True)
    try:
        assert nk.debug_checks_enabled()
    finally:
        nk.set_debug_checks(False)
