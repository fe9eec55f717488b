import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from normlab import normalizers as N
from normlab import tensor as T
from normlab.errors import DataError, NumericError, ParameterError
from normlab.normalizers import Mode, NormKind

from _gradcheck import check

EPS = N.DEFAULT_EPS


def rand(shape, seed=0, scale=1.0, shift=0.0):
    return T.make_rng(seed).standard_normal(shape) * scale + shift


# ------------------------------------------------------- moment_normalize


@pytest.mark.parametrize("axes", [((0,), (0,)), ((1, 2, 3), (1, 2, 3)), ((0, 1, 2), (1, 2, 3))])
def test_constant_input_maps_to_zero(axes):
    out = N.moment_normalize(T.Tensor(np.full((3, 2, 2, 4), 7.5)), *axes)
    np.testing.assert_array_equal(out.data, 0.0)


def test_moment_normalize_scalar_oracle():
    out = N.moment_normalize(T.Tensor([[1.0, 2.0], [3.0, 4.0]]), (0,), (0,)).data
    expect = np.array([[-1.0, -1.0], [1.0, 1.0]]) / np.sqrt(1.0 + EPS)
    np.testing.assert_allclose(out, expect, rtol=1e-15)


def test_empty_reduction_rejected():
    with pytest.raises(DataError):
        N.moment_normalize(T.Tensor(np.zeros((0, 3))), (0,), (0,))


def test_batch_axes_defining_property():
    out = N.moment_normalize(T.Tensor(rand((8, 4, 4, 3), 1, 3.0, 2.0)), (0, 1, 2), (0, 1, 2)).data
    assert np.abs(out.mean(axis=(0, 1, 2))).max() < 1e-10
    assert np.abs(out.var(axis=(0, 1, 2)) - 1).max() < 10 * EPS


# ------------------------------------------------------------- batch norm


def test_batch_norm_train_invariants():
    stats = N.RunningStats.identity(3)
    out = N.batch_norm(T.Tensor(rand((8, 4, 4, 3), 2, 5.0, -3.0)), Mode.TRAIN, stats).data
    assert np.abs(out.mean(axis=(0, 1, 2))).max() < 1e-10
    assert np.abs(out.var(axis=(0, 1, 2)) - 1).max() < 10 * EPS
    assert stats.count == 1


def test_batch_norm_ema_update():
    z = rand((16, 3), 3, 2.0, 1.0)
    stats = N.RunningStats.identity(3)
    N.batch_norm(T.Tensor(z), Mode.TRAIN, stats)
    np.testing.assert_allclose(stats.mean, 0.1 * z.mean(0), rtol=1e-14)
    np.testing.assert_allclose(stats.var, 0.9 + 0.1 * z.var(0), rtol=1e-14)


def test_batch_norm_eval_identity_stats():
    z = rand((5, 4), 4)
    out = N.batch_norm(T.Tensor(z), Mode.EVAL, N.RunningStats.identity(4)).data
    np.testing.assert_allclose(out, z / np.sqrt(1 + EPS), rtol=1e-15)


def test_batch_norm_train_batch_of_one():
    with pytest.raises(DataError):
        N.batch_norm(T.Tensor(np.ones((1, 3))), Mode.TRAIN, N.RunningStats.identity(3))


def test_eval_independent_of_batch_composition():
    rng = T.make_rng(5)
    stats = N.RunningStats.identity(3)
    for _ in range(1000):
        N.batch_norm(T.Tensor(rng.standard_normal((32, 3)) * 2 + 1), Mode.TRAIN, stats)
    z = rng.standard_normal((10, 3))
    perm = rng.permutation(10)
    a = N.batch_norm(T.Tensor(z), Mode.EVAL, stats).data[perm]
    b = N.batch_norm(T.Tensor(z[perm]), Mode.EVAL, stats).data
    assert a.tobytes() == b.tobytes()


def test_batch_train_depends_on_batch_size():
    rng = T.make_rng(6)
    big = rng.standard_normal((256, 4)) * 3 + 1
    stats = N.RunningStats.identity(4)
    small = N.batch_norm(T.Tensor(big[:2]), Mode.BATCH_TRAIN, stats).data
    full = N.batch_norm(T.Tensor(big), Mode.BATCH_TRAIN, stats).data[:2]
    assert not np.allclose(small, full)
    assert stats.count == 0


def test_running_stats_momentum_range():
    with pytest.raises(ParameterError):
        N.RunningStats.identity(2, momentum=1.0)


# ------------------------------------------------------ layer, bmlv, lmbv


def test_layer_norm_invariants():
    out = N.layer_norm(T.Tensor(rand((6, 4, 4, 3), 7, 4.0, 2.0))).data
    assert np.abs(out.mean(axis=(1, 2, 3))).max() < 1e-10
    assert np.abs(out.var(axis=(1, 2, 3)) - 1).max() < 10 * EPS


def _spread(a, axes):
    return np.sqrt(a.var(axis=axes, keepdims=True) + EPS)


@pytest.mark.parametrize("shape", [(6, 4, 4, 3), (10, 7)])
def test_bmlv_axes(shape):
    z = rand(shape, 8, 3.0, 1.0)
    bax, lax = N.batch_axes(len(shape)), N.layer_axes(len(shape))
    out = N.bmlv(T.Tensor(z)).data
    centred = z - z.mean(axis=bax, keepdims=True)
    # numerator is batch-centred, divisor is the per-sample spread of that numerator
    num = out * _spread(centred, lax)
    assert np.abs(num.mean(axis=bax)).max() < 1e-10
    assert np.abs(out.var(axis=lax) - 1).max() < 10 * EPS


@pytest.mark.parametrize("shape", [(6, 4, 4, 3), (10, 7)])
def test_lmbv_axes(shape):
    z = rand(shape, 9, 3.0, 1.0)
    bax, lax = N.batch_axes(len(shape)), N.layer_axes(len(shape))
    out = N.lmbv(T.Tensor(z)).data
    centred = z - z.mean(axis=lax, keepdims=True)
    num = out * _spread(centred, bax)
    assert np.abs(num.mean(axis=lax)).max() < 1e-10
    assert np.abs(out.var(axis=bax) - 1).max() < 10 * EPS


def test_bmlv_batch_mean_zero_constructed():
    # rows (a, -a): centred per feature already, equal per-sample spread
    a = rand(6, 12)
    z = np.stack([a, -a, a[::-1], -a[::-1]])
    out = N.bmlv(T.Tensor(z)).data
    assert np.abs(out.mean(axis=0)).max() < 1e-10


def test_lmbv_layer_mean_zero_constructed():
    # every channel has the same batch spread once samples are layer-centred
    col = rand(5, 13)
    z = np.stack([col, col + 3.0, col - 1.0, col * 1.0 + 0.5], axis=1)
    out = N.lmbv(T.Tensor(z)).data
    assert np.abs(out.mean(axis=1)).max() < 1e-10


# ---------------------------------------------------------------- weight


def test_weight_norm_examples():
    np.testing.assert_allclose(N.weight_norm(T.Tensor([[3.0], [4.0]])).data, [[0.6], [0.8]], rtol=1e-15)
    w = rand((3, 4), 12)
    w /= np.linalg.norm(w)
    np.testing.assert_allclose(N.weight_norm(T.Tensor(w)).data, w, rtol=1e-15)


@given(st.floats(1e-3, 1e3))
@settings(max_examples=50, deadline=None)
def test_weight_norm_scale_invariant(c):
    w = rand((4, 3), 13)
    a = N.weight_norm(T.Tensor(w)).data
    b = N.weight_norm(T.Tensor(c * w)).data
    assert np.max(np.abs(a - b) / np.abs(a)) < 1e-14


def test_weight_norm_zero():
    with pytest.raises(NumericError):
        N.weight_norm(T.Tensor(np.zeros((2, 2))))


# ------------------------------------------------------------ prelayernorm


def test_pre_layer_norm_scalar_oracle():
    out = N.pre_layer_norm(T.Tensor([[1.0, 3.0]]), lambda x: T.matmul(x, np.eye(2))).data
    np.testing.assert_allclose(out, [[-1.0, 1.0]] / np.sqrt(1 + EPS), rtol=1e-15)


def dyadic(shape, seed):
    """Values k/8 with small k: sums, means and shifts stay exact in float64."""
    return T.make_rng(seed).integers(-64, 64, size=shape) / 8.0


@given(st.integers(-1000, 1000), st.integers(0, 10**6))
@settings(max_examples=60, deadline=None)
def test_pre_layer_norm_shift_invariance_bitwise(k, seed):
    x = dyadic((4, 8), seed)
    w = rand((8, 5), seed % 97)
    shift = (k / 4.0) * np.ones((4, 1))
    layer = lambda t: T.matmul(t, w) + 0.25
    a = N.pre_layer_norm(T.Tensor(x), layer).data
    b = N.pre_layer_norm(T.Tensor(x + shift), layer).data
    assert a.tobytes() == b.tobytes()


def test_pre_layer_norm_conv_shift_bitwise():
    x = dyadic((2, 4, 4, 2), 3)
    k = rand((3, 3, 2, 3), 4)
    shift = np.array([1.5, -2.25]).reshape(2, 1, 1, 1)
    layer = lambda t: T.conv2d(t, k)
    a = N.pre_layer_norm(T.Tensor(x), layer).data
    b = N.pre_layer_norm(T.Tensor(x + shift), layer).data
    assert a.tobytes() == b.tobytes()


def test_pre_layer_norm_unit_std():
    w = rand((6, 9), 14)
    out = N.pre_layer_norm(T.Tensor(rand((5, 6), 15, 2.0, 3.0)), lambda t: T.matmul(t, w)).data
    assert np.abs(out.std(axis=1) - 1).max() < 10 * EPS


# ---------------------------------------------------------------- regnorm


def test_reg_norm_examples():
    np.testing.assert_allclose(N.reg_norm(T.Tensor([[1.0, -1.0]])).data, [[1.0, -1.0]] / np.sqrt(1 + EPS))
    out = N.reg_norm(T.Tensor([[3.0, 4.0]]), eps=1e-300).data
    np.testing.assert_allclose(out, [[3.0, 4.0]] / np.sqrt(12.5), rtol=1e-15)


def test_reg_norm_square_sum():
    out = N.reg_norm(T.Tensor(rand((7, 2, 2, 5), 16, 3.0))).data
    np.testing.assert_allclose((out**2).sum(axis=(1, 2, 3)), 20.0, rtol=1e-5)


def test_reg_norm_zero_row_eps_zero():
    with pytest.raises(NumericError):
        N.reg_norm(T.Tensor(np.zeros((2, 3))), eps=0.0)


def test_penalty_examples():
    assert N.reg_norm_penalty(T.Tensor([[1.0, -1.0], [-1.0, 1.0]])).item() == 0.0
    same = np.array([[1.0, -1.0], [1.0, -1.0]])
    assert N.reg_norm_penalty_pairwise(same) == 4.0
    assert N.reg_norm_penalty(T.Tensor(same)).item() == 4.0


@given(st.integers(0, 10**6), st.integers(1, 9), st.integers(1, 12))
@settings(max_examples=60, deadline=None)
def test_penalty_closed_form(seed, b, n):
    zbar = N.reg_norm(T.Tensor(rand((b, n), seed, 2.0, 0.5)), eps=1e-300).data
    r = N.reg_norm_penalty(T.Tensor(zbar)).item()
    m = zbar.mean(axis=0)
    assert abs(r - N.reg_norm_penalty_pairwise(zbar)) < 1e-10 * max(1.0, abs(r))
    assert abs(r - 2 * np.sum(m**2)) < 1e-10 * max(1.0, abs(r))
    assert r >= -1e-12


def test_penalty_zero_iff_means_zero():
    a = N.reg_norm(T.Tensor(rand((3, 6), 17)), eps=1e-300).data
    centred = np.concatenate([a, -a])
    assert abs(N.reg_norm_penalty(T.Tensor(centred)).item()) < 1e-12
    off = np.concatenate([a, -a[:, ::-1]])
    assert np.abs(off.mean(0)).max() > 1e-3
    assert N.reg_norm_penalty(T.Tensor(off)).item() > 1e-6


def test_penalty_descent_drives_means_to_zero():
    z = T.parameter(rand((16, 10), 18, 1.0, 0.7))
    for step in range(500):
        zbar = N.reg_norm(z)
        r = N.reg_norm_penalty(zbar)
        (g,) = T.backward(r, [z])
        z.data -= 0.5 * g
        if np.abs(zbar.data.mean(axis=0)).max() < 1e-3:
            break
    assert np.abs(N.reg_norm(z).data.mean(axis=0)).max() < 1e-3


def test_penalty_empty_batch():
    with pytest.raises(DataError):
        N.reg_norm_penalty(T.Tensor(np.zeros((0, 3))))


# -------------------------------------------------------- normalizer class


def test_norm_kind_parse_lists_options():
    with pytest.raises(ParameterError, match="valid options: none, batch"):
        NormKind.parse("batchnorm2")


@pytest.mark.parametrize("kind", list(NormKind))
def test_normalizer_gradients(kind):
    norm = N.Normalizer(kind, 3)
    z = T.parameter(rand((4, 2, 2, 3), 19, 2.0, 0.5))
    r = rand((4, 2, 2, 3), 20)
    mode = Mode.BATCH_TRAIN

    def loss():
        out, zbar = norm.normalize(z, mode)
        total = (out * r).sum()
        if zbar is not None:
            total = total + N.reg_norm_penalty(zbar)
        return total

    assert check(loss, [z] + norm.parameters()) < 1e-4


def test_batch_train_kind_ignores_running_stats():
    norm = N.Normalizer(NormKind.BATCH_TRAIN, 2)
    z = T.Tensor(rand((6, 2), 21, 3.0, 4.0))
    norm.normalize(z, Mode.TRAIN)
    a, _ = norm.normalize(z, Mode.EVAL)
    b, _ = norm.normalize(z, Mode.BATCH_TRAIN)
    assert a.data.tobytes() == b.data.tobytes()


def test_eps_must_be_positive():
    with pytest.raises(ParameterError):
        N.Normalizer(NormKind.LAYER, 3, eps=0.0)
