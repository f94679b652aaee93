import numpy as np
import pytest

from fdcheck import central_diff, max_rel_err
from normline.errors import ConfigError, ProtocolError, ShapeError
from normline.norm_layers import (
    NormSpec,
    NormState,
    batch_norm_forward,
    group_norm_forward,
    init_state,
    layer_norm_forward,
    norm_backward,
    norm_forward,
    simple_ln_forward,
    vo_ln_diag_derivative,
    vo_ln_forward,
)
from normline.numerics import make_rng

EPS = 1e-8


def ln_state(width):
    return NormState("layernorm", width)


# -- layernorm ---------------------------------------------------------------


def test_layer_norm_hand_case():
    out = layer_norm_forward(np.array([[2.0, 0.0]]), ln_state(2), EPS)
    assert np.allclose(out, [[1.0, -1.0]], atol=1e-7)


def test_layer_norm_zero_gain_gives_bias():
    st = ln_state(5)
    st.gain[:] = 0.0
    st.bias[:] = np.arange(5.0)
    out = layer_norm_forward(make_rng(0).normal(size=(3, 5)), st, EPS)
    assert np.array_equal(out, np.tile(np.arange(5.0), (3, 1)))


def test_layer_norm_output_moments():
    x = make_rng(1).normal(size=(1, 10))
    out = layer_norm_forward(x, ln_state(10), EPS)
    assert abs(out.mean()) <= 1e-9
    assert abs(out.var() - 1.0) <= 1e-6


def test_layer_norm_width_mismatch():
    with pytest.raises(ShapeError):
        layer_norm_forward(np.ones((2, 3)), ln_state(4), EPS)


# -- simple layernorm ----------------------------------------------------------


def test_simple_ln_hand_case():
    assert np.allclose(simple_ln_forward(np.array([[2.0, 0.0]]), EPS), [[1.0, -1.0]], atol=1e-7)


def test_simple_ln_equals_layer_norm_with_identity_affine():
    x = make_rng(2).normal(size=(6, 9))
    assert np.array_equal(simple_ln_forward(x, EPS), layer_norm_forward(x, ln_state(9), EPS))


def test_simple_ln_derived_case():
    # mu = 0, biased var = 5, so the row divides by sqrt(5)
    x = np.array([[3.0, 1.0, -1.0, -3.0]])
    assert np.allclose(simple_ln_forward(x, EPS), x / np.sqrt(5.0), atol=1e-8)


# -- variance-only layernorm -----------------------------------------------------


def test_vo_ln_hand_case():
    # mu = 1, var = 1: dividing by the std leaves the values unchanged
    assert np.allclose(vo_ln_forward(np.array([[2.0, 0.0]]), EPS), [[2.0, 0.0]], atol=1e-7)


def test_vo_ln_constant_row_degenerate():
    c = 3.0
    out = vo_ln_forward(np.full((1, 4), c), EPS)
    assert np.isfinite(out).all()
    assert np.allclose(out, c / np.sqrt(EPS))


def test_vo_ln_equals_simple_ln_plus_scaled_mean():
    rng = make_rng(3)
    x = rng.normal(size=(5, 8))
    mu = x.mean(axis=1, keepdims=True)
    delta = np.sqrt(x.var(axis=1, keepdims=True) + EPS)
    lhs = vo_ln_forward(x, EPS)
    rhs = simple_ln_forward(x, EPS) + mu / delta
    assert np.abs(lhs - rhs).max() <= 1e-12


def test_vo_ln_scale_equivariance():
    x = make_rng(4).normal(size=(4, 12))
    base = vo_ln_forward(x, EPS)
    for c in (0.5, 3.0, 17.0):
        assert np.abs(vo_ln_forward(c * x, EPS) - base).max() <= 1e-10


def test_vo_ln_keeps_scaled_row_mean():
    x = make_rng(5).normal(size=(7, 9)) + 2.0
    out = vo_ln_forward(x, EPS)
    mu = x.mean(axis=1)
    delta = np.sqrt(x.var(axis=1) + EPS)
    assert np.abs(out.mean(axis=1) - mu / delta).max() <= 1e-9
    assert np.abs(out.var(axis=1) - 1.0).max() <= 1e-6


# -- batchnorm -------------------------------------------------------------------


def test_batch_norm_hand_case():
    st = NormState("batchnorm", 1)
    out = batch_norm_forward(np.array([[1.0], [3.0]]), st, EPS, training=True)
    assert np.allclose(out, [[-1.0], [1.0]], atol=1e-7)


def test_batch_norm_eval_identity_stats():
    st = NormState("batchnorm", 3)
    x = make_rng(6).normal(size=(4, 3))
    out = batch_norm_forward(x, st, EPS, training=False)
    assert np.allclose(out, x, atol=1e-7)


def test_batch_norm_running_stats_match_ema_oracle():
    st = NormState("batchnorm", 2)
    x = np.array([[1.0, 4.0], [3.0, 8.0]])
    momentum = 0.9
    k = 12
    for _ in range(k):
        batch_norm_forward(x, st, EPS, training=True, momentum=momentum)
    mu = x.mean(axis=0)
    var = x.var(axis=0)
    # closed form: running_k = m^k * init + (1 - m^k) * batch_stat
    assert np.abs(st.running_mean - (1 - momentum**k) * mu).max() <= 1e-10
    assert np.abs(st.running_var - (momentum**k * 1.0 + (1 - momentum**k) * var)).max() <= 1e-10


def test_batch_norm_train_output_moments():
    st = NormState("batchnorm", 5)
    x = make_rng(7).normal(size=(64, 5)) * 3.0 + 1.0
    out = batch_norm_forward(x, st, EPS, training=True)
    assert np.abs(out.mean(axis=0)).max() <= 1e-9
    assert np.abs(out.var(axis=0) - 1.0).max() <= 1e-6


def test_batch_norm_degenerate_batch():
    with pytest.raises(ProtocolError):
        batch_norm_forward(np.ones((1, 3)), NormState("batchnorm", 3), EPS, training=True)


# -- groupnorm --------------------------------------------------------------------


def test_group_norm_single_group_equals_layer_norm():
    x = make_rng(8).normal(size=(5, 6))
    a = group_norm_forward(x, NormState("groupnorm", 6), 1, EPS)
    b = layer_norm_forward(x, ln_state(6), EPS)
    assert np.array_equal(a, b)


def test_group_norm_singleton_groups_degenerate():
    # every group has one element, so x - mu == 0 and the output is the bias
    st = NormState("groupnorm", 4)
    st.bias[:] = np.arange(4.0)
    out = group_norm_forward(make_rng(9).normal(size=(3, 4)), st, 4, EPS)
    assert np.isfinite(out).all()
    assert np.array_equal(out, np.tile(np.arange(4.0), (3, 1)))


def test_group_norm_hand_case():
    out = group_norm_forward(np.array([[2.0, 0.0, 4.0, 0.0]]), NormState("groupnorm", 4), 2, EPS)
    assert np.allclose(out, [[1.0, -1.0, 1.0, -1.0]], atol=1e-7)


def test_group_norm_non_divisible():
    with pytest.raises(ShapeError):
        group_norm_forward(np.ones((2, 5)), NormState("groupnorm", 5), 2, EPS)


# -- backward ------------------------------------------------------------------------


def _spec_for(kind, width):
    groups = 2 if (kind == "groupnorm" and width % 2 == 0) else 1
    return NormSpec(kind, epsilon=EPS, group_count=groups)


ALL_KINDS = ("layernorm", "simple_ln", "vo_ln", "groupnorm", "batchnorm")


def test_backward_zero_grad_gives_zero():
    for kind in ALL_KINDS:
        spec = _spec_for(kind, 6)
        st = init_state(spec, 6)
        x = make_rng(10).normal(size=(4, 6))
        norm_forward(x, spec, st, training=True)
        gi, gg, gb = norm_backward(kind, np.zeros((4, 6)), st)
        assert not gi.any()
        if gg is not None:
            assert not gg.any() and not gb.any()


def test_vo_ln_backward_matches_finite_differences():
    rng = make_rng(11)
    x = rng.normal(size=(1, 8))
    c = rng.normal(size=(1, 8))
    spec = NormSpec("vo_ln", epsilon=EPS)
    st = init_state(spec, 8)
    norm_forward(x, spec, st, training=True)
    gi, _, _ = norm_backward("vo_ln", c, st)
    num = central_diff(lambda xv: float((vo_ln_forward(xv, EPS) * c).sum()), x.copy(), h=1e-5)
    assert max_rel_err(gi, num) <= 1e-6


def test_layer_norm_grad_bias_is_column_sum():
    rng = make_rng(12)
    x = rng.normal(size=(5, 7))
    grad_out = rng.normal(size=(5, 7))
    st = ln_state(7)
    layer_norm_forward(x, st, EPS)
    _, _, gb = norm_backward("layernorm", grad_out, st)
    assert np.array_equal(gb, grad_out.sum(axis=0))


def _loss_through(spec, st_template, xv, c, training):
    st = init_state(spec, xv.shape[1])
    if st.gain is not None:
        st.gain[:] = st_template.gain
        st.bias[:] = st_template.bias
    if st.running_mean is not None:
        st.running_mean[:] = st_template.running_mean
        st.running_var[:] = st_template.running_var
    return float((norm_forward(xv, spec, st, training) * c).sum())


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_backward_matches_finite_differences_across_sizes(kind):
    # spec property: widths 1..16, 10 seeds, max relative error <= 1e-6
    for width in range(1, 17):
        if kind == "groupnorm" and width % 2 == 1:
            continue
        for seed in range(10):
            rng = make_rng(1000 * width + seed)
            batch = 3 if kind != "batchnorm" else 4
            x = rng.normal(size=(batch, width))
            c = rng.normal(size=(batch, width))
            spec = _spec_for(kind, width)
            st = init_state(spec, width)
            if st.gain is not None:
                st.gain[:] = rng.normal(size=width)
                st.bias[:] = rng.normal(size=width)
            norm_forward(x, spec, st, training=True)
            gi, _, _ = norm_backward(kind, c, st)
            num = central_diff(lambda xv: _loss_through(spec, st, xv, c, True), x.copy(), h=1e-5)
            assert max_rel_err(gi, num) <= 1e-6, f"{kind} width={width} seed={seed}"


@pytest.mark.parametrize("kind", ("layernorm", "groupnorm", "batchnorm"))
def test_affine_grads_match_finite_differences(kind):
    for seed in range(3):
        rng = make_rng(50 + seed)
        width = 6
        x = rng.normal(size=(4, width))
        c = rng.normal(size=(4, width))
        spec = _spec_for(kind, width)
        st = init_state(spec, width)
        st.gain[:] = rng.normal(size=width)
        st.bias[:] = rng.normal(size=width)
        norm_forward(x, spec, st, training=True)
        _, gg, gb = norm_backward(kind, c, st)

        def loss_with(gain, bias):
            st2 = init_state(spec, width)
            st2.gain[:] = gain
            st2.bias[:] = bias
            return float((norm_forward(x, spec, st2, True) * c).sum())

        num_g = central_diff(lambda g: loss_with(g, st.bias), st.gain.copy())
        num_b = central_diff(lambda b: loss_with(st.gain, b), st.bias.copy())
        assert max_rel_err(gg, num_g) <= 1e-6
        assert max_rel_err(gb, num_b) <= 1e-6


def test_batch_norm_eval_backward_matches_finite_differences():
    rng = make_rng(60)
    width = 5
    spec = NormSpec("batchnorm", epsilon=EPS)
    st = init_state(spec, width)
    st.running_mean[:] = rng.normal(size=width)
    st.running_var[:] = rng.uniform( 0.5, 2.0, size=width)
    st.gain[:] = rng.normal(size=width)
    st.bias[:] = rng.normal(size=width)
    x = rng.normal(size=(4, width))
    c = rng.normal(size=(4, width))
    norm_forward(x, spec, st, training=False)
    gi, _, _ = norm_backward("batchnorm", c, st)
    num = central_diff(lambda xv: _loss_through(spec, st, xv, c, False), x.copy())
    assert max_rel_err(gi, num) <= 1e-6


def test_backward_protocol_errors():
    spec = NormSpec("layernorm")
    st = init_state(spec, 4)
    with pytest.raises(ProtocolError):
        norm_backward("layernorm", np.zeros((2, 4)), st)
    x = make_rng(13).normal(size=(2, 4))
    norm_forward(x, spec, st, training=True)
    norm_backward("layernorm", np.ones((2, 4)), st)
    with pytest.raises(ProtocolError):
        norm_backward("layernorm", np.ones((2, 4)), st)  # cache consumed


def test_backward_kind_mismatch():
    spec = NormSpec("vo_ln")
    st = init_state(spec, 4)
    norm_forward(make_rng(14).normal(size=(2, 4)), spec, st, training=True)
    with pytest.raises(ProtocolError):
        norm_backward("simple_ln", np.ones((2, 4)), st)


# -- diagonal derivative helper ----------------------------------------------------


def test_vo_ln_diag_derivative_hand_case():
    # x = [2, 0]: mu = 1, delta = 1 -> entries [1 - 2*1/2, 1 - 0] = [0, 1]
    out = vo_ln_diag_derivative(np.array([2.0, 0.0]), eps=EPS)
    assert np.allclose(out, [0.0, 1.0], atol=1e-7)


def test_vo_ln_diag_derivative_matches_jacobian_diagonal():
    rng = make_rng(15)
    x = rng.normal(size=8)
    diag = vo_ln_diag_derivative(x, eps=EPS)
    num = np.zeros(8)
    h = 1e-5
    for i in range(8):
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        fp = vo_ln_forward(xp[None, :], EPS)[0, i]
        fm = vo_ln_forward(xm[None, :], EPS)[0, i]
        num[i] = (fp - fm) / (2 * h)
    assert max_rel_err(diag, num) <= 1e-6


def test_vo_ln_diag_second_term_small_at_tiny_init():
    # with values drawn at scale 0.01, the correction term's average size is
    # about 1/width of the leading 1/delta term; at width 2000 it sits under 1e-3
    rng = make_rng(16)
    x = rng.normal(0.0, 0.01, size=2000)
    mu = x.mean()
    delta = np.sqrt(x.var() + EPS)
    first = 1.0 / delta
    second = x * (x - mu) / (delta**3 * x.size)
    assert np.abs(second).mean() <= 1e-3 * first
    assert np.allclose(vo_ln_diag_derivative(x, EPS), first - second)


# -- spec validation ------------------------------------------------------------------


def test_norm_spec_validation():
    with pytest.raises(ConfigError):
        NormSpec("batchnrom")
    with pytest.raises(ConfigError):
        NormSpec("layernorm", epsilon=0.0)
    with pytest.raises(ConfigError):
        NormSpec("groupnorm", group_count=0)
    with pytest.raises(ConfigError):
        NormSpec("batchnorm", momentum=1.5)


def test_affine_state_absent_for_parameter_free_kinds():
    assert init_state(NormSpec("simple_ln"), 4).gain is None
    assert init_state(NormSpec("vo_ln"), 4).gain is None
    assert init_state(NormSpec("none"), 4) is None
