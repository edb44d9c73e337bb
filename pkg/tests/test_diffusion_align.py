import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pta.diffusion_align import (DdimPlan, NoiseAdapter, NoisePredictor, NoiseSchedule, adapter_blend, combine_diffkd,
                                 ddim_backward, ddim_refine, diffkd_loss, diffusion_loss, forward_noise, kd_loss,
                                 make_schedule, predict_gamma)
from pta.errors import ConfigError, ContractError, ValidationError
from pta.gradcheck import numeric_grad, rel_error
from pta.nn import Layout, Params


def _schedule(alpha_bars):
    ab = np.array([1.0] + list(alpha_bars))
    beta = 1.0 - ab[1:] / ab[:-1]
    return NoiseSchedule(len(alpha_bars), beta, ab)


def _built(module, seed=0, **init):
    lay = Layout()
    module.register(lay)
    p = Params(lay)
    module.init(p, np.random.default_rng(seed), **init)
    return p


class EpsStub:
    """Predictor that returns a fixed array (the true noise, or zeros)."""

    def __init__(self, value=None):
        self.value = value

    def forward(self, p, x, t):
        return (np.zeros_like(x) if self.value is None else self.value), None

    def backward(self, p, cache, dy):
        return np.zeros_like(dy)


# ------------------------------------------------------------------ schedule


def test_single_step_schedule():
    s = make_schedule(1, 0.5, 0.5)
    np.testing.assert_array_equal(s.alpha_bar, [1.0, 0.5])


def test_long_schedule_bounds():
    s = make_schedule(1000, 1e-4, 0.02)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert 0.0 < s.alpha_bar[1000] < 0.01
    # independent oracle: scalar running product over the linear betas
    prod, want = 1.0, [1.0]
    for i in range(1000):
        prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i / 999)
        want.append(prod)
    np.testing.assert_allclose(s.alpha_bar, want, rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 400), st.floats(1e-5, 0.1), st.floats(0.0, 0.5))
def test_schedule_invariants(T, b0, extra):
    b1 = min(b0 + extra, 0.9)
    s = make_schedule(T, b0, b1)
    assert s.alpha_bar[0] == 1.0
    assert np.all((s.beta > 0) & (s.beta < 1))
    assert np.all(np.diff(s.alpha_bar) < 0) and s.alpha_bar[-1] > 0
    np.testing.assert_allclose(s.alpha_bar[1:], np.cumprod(1 - s.beta), rtol=1e-12)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0), (2.5, 1e-4, 0.02)])
def test_bad_schedule(args):
    with pytest.raises(ConfigError):
        make_schedule(*args)


# ------------------------------------------------------------- forward noise


def test_forward_noise_example():
    z = forward_noise(np.array([2.0, 0.0]), 1, np.array([0.0, 1.0]), _schedule([0.25]))
    np.testing.assert_allclose(z, [1.0, 0.8660], atol=1e-4)


def test_forward_noise_t0_is_identity():
    z = np.array([[0.3, -2.0]])
    np.testing.assert_array_equal(forward_noise(z, 0, np.ones_like(z), make_schedule(10)), z)


def test_forward_noise_range():
    s = make_schedule(10)
    with pytest.raises(ContractError):
        forward_noise(np.zeros(2), 11, np.zeros(2), s)
    with pytest.raises(ContractError):
        forward_noise(np.zeros((2, 2)), np.array([1, -1]), np.zeros((2, 2)), s)


def test_forward_noise_second_moment():
    s = make_schedule(200)
    t = 120
    z0 = np.array([1.5, -0.5, 2.0, 0.0])
    eps = np.random.default_rng(0).standard_normal((10_000, 4))
    zt = forward_noise(np.broadcast_to(z0, eps.shape), t, eps, s)
    want = s.alpha_bar[t] * np.sum(z0**2) + (1 - s.alpha_bar[t]) * 4
    assert np.mean(np.sum(zt**2, axis=1)) == pytest.approx(want, rel=0.03)


# ----------------------------------------------------------- diffusion loss


def test_perfect_predictor_zero_loss():
    rng = np.random.default_rng(1)
    z = rng.standard_normal((8, 3))
    eps = rng.standard_normal((8, 3))
    v, _ = diffusion_loss(z, make_schedule(10), EpsStub(eps), None, t=np.full(8, 4), eps=eps)
    assert v == 0.0


def test_zero_predictor_loss_is_latent_dim():
    rng = np.random.default_rng(2)
    z = rng.standard_normal((10_000, 6))
    v, _ = diffusion_loss(z, make_schedule(50), EpsStub(), None, rng)
    assert v == pytest.approx(6.0, rel=0.05)


def test_diffusion_loss_empty_batch():
    with pytest.raises(ContractError):
        diffusion_loss(np.zeros((0, 3)), make_schedule(10), EpsStub(), None, np.random.default_rng(0))


def test_diffusion_loss_gradient():
    pred = NoisePredictor("phi", 4, 10, 2)
    p = _built(pred, 3)
    rng = np.random.default_rng(4)
    z = rng.standard_normal((5, 4))
    t = rng.integers(1, 11, 5)
    eps = rng.standard_normal((5, 4))
    s = make_schedule(10)
    p.zero_grad()
    _, back = diffusion_loss(z, s, pred, p, t=t, eps=eps)
    assert back() is None  # z_T is a constant target
    gn = numeric_grad(lambda: diffusion_loss(z, s, pred, p, t=t, eps=eps)[0], p.data)
    assert rel_error(p.grad, gn) < 1e-4


def test_predictor_input_gradient():
    pred = NoisePredictor("phi", 4, 10, 2)
    p = _built(pred, 5)
    x = np.random.default_rng(6).standard_normal((3, 4))
    R = np.random.default_rng(7).standard_normal((3, 4))
    y, cache = pred.forward(p, x, 7)
    dx = pred.backward(p, cache, R)
    gn = numeric_grad(lambda: float(np.sum(pred(p, x, 7) * R)), x.reshape(-1)).reshape(x.shape)
    assert rel_error(dx, gn) < 1e-4


# ------------------------------------------------------------------ adapter


def test_zero_adapter_gives_half():
    ad = NoiseAdapter("ad", 4)
    p = _built(ad)
    g = predict_gamma(np.random.default_rng(0).standard_normal((6, 4)), ad, p)
    np.testing.assert_array_equal(g, 0.5)


def test_gamma_increases_with_bias():
    ad = NoiseAdapter("ad", 4)
    p = _built(ad)
    p[ad.fc.W][:] = 0.7
    z = np.random.default_rng(1).standard_normal((5, 4))
    prev = predict_gamma(z, ad, p)
    for b in np.linspace(-3, 3, 7):
        p[ad.fc.b][:] = b
        cur = predict_gamma(z, ad, p)
        assert np.all(cur > prev) or b == -3
        prev = cur


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=4, max_size=4), st.integers(0, 100))
def test_gamma_in_unit_interval(z, seed):
    ad = NoiseAdapter("ad", 4)
    p = _built(ad, seed)
    p[ad.fc.W][:] = 1.3
    g = predict_gamma(np.array(z), ad, p)
    assert np.all((g >= 0) & (g <= 1)) and np.all(np.isfinite(g))


def test_adapter_rejects_non_finite():
    ad = NoiseAdapter("ad", 2)
    p = _built(ad)
    with pytest.raises(ValidationError):
        predict_gamma(np.array([np.nan, 0.0]), ad, p)


def test_adapter_gradient():
    ad = NoiseAdapter("ad", 4)
    p = _built(ad, 2)
    p.data += np.random.default_rng(3).normal(0, 0.3, p.data.size)
    z = np.random.default_rng(4).standard_normal((5, 4))
    R = np.random.default_rng(5).standard_normal((5, 1))
    p.zero_grad()
    g, cache = ad.forward(p, z)
    dz = ad.backward(p, cache, R)
    gn = numeric_grad(lambda: float(np.sum(ad.forward(p, z)[0] * R)), p.data)
    assert rel_error(p.grad, gn) < 1e-4
    gz = numeric_grad(lambda: float(np.sum(ad.forward(p, z)[0] * R)), z.reshape(-1)).reshape(z.shape)
    assert rel_error(dz, gz) < 1e-4


def test_blend_endpoints_and_midpoint():
    zs, eps = np.array([2.0, 0.0]), np.array([0.0, 2.0])
    np.testing.assert_array_equal(adapter_blend(zs, eps, 1.0), zs)
    np.testing.assert_array_equal(adapter_blend(zs, eps, 0.0), eps)
    np.testing.assert_array_equal(adapter_blend(zs, eps, 0.5), [1.0, 1.0])


def test_blend_checks():
    with pytest.raises(ValidationError):
        adapter_blend(np.zeros(2), np.zeros(3), 0.5)
    with pytest.raises(ValidationError):
        adapter_blend(np.zeros(2), np.zeros(2), 1.5)


# --------------------------------------------------------------------- DDIM


def test_plan_timesteps():
    plan = DdimPlan(5, 200)
    assert plan.delta == 40
    assert plan.timesteps == [200, 160, 120, 80, 40]
    assert plan.pairs()[-1] == (40, 0)


@pytest.mark.parametrize("n, T", [(3, 200), (0, 10), (5, 0)])
def test_bad_plan(n, T):
    with pytest.raises(ConfigError):
        DdimPlan(n, T)


def test_plan_schedule_mismatch():
    with pytest.raises(ConfigError):
        ddim_refine(np.zeros((1, 2)), DdimPlan(5, 100), make_schedule(200), EpsStub(), None)


@pytest.mark.parametrize("T", [1, 10, 200, 1000])
def test_single_step_inverts_forward_noise(T):
    s = make_schedule(T)
    rng = np.random.default_rng(T)
    z0, eps = rng.standard_normal((7, 5)), rng.standard_normal((7, 5))
    zt = forward_noise(z0, T, eps, s)
    out = ddim_refine(zt, DdimPlan(1, T), s, EpsStub(eps), None)
    np.testing.assert_allclose(out, z0, rtol=0, atol=1e-12 * max(1.0, 1 / math.sqrt(s.alpha_bar[T])))


def test_ddim_is_deterministic():
    pred = NoisePredictor("phi", 3, 20, 2)
    p = _built(pred, 9)
    x = np.random.default_rng(0).standard_normal((4, 3))
    a = ddim_refine(x, DdimPlan(5, 20), make_schedule(20), pred, p)
    b = ddim_refine(x.copy(), DdimPlan(5, 20), make_schedule(20), pred, p)
    assert a.tobytes() == b.tobytes()
    assert a.shape == x.shape and np.all(np.isfinite(a))


def test_ddim_gradient_through_all_steps():
    pred = NoisePredictor("phi", 3, 20, 2)
    p = _built(pred, 11)
    s, plan = make_schedule(20), DdimPlan(5, 20)
    x = np.random.default_rng(1).standard_normal((4, 3))
    R = np.random.default_rng(2).standard_normal((4, 3))
    p.zero_grad()
    out, caches = ddim_refine(x, plan, s, pred, p, keep_cache=True)
    dx = ddim_backward(p, pred, s, caches, R)

    def f():
        return float(np.sum(ddim_refine(x, plan, s, pred, p) * R))

    assert rel_error(p.grad, numeric_grad(f, p.data)) < 1e-4
    assert rel_error(dx, numeric_grad(f, x.reshape(-1)).reshape(x.shape)) < 1e-4


# ---------------------------------------------------------------- KD losses


def test_kd_loss_example():
    assert kd_loss(np.array([2.0, 0.0]), np.zeros(2))[0] == 2.0
    z = np.random.default_rng(0).standard_normal((3, 4))
    assert kd_loss(z, z)[0] == 0.0


def test_kd_gradient_is_for_student_only():
    z_hat, z_T = np.array([[1.0, 2.0]]), np.array([[0.0, 0.0]])
    _, back = kd_loss(z_hat, z_T)
    np.testing.assert_allclose(back(), [[1.0, 2.0]])  # 2 r / n with n = 2


def test_kd_shape_mismatch():
    with pytest.raises(ValidationError):
        kd_loss(np.zeros(2), np.zeros(3))


def test_combine_is_additive():
    assert combine_diffkd(0.3, 0.7) == pytest.approx(1.0)


def _toy_net(shared=True):
    from pta.model_core import ModelConfig, PTANetwork

    cfg = ModelConfig({"a": 3, "b": 2}, out_dim=2, d_f=4, d_z=3, enc_hidden=4, head_hidden=4, T=10, n_steps=5,
                      shared_predictor=shared)
    net = PTANetwork(cfg)
    p = net.init_params(0)
    p.data += np.random.default_rng(1).normal(0, 0.1, p.data.size)
    return net, p


@pytest.mark.parametrize("shared", [True, False])
def test_diffkd_matches_component_recomputation(shared):
    net, p = _toy_net(shared)
    rng = np.random.default_rng(3)
    feats = {"a": rng.standard_normal((5, 4)), "b": rng.standard_normal((5, 4))}
    z_T = rng.standard_normal((5, 3))
    value, parts, _ = diffkd_loss(net, p, z_T, feats, np.random.default_rng(7))

    # replay the same draws in the same order
    r = np.random.default_rng(7)
    diffs, kds = [], {}
    for pred, group in net.predictor_groups(list(feats)):
        ld, _ = diffusion_loss(z_T, net.schedule, pred, p, r)
        diffs.append((ld, len(group)))
        Z = np.concatenate([net.project(p, feats[m], m)[0] for m in group])
        gamma = net.adapter.forward(p, Z)[0]
        x = adapter_blend(Z, r.standard_normal(Z.shape), gamma)
        out = ddim_refine(x, net.plan, net.schedule, pred, p)
        for j, m in enumerate(group):
            kds[m] = kd_loss(out[j * 5 : (j + 1) * 5], z_T)[0]
    l_diff = sum(ld * k for ld, k in diffs) / 2
    l_kd = sum(kds.values()) / 2
    assert value == pytest.approx(l_diff + l_kd, abs=1e-9)
    assert parts["diff"] == pytest.approx(l_diff, abs=1e-9) and parts["kd"] == pytest.approx(l_kd, abs=1e-9)


def test_diffkd_needs_a_student():
    net, p = _toy_net()
    with pytest.raises(ContractError):
        diffkd_loss(net, p, np.zeros((2, 3)), {}, np.random.default_rng(0))


def test_diffkd_gradients_skip_teacher_path():
    net, p = _toy_net()
    rng = np.random.default_rng(4)
    feats = {"a": rng.standard_normal((5, 4))}
    p.zero_grad()
    _, _, back = diffkd_loss(net, p, rng.standard_normal((5, 3)), feats, np.random.default_rng(1))
    dfeat = back(1.0)
    for name in net.layout.names_with_prefix("proj.teacher") + net.layout.names_with_prefix("invproj") \
            + net.layout.names_with_prefix("head.") + net.layout.names_with_prefix("proj.b"):
        assert np.all(p.g(name) == 0.0), name
    for prefix in ("proj.a", "adapter", "phi"):
        assert any(np.any(p.g(n) != 0) for n in net.layout.names_with_prefix(prefix)), prefix
    assert set(dfeat) == {"a"}


def test_diffkd_gradient_matches_fd():
    net, p = _toy_net()
    rng = np.random.default_rng(5)
    feats = {"a": rng.standard_normal((4, 4)), "b": rng.standard_normal((4, 4))}
    z_T = rng.standard_normal((4, 3))
    p.zero_grad()
    _, _, back = diffkd_loss(net, p, z_T, feats, np.random.default_rng(2))
    dfeat = back(1.0)
    idx = np.concatenate([np.arange(net.layout.slice_of(n).start, net.layout.slice_of(n).stop)
                          for pre in ("proj.a", "proj.b", "adapter", "phi")
                          for n in net.layout.names_with_prefix(pre)])

    def f():
        return diffkd_loss(net, p, z_T, feats, np.random.default_rng(2))[0]

    assert rel_error(p.grad[idx], numeric_grad(f, p.data, idx=idx)[idx]) < 1e-4
    fa = feats["a"].reshape(-1)
    num = numeric_grad(lambda: diffkd_loss(net, p, z_T, {"a": fa.reshape(4, 4), "b": feats["b"]},
                                           np.random.default_rng(2))[0], fa)
    assert rel_error(dfeat["a"].reshape(-1), num) < 1e-4
