"""Latent diffusion pieces of the Align stage.

Noise schedule and forward noising, the noise predictor (stacked bottleneck
blocks conditioned on a timestep embedding), the noise adapter that picks a
blend coefficient ``gamma`` for each student latent, a differentiable
deterministic DDIM sampler, and the diffusion / distillation losses.

Losses return ``(value, backward)`` where ``backward(scale)`` pushes
``scale * d value`` into the parameter gradient buffer and returns the
gradient with respect to any differentiable input (or ``None``).
"""

from dataclasses import dataclass
import math

import numpy as np

from pta import kernels as K
from pta.errors import ConfigError, ContractError, ValidationError
from pta.nn import Bottleneck, Dense, sinusoidal_table


@dataclass
class NoiseSchedule:
    T: int
    beta: np.ndarray  # beta[t-1] is the variance added at step t
    alpha_bar: np.ndarray  # length T+1, alpha_bar[0] == 1

    def sqrt_ab(self, t):
        return np.sqrt(self.alpha_bar[t])

    def sqrt_one_minus_ab(self, t):
        return np.sqrt(1.0 - self.alpha_bar[t])

    def to_json(self):
        return {"T": self.T, "beta_start": float(self.beta[0]), "beta_end": float(self.beta[-1])}


def make_schedule(T=200, beta_start=1e-4, beta_end=0.02):
    """Linear beta schedule with cumulative products ``alpha_bar``."""
    if int(T) != T or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    T = int(T)
    beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([float(beta_start)])
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    return NoiseSchedule(T, beta, alpha_bar)


@dataclass(frozen=True)
class DdimPlan:
    n_steps: int
    T: int

    def __post_init__(self):
        if self.n_steps < 1 or self.T < 1 or self.T % self.n_steps != 0:
            raise ConfigError(f"n_steps={self.n_steps} must divide T={self.T}")

    @property
    def delta(self):
        return self.T // self.n_steps

    @property
    def timesteps(self):
        return [self.T - i * self.delta for i in range(self.n_steps)]

    def pairs(self):
        """``(t, t - delta)`` transitions, ending at 0."""
        return [(t, t - self.delta) for t in self.timesteps]


def forward_noise(z0, t, eps, schedule):
    """``sqrt(ab_t) z0 + sqrt(1 - ab_t) eps``; ``t`` may be a scalar or per-row array."""
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr > schedule.T):
        raise ContractError(f"timestep out of range [0, {schedule.T}]")
    ab = schedule.alpha_bar[t_arr]
    if ab.ndim == 1:
        ab = ab[:, None]
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


class NoisePredictor:
    """``eps_hat = out(blocks(x + temb(t)))`` on latent vectors of size ``dim``."""

    def __init__(self, name, dim, T, n_blocks=2, hidden=None):
        self.name = name
        self.dim = dim
        self.T = T
        self.table = sinusoidal_table(T + 1, dim)
        self.temb = Dense(name + ".temb", dim, dim)
        self.blocks = [Bottleneck(f"{name}.block{i}", dim, hidden) for i in range(n_blocks)]
        self.out = Dense(name + ".out", dim, dim)

    def register(self, layout):
        self.temb.register(layout)
        for b in self.blocks:
            b.register(layout)
        self.out.register(layout)

    def init(self, p, rng, out_scheme="xavier"):
        self.temb.init(p, rng)
        for b in self.blocks:
            b.init(p, rng)
        self.out.init(p, rng, out_scheme)

    def forward(self, p, x, t_idx):
        emb = self.table[np.broadcast_to(np.asarray(t_idx), (x.shape[0],))]
        te, c_t = self.temb.forward(p, emb)
        h = x + te
        caches = []
        for b in self.blocks:
            h, c = b.forward(p, h)
            caches.append(c)
        y, c_o = self.out.forward(p, h)
        return y, (c_t, caches, c_o)

    def backward(self, p, cache, dy):
        c_t, caches, c_o = cache
        d = self.out.backward(p, c_o, dy)
        for b, c in zip(reversed(self.blocks), reversed(caches)):
            d = b.backward(p, c, d)
        self.temb.backward(p, c_t, d)
        return d

    def __call__(self, p, x, t_idx):
        return self.forward(p, x, t_idx)[0]


class NoiseAdapter:
    """Bottleneck -> mean over entries -> 1x1 affine -> sigmoid, one gamma per row."""

    def __init__(self, name, dim, hidden=None):
        self.name = name
        self.block = Bottleneck(name + ".block", dim, hidden)
        self.fc = Dense(name + ".fc", 1, 1)

    def register(self, layout):
        self.block.register(layout)
        self.fc.register(layout)

    def init(self, p, rng, bias=0.0):
        self.block.init(p, rng)
        self.fc.init(p, rng, "zeros")
        p[self.fc.b][:] = bias

    def forward(self, p, z):
        if not np.all(np.isfinite(z)):
            raise ValidationError("noise adapter input contains non-finite values")
        h, c_b = self.block.forward(p, z)
        pooled = h.mean(axis=1, keepdims=True)
        s, c_f = self.fc.forward(p, pooled)
        gamma = 0.5 * (1.0 + np.tanh(0.5 * s))
        return gamma, (c_b, c_f, gamma, h.shape[1])

    def backward(self, p, cache, dgamma):
        c_b, c_f, gamma, width = cache
        ds = dgamma * gamma * (1.0 - gamma)
        dpooled = self.fc.backward(p, c_f, ds)
        dh = np.repeat(dpooled / width, width, axis=1)
        return self.block.backward(p, c_b, dh)


def predict_gamma(z_s, adapter, p):
    return adapter.forward(p, np.atleast_2d(z_s))[0]


def adapter_blend(z_s, eps_T, gamma):
    """``gamma z_s + (1 - gamma) eps_T`` (gamma scalar or one per row)."""
    z_s = np.asarray(z_s, dtype=np.float64)
    eps_T = np.asarray(eps_T, dtype=np.float64)
    if z_s.shape != eps_T.shape:
        raise ValidationError(f"shape mismatch {z_s.shape} vs {eps_T.shape}")
    g = np.asarray(gamma, dtype=np.float64)
    if np.any(g < 0) or np.any(g > 1):
        raise ValidationError("gamma must lie in [0, 1]")
    return g * z_s + (1.0 - g) * eps_T


def _check_plan(plan, schedule):
    if plan.T != schedule.T:
        raise ConfigError(f"plan is for T={plan.T} but schedule has T={schedule.T}")


def ddim_refine(z_start, plan, schedule, predictor, p, keep_cache=False):
    """Deterministic (eta = 0) DDIM from ``plan.T`` down to 0.

    With ``keep_cache`` returns ``(z0, cache)`` for :func:`ddim_backward`.
    """
    _check_plan(plan, schedule)
    x = np.asarray(z_start, dtype=np.float64)
    caches = []
    for t, s in plan.pairs():
        eps, c = predictor.forward(p, x, t)
        a_t, a_s = schedule.alpha_bar[t], schedule.alpha_bar[s]
        x0 = (x - math.sqrt(1.0 - a_t) * eps) / math.sqrt(a_t)
        x = math.sqrt(a_s) * x0 + math.sqrt(1.0 - a_s) * eps
        if keep_cache:
            caches.append((t, s, c))
    return (x, caches) if keep_cache else x


def ddim_backward(p, predictor, schedule, caches, dz0):
    """Push ``dz0`` back through the sampler; returns the gradient w.r.t. ``z_start``."""
    dx = dz0
    for t, s, c in reversed(caches):
        a_t, a_s = schedule.alpha_bar[t], schedule.alpha_bar[s]
        dx0 = math.sqrt(a_s) * dx
        deps = math.sqrt(1.0 - a_s) * dx - (math.sqrt(1.0 - a_t) / math.sqrt(a_t)) * dx0
        dx = dx0 / math.sqrt(a_t) + predictor.backward(p, c, deps)
    return dx


def diffusion_loss(z_T, schedule, predictor, p, rng=None, t=None, eps=None):
    """``mean_rows ||eps - predictor(z_t, t)||^2`` with ``t ~ U{1..T}``.

    ``z_T`` is a constant target: the backward pass only reaches the
    predictor. Pass ``t``/``eps`` explicitly to freeze the draw.
    """
    z_T = np.asarray(z_T, dtype=np.float64)
    if z_T.ndim != 2 or z_T.shape[0] == 0:
        raise ContractError("diffusion loss needs a non-empty batch of latents")
    n = z_T.shape[0]
    if t is None:
        t = rng.integers(1, schedule.T + 1, size=n)
    if eps is None:
        eps = rng.standard_normal(z_T.shape)
    z_t = forward_noise(z_T, t, eps, schedule)
    pred, cache = predictor.forward(p, z_t, t)
    r = pred - eps
    value = float(np.sum(r * r) / n)

    def backward(scale=1.0):
        predictor.backward(p, cache, (2.0 * scale / n) * r)
        return None

    return value, backward


def kd_loss(z_hat, z_T):
    """Mean squared error over all entries; ``z_T`` is a constant target."""
    z_hat = np.asarray(z_hat, dtype=np.float64)
    z_T = np.asarray(z_T, dtype=np.float64)
    if z_hat.shape != z_T.shape:
        raise ValidationError(f"shape mismatch {z_hat.shape} vs {z_T.shape}")
    r = z_hat - z_T
    value = float(np.mean(r * r))

    def backward(scale=1.0):
        return (2.0 * scale / r.size) * r

    return value, backward


def combine_diffkd(l_diff, l_kd):
    return l_diff + l_kd


def diffkd_loss(net, p, z_T, student_feats, rng):
    """``L_Diff + L_KD`` averaged over the student modalities.

    ``z_T`` is the (constant) teacher latent. Students sharing a noise
    predictor are stacked and refined in one batched DDIM pass. Returns
    ``(value, {"diff": .., "kd": ..}, backward)``; ``backward(scale)`` returns
    ``{modality: d/d f_S}``.
    """
    mods = list(student_feats)
    if not mods:
        raise ContractError("at least one student modality is required")
    n_mod = len(mods)
    n = z_T.shape[0]
    l_diff = 0.0
    kd = {}
    refined = {}
    pending = []
    for pred, group in net.predictor_groups(mods):
        ld, diff_back = diffusion_loss(z_T, net.schedule, pred, p, rng)
        w_diff = len(group) / n_mod
        l_diff += w_diff * ld
        zs, proj_caches = [], []
        for m in group:
            z, c = net.project(p, student_feats[m], m)
            zs.append(z)
            proj_caches.append(c)
        Z = np.concatenate(zs, axis=0)
        gamma, ad_cache = net.adapter.forward(p, Z)
        eps_T = rng.standard_normal(Z.shape)
        x = gamma * Z + (1.0 - gamma) * eps_T
        z_hat, ddim_cache = ddim_refine(x, net.plan, net.schedule, pred, p, keep_cache=True)
        kd_backs = []
        for j, m in enumerate(group):
            refined[m] = z_hat[j * n : (j + 1) * n]
            kd[m], kb = kd_loss(refined[m], z_T)
            kd_backs.append(kb)
        pending.append((pred, group, diff_back, w_diff, Z, gamma, ad_cache, eps_T, ddim_cache, proj_caches, kd_backs))
    l_kd = sum(kd.values()) / n_mod

    def backward(scale=1.0):
        out = {}
        for pred, group, diff_back, w_diff, Z, gamma, ad_cache, eps_T, ddim_cache, proj_caches, kd_backs in pending:
            diff_back(scale * w_diff)
            dz_hat = np.concatenate([kb(scale / n_mod) for kb in kd_backs], axis=0)
            dx = ddim_backward(p, pred, net.schedule, ddim_cache, dz_hat)
            dgamma = np.sum(dx * (Z - eps_T), axis=1, keepdims=True)
            dZ = dx * gamma + net.adapter.backward(p, ad_cache, dgamma)
            for j, m in enumerate(group):
                out[m] = net.project_backward(p, m, proj_caches[j], dZ[j * n : (j + 1) * n])
        return out

    return l_diff + l_kd, {"diff": l_diff, "kd": l_kd, "kd_per_modality": kd, "refined": refined}, backward
