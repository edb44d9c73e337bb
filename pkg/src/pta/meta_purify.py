"""Meta-learned modality weights and the inner/outer bilevel updates.

Inner phase: weights are frozen constants and the model parameters take an
Adam step on ``L_task + lam * L_DiffKD``. Outer phase: model parameters are
frozen and the weight logits take an Adam step on the validation task loss,
differentiated through the weighted fusion only (first-order). The softmax
of the logits gives the simplex weights.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from pta.errors import ConfigError, ContractError, NumericError, TrainingAborted, ValidationError
from pta.nn import Adam


def normalize_weights(logits):
    """Softmax with max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValidationError("logits must be finite")
    e = np.exp(z - z.max())
    return e / e.sum()


def renormalize_over_subset(weights, mask_idx):
    """Rescale ``weights[mask_idx]`` to sum to one. Returns only the masked entries."""
    idx = list(mask_idx)
    if not idx:
        raise ContractError("mask must be non-empty")
    w = np.asarray(weights, dtype=np.float64)[idx]
    s = w.sum()
    if s < 1e-30:
        raise NumericError(f"masked weight sum underflows ({s:g})")
    return w / s


@dataclass
class MetaWeights:
    """Per-modality logits plus their softmax.

    With ``literal=True`` the optimized quantity is the simplex vector itself,
    which is pushed through softmax again after every update.
    """

    names: tuple
    logits: np.ndarray
    literal: bool = False

    def __post_init__(self):
        self.names = tuple(self.names)
        self.logits = np.asarray(self.logits, dtype=np.float64).copy()
        if self.logits.shape != (len(self.names),):
            raise ConfigError("one logit per modality is required")

    @classmethod
    def uniform(cls, names, literal=False):
        return cls(tuple(names), np.zeros(len(names)), literal)

    @property
    def normalized(self):
        return normalize_weights(self.logits)

    def as_dict(self):
        return dict(zip(self.names, self.normalized))

    def index(self, mask):
        return [self.names.index(m) for m in mask]


@dataclass
class MetaOptState:
    meta_lr: float = 1e-2
    inner_lr: float = 5e-4
    lam: float = 0.1
    inner_steps_per_outer: int = 50

    def __post_init__(self):
        if self.meta_lr <= 0 or self.inner_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.inner_steps_per_outer < 1:
            raise ConfigError("inner steps per outer step must be >= 1")


# ------------------------------------------------------------------ inner loop


@dataclass
class InnerTerms:
    l_task: float
    l_diff: float = math.nan
    l_kd: float = math.nan
    l_rec: float = math.nan
    lam: float = 0.0

    @property
    def l_diffkd(self):
        return self.l_diff + self.l_kd

    @property
    def l_inner(self):
        if self.lam == 0.0 or math.isnan(self.l_diff):
            return self.l_task
        return self.l_task + self.lam * self.l_diffkd

    @property
    def l_total(self):
        """What the inner step differentiates: ``l_inner`` plus the inverse-projection reconstruction."""
        return self.l_inner if math.isnan(self.l_rec) else self.l_inner + self.l_rec

    def values(self):
        return [self.l_task, self.l_diff, self.l_kd, self.l_inner, self.l_rec]


def fusion_weights(weights, names, mask, renormalize=True):
    """Weights applied to the masked features, as a list aligned with ``mask``."""
    idx = [names.index(m) for m in mask]
    if renormalize:
        return renormalize_over_subset(weights, idx)
    return np.asarray(weights, dtype=np.float64)[idx]


def inner_loss(net, p, batch, mask, weights, lam, rng, use_diff=True, renormalize=True, backward=True,
               teacher=None):
    """Evaluate ``L_task + lam * L_DiffKD`` and (optionally) accumulate ``dL/dTheta`` into ``p.grad``.

    ``weights`` are the simplex weights, treated as constants. The task loss
    fuses the masked features; the distillation teacher fuses every modality
    and is a stop-gradient target. ``teacher=(f_T, z_T)`` pins both the
    teacher feature and its latent (finite-difference checks use this to hold
    the target fixed).
    """
    from pta.diffusion_align import diffkd_loss

    names = net.modalities
    mask = tuple(mask)
    if not mask:
        raise ContractError("mask must be non-empty")
    use_diff = use_diff and lam > 0
    needed = names if use_diff else mask
    feats, enc_caches = {}, {}
    for m in needed:
        feats[m], enc_caches[m] = net.encode(p, m, batch.observations[m])

    w_task = fusion_weights(weights, names, mask, renormalize)
    fused = sum(w * feats[m] for w, m in zip(w_task, mask))
    pred, head_cache = net.task_forward(p, fused)
    l_task, dpred = net.task_loss_and_grad(pred, batch.labels)
    terms = InnerTerms(l_task, lam=lam)

    if use_diff:
        if teacher is None:
            f_T = net.build_teacher(feats, weights, names, renormalize)
            z_T, _ = net.project(p, f_T, "teacher")
        else:
            f_T, z_T = teacher
        l_dkd, parts, dkd_back = diffkd_loss(net, p, z_T, {m: feats[m] for m in mask}, rng)
        l_rec, rec_back = net.reconstruction_loss(p, f_T)
        terms.l_diff, terms.l_kd, terms.l_rec = parts["diff"], parts["kd"], l_rec

    if not backward:
        return terms

    dfused = net.task_backward(p, head_cache, dpred)
    dfeat = {m: w * dfused for w, m in zip(w_task, mask)}
    if use_diff:
        for m, d in dkd_back(lam).items():
            dfeat[m] = dfeat[m] + d
        rec_back(1.0)
    for m, d in dfeat.items():
        net.encode_backward(p, m, enc_caches[m], d)
    return terms


def inner_step(net, p, opt, batch, mask, weights, lam, rng, use_diff=True, renormalize=True):
    """One Adam update of Theta against the inner loss; returns the loss terms."""
    p.zero_grad()
    try:
        terms = inner_loss(net, p, batch, mask, weights, lam, rng, use_diff, renormalize)
    except (ValidationError, NumericError) as exc:
        raise TrainingAborted(f"inner loss failed: {exc}") from exc
    if not (math.isfinite(terms.l_inner) and np.all(np.isfinite(p.grad))):
        raise TrainingAborted(f"non-finite inner loss {terms.l_inner!r}")
    opt.step(p.data, p.grad)
    return terms


# ------------------------------------------------------------------ outer loop


def outer_loss_and_grad(net, p, batch, mask, meta, rng=None, use_refined=True, renormalize=True,
                        features=None):
    """Validation task loss and its gradient w.r.t. the meta parameters.

    Theta is held constant (first-order). With ``use_refined`` the fused
    features are the refined, inverse-projected student features; ``rng``
    supplies the adapter noise for that path. ``features`` may pre-supply the
    per-modality features to fuse.
    """
    names = meta.names
    mask = tuple(mask)
    if not mask:
        raise ContractError("mask must be non-empty")
    if len(batch) == 0:
        raise ContractError("validation batch is empty")
    if features is None:
        features = net.fusion_features(p, batch, mask, rng, refined=use_refined)
    g = [features[m] for m in mask]
    w = meta.normalized
    idx = [names.index(m) for m in mask]
    wm = fusion_weights(w, names, mask, renormalize)
    fused = sum(wi * gi for wi, gi in zip(wm, g))
    pred, head_cache = net.task_forward(p, fused)
    loss, dpred = net.task_loss_and_grad(pred, batch.labels)
    saved = p.grad.copy()
    dfused = net.task_backward(p, head_cache, dpred)
    p.grad[:] = saved
    a = np.array([np.sum(dfused * gi) for gi in g])

    # dL/dw over the full simplex vector
    g_w = np.zeros(len(names))
    if renormalize:
        s = w[idx].sum()
        g_w[idx] = (a - np.dot(wm, a)) / s
    else:
        g_w[idx] = a
    if meta.literal:
        return loss, g_w
    return loss, w * (g_w - np.dot(w, g_w))


class MetaOptimizer:
    """Adam on the meta parameters (logits, or simplex values in literal mode)."""

    def __init__(self, n, lr=1e-2):
        self.adam = Adam(n, lr)

    def step(self, meta, grad):
        if meta.literal:
            w = meta.normalized.copy()
            self.adam.step(w, np.asarray(grad, dtype=np.float64))
            meta.logits = w  # softmax of this is the next simplex vector
        else:
            self.adam.step(meta.logits, np.asarray(grad, dtype=np.float64))
        return meta


def outer_step(net, p, batch, mask, meta, meta_opt, rng=None, use_refined=True, renormalize=True):
    """One meta update. Theta is read-only here. Returns ``L_outer``."""
    try:
        loss, grad = outer_loss_and_grad(net, p, batch, mask, meta, rng, use_refined, renormalize)
    except (ValidationError, NumericError) as exc:
        raise TrainingAborted(f"outer loss failed: {exc}") from exc
    if not math.isfinite(loss):
        raise TrainingAborted(f"non-finite outer loss {loss!r}")
    meta_opt.step(meta, grad)
    return loss


# --------------------------------------------------- one-step unrolled gradient


@dataclass
class UnrolledProblem:
    """Frozen draws for the one-inner-step unrolled meta objective."""

    train_batch: object
    train_mask: tuple
    val_batch: object
    val_mask: tuple
    lam: float = 0.1
    inner_lr: float = 1e-2
    seed: int = 0
    renormalize: bool = True
    use_diff: bool = True
    extra: dict = field(default_factory=dict)


def _theta_after_sgd(net, p, prob, logits):
    w = normalize_weights(logits)
    q = p.copy()
    inner_loss(net, q, prob.train_batch, prob.train_mask, w, prob.lam, np.random.default_rng(prob.seed),
               prob.use_diff, prob.renormalize)
    q.data -= prob.inner_lr * q.grad
    q.zero_grad()
    return q


def unrolled_objective(net, p, prob, logits):
    """``L_val(Theta - lr * grad L_inner(Theta, w), w)`` with raw (unrefined) fusion."""
    q = _theta_after_sgd(net, p, prob, logits)
    meta = MetaWeights(net.modalities, logits)
    return outer_loss_and_grad(net, q, prob.val_batch, prob.val_mask, meta, use_refined=False,
                               renormalize=prob.renormalize)[0]


def unrolled_outer_gradient(net, p, prob, logits, h=1e-5):
    """Gradient of :func:`unrolled_objective` w.r.t. the logits.

    The direct term and ``v = dL_val/dTheta'`` are analytic. The mixed term
    ``d/dw <grad_Theta L_inner(Theta, w), v>`` is a central difference over
    each logit, which is exact up to O(h^2).
    """
    logits = np.asarray(logits, dtype=np.float64)
    q = _theta_after_sgd(net, p, prob, logits)
    meta = MetaWeights(net.modalities, logits)
    _, direct = outer_loss_and_grad(net, q, prob.val_batch, prob.val_mask, meta, use_refined=False,
                                    renormalize=prob.renormalize)
    q.zero_grad()
    net.outer_theta_grad(q, prob.val_batch, prob.val_mask, meta.normalized, prob.renormalize)
    v = q.grad.copy()

    def inner_dot(lg):
        r = p.copy()
        inner_loss(net, r, prob.train_batch, prob.train_mask, normalize_weights(lg), prob.lam,
                   np.random.default_rng(prob.seed), prob.use_diff, prob.renormalize)
        return float(np.dot(r.grad, v))

    mixed = np.zeros_like(logits)
    for k in range(len(logits)):
        e = np.zeros_like(logits)
        e[k] = h
        mixed[k] = (inner_dot(logits + e) - inner_dot(logits - e)) / (2 * h)
    return direct - prob.inner_lr * mixed
