"""Encoders, projections, teacher fusion, task head and the assembled network.

:class:`PTANetwork` owns the parameter layout for everything trained in the
inner loop: per-modality encoders, teacher/student projections into the
latent space, the learned inverse projection back to feature space, the task
head, the noise predictor(s) and the noise adapter.
"""

from dataclasses import asdict, dataclass

import numpy as np

from pta.diffusion_align import DdimPlan, NoiseAdapter, NoisePredictor, ddim_refine, make_schedule
from pta.errors import ConfigError, ContractError, ValidationError
from pta.meta_purify import fusion_weights
from pta.nn import MLP, Dense, Layout, Params


@dataclass
class ModelConfig:
    modalities: dict  # name -> obs_dim, in declaration order
    task: str = "regression"
    out_dim: int = 6
    d_f: int = 64
    d_z: int = 16
    enc_hidden: int = 64
    head_hidden: int = 64
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    n_steps: int = 5
    n_blocks: int = 2
    shared_predictor: bool = True
    gamma_bias: float = 0.0

    def __post_init__(self):
        self.modalities = {str(k): int(v) for k, v in dict(self.modalities).items()}
        if not self.modalities:
            raise ConfigError("at least one modality is required")
        if self.task not in ("regression", "classification"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.d_z > self.d_f:
            raise ConfigError("latent dimension must not exceed feature dimension")

    def to_json(self):
        return asdict(self)


def task_loss(pred, label, task="regression"):
    """Mean squared error (regression) or mean cross-entropy (classification)."""
    return task_loss_and_grad(pred, label, task)[0]


def task_loss_and_grad(pred, label, task="regression"):
    pred = np.asarray(pred, dtype=np.float64)
    if not np.all(np.isfinite(pred)):
        raise ValidationError("prediction contains non-finite values")
    if task == "regression":
        label = np.asarray(label, dtype=np.float64)
        if label.shape != pred.shape:
            raise ValidationError(f"shape mismatch {pred.shape} vs {label.shape}")
        if not np.all(np.isfinite(label)):
            raise ValidationError("label contains non-finite values")
        r = pred - label
        return float(np.mean(r * r)), (2.0 / r.size) * r
    label = np.asarray(label)
    if pred.ndim != 2 or label.shape != (pred.shape[0],):
        raise ValidationError(f"need (n, C) logits and (n,) class labels, got {pred.shape}, {label.shape}")
    z = pred - pred.max(axis=1, keepdims=True)
    logp = z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    n = pred.shape[0]
    rows = np.arange(n)
    loss = float(-np.mean(logp[rows, label]))
    d = np.exp(logp)
    d[rows, label] -= 1.0
    return loss, d / n


def task_metric(pred, label, task="regression"):
    """Mean Euclidean error (regression) or accuracy in [0, 1] (classification)."""
    if task == "regression":
        return float(np.mean(np.linalg.norm(pred - label, axis=1)))
    return float(np.mean(np.argmax(pred, axis=1) == label))


def build_teacher(features, weights, mask, renormalize=True, names=None):
    """Weighted sum of the masked features.

    ``weights`` is either a mapping ``name -> w`` or an array aligned with
    ``names``. With ``renormalize`` the masked weights are rescaled to sum
    to one first.
    """
    mask = tuple(mask)
    if not mask:
        raise ContractError("mask must be non-empty")
    if hasattr(weights, "as_dict"):
        weights = weights.as_dict()
    if isinstance(weights, dict):
        names = list(weights)
        weights = np.array([weights[n] for n in names], dtype=np.float64)
    names = list(names) if names is not None else list(features)
    missing = [m for m in mask if m not in features]
    if missing:
        raise ContractError(f"no feature for {missing}")
    w = fusion_weights(weights, names, mask, renormalize)
    return sum(wi * np.asarray(features[m], dtype=np.float64) for wi, m in zip(w, mask))


class PTANetwork:
    """Inner-loop parameters and the forward/backward paths that use them."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.modalities = tuple(cfg.modalities)
        self.task = cfg.task
        self.schedule = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
        self.plan = DdimPlan(cfg.n_steps, cfg.T)

        self.encoders = {m: MLP(f"enc.{m}", [d, cfg.enc_hidden, cfg.enc_hidden, cfg.d_f])
                         for m, d in cfg.modalities.items()}
        self.projections = {"teacher": Dense("proj.teacher", cfg.d_f, cfg.d_z, bias=False)}
        for m in self.modalities:
            self.projections[m] = Dense(f"proj.{m}", cfg.d_f, cfg.d_z, bias=False)
        self.inv_proj = Dense("invproj", cfg.d_z, cfg.d_f)
        self.head = MLP("head", [cfg.d_f, cfg.head_hidden, cfg.out_dim])
        if cfg.shared_predictor:
            self.predictors = {"shared": NoisePredictor("phi", cfg.d_z, cfg.T, cfg.n_blocks)}
        else:
            self.predictors = {m: NoisePredictor(f"phi.{m}", cfg.d_z, cfg.T, cfg.n_blocks) for m in self.modalities}
        self.adapter = NoiseAdapter("adapter", cfg.d_z)

        self.layout = Layout()
        for part in self._parts():
            part.register(self.layout)

    def _parts(self):
        yield from self.encoders.values()
        yield from self.projections.values()
        yield self.inv_proj
        yield self.head
        yield from self.predictors.values()
        yield self.adapter

    @property
    def n_params(self):
        return self.layout.size

    def init_params(self, seed):
        p = Params(self.layout)
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
        for enc in self.encoders.values():
            enc.init(p, rng)
        teacher = self.projections["teacher"]
        teacher.init(p, rng, "orthogonal")
        for m in self.modalities:
            p[self.projections[m].W][:] = p[teacher.W]
        p[self.inv_proj.W][:] = p[teacher.W].T
        p[self.inv_proj.b][:] = 0.0
        self.head.init(p, rng)
        for pred in self.predictors.values():
            pred.init(p, rng)
        self.adapter.init(p, rng, self.cfg.gamma_bias)
        return p

    # ----------------------------------------------------------- components

    def encode(self, p, m, x):
        if m not in self.encoders:
            raise KeyError(f"no encoder for modality {m!r}")
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.cfg.modalities[m]:
            raise ValidationError(f"{m}: expected obs_dim {self.cfg.modalities[m]}, got {x.shape[1]}")
        if not np.all(np.isfinite(x)):
            raise ValidationError(f"{m}: observation contains non-finite values")
        return self.encoders[m].forward(p, x)

    def encode_backward(self, p, m, cache, df):
        return self.encoders[m].backward(p, cache, df)

    def project(self, p, f, role):
        if role not in self.projections:
            raise KeyError(f"no projection registered for role {role!r}")
        f = np.asarray(f, dtype=np.float64)
        if f.shape[-1] != self.cfg.d_f:
            raise ValidationError(f"feature length {f.shape[-1]} != d_f {self.cfg.d_f}")
        return self.projections[role].forward(p, np.atleast_2d(f))

    def project_backward(self, p, role, cache, dz):
        return self.projections[role].backward(p, cache, dz)

    def task_forward(self, p, fused):
        fused = np.atleast_2d(np.asarray(fused, dtype=np.float64))
        if fused.shape[1] != self.cfg.d_f:
            raise ValidationError(f"fused feature length {fused.shape[1]} != d_f {self.cfg.d_f}")
        return self.head.forward(p, fused)

    def task_backward(self, p, cache, dpred):
        return self.head.backward(p, cache, dpred)

    def task_loss_and_grad(self, pred, label):
        return task_loss_and_grad(pred, label, self.task)

    def build_teacher(self, features, weights, names, renormalize=True):
        """Teacher feature over every modality in ``names``."""
        return build_teacher(features, np.asarray(weights), tuple(names), renormalize, names=list(self.modalities))

    def predictor_for(self, m):
        return self.predictors["shared"] if "shared" in self.predictors else self.predictors[m]

    def predictor_groups(self, mods):
        if "shared" in self.predictors:
            return [(self.predictors["shared"], list(mods))]
        return [(self.predictors[m], [m]) for m in mods]

    def reconstruction_loss(self, p, f_T):
        """Autoencoder MSE ``||Q(P_T f_T) - f_T||^2`` through the teacher projection.

        Trains the teacher projection and the inverse projection; ``f_T`` is a
        constant, so encoders get no gradient from this term.
        """
        z, pc = self.project(p, f_T, "teacher")
        out, qc = self.inv_proj.forward(p, z)
        r = out - f_T
        value = float(np.mean(r * r))

        def backward(scale=1.0):
            dz = self.inv_proj.backward(p, qc, (2.0 * scale / r.size) * r)
            self.project_backward(p, "teacher", pc, dz)

        return value, backward

    # ------------------------------------------------------ inference paths

    def refine_latents(self, p, feats, rng):
        """Adapter blend + DDIM for each student feature. Returns ``{m: z_hat}``."""
        mods = list(feats)
        out = {}
        for pred, group in self.predictor_groups(mods):
            Z = np.concatenate([self.project(p, feats[m], m)[0] for m in group], axis=0)
            gamma = self.adapter.forward(p, Z)[0]
            eps_T = rng.standard_normal(Z.shape)
            x = gamma * Z + (1.0 - gamma) * eps_T
            z_hat = ddim_refine(x, self.plan, self.schedule, pred, p)
            n = feats[group[0]].shape[0]
            for j, m in enumerate(group):
                out[m] = z_hat[j * n : (j + 1) * n]
        return out

    def refined_features(self, p, feats, rng):
        """Inverse-projected refined latents: the distilled features used at inference."""
        z_hat = self.refine_latents(p, feats, rng)
        return {m: self.inv_proj.forward(p, z)[0] for m, z in z_hat.items()}

    def fusion_features(self, p, batch, mask, rng=None, refined=True):
        feats = {m: self.encode(p, m, batch.observations[m])[0] for m in mask}
        if refined:
            if rng is None:
                raise ContractError("refined features need an rng for the adapter noise")
            return self.refined_features(p, feats, rng)
        return feats

    def predict(self, p, batch, mask, weights, rng=None, refined=True, renormalize=True):
        """Fused task prediction for one availability mask."""
        mask = tuple(mask)
        feats = self.fusion_features(p, batch, mask, rng, refined)
        w = fusion_weights(weights, list(self.modalities), mask, renormalize)
        fused = sum(wi * feats[m] for wi, m in zip(w, mask))
        return self.task_forward(p, fused)[0]

    def outer_theta_grad(self, p, batch, mask, weights, renormalize=True):
        """Accumulate ``dL_val/dTheta`` for the raw-feature fusion into ``p.grad``."""
        mask = tuple(mask)
        feats, caches = {}, {}
        for m in mask:
            feats[m], caches[m] = self.encode(p, m, batch.observations[m])
        w = fusion_weights(weights, list(self.modalities), mask, renormalize)
        fused = sum(wi * feats[m] for wi, m in zip(w, mask))
        pred, hc = self.task_forward(p, fused)
        loss, dpred = self.task_loss_and_grad(pred, batch.labels)
        dfused = self.task_backward(p, hc, dpred)
        for wi, m in zip(w, mask):
            self.encode_backward(p, m, caches[m], wi * dfused)
        return loss
