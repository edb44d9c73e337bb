"""Nested Purify-then-Align training loop, ablation variants and checkpoints."""

from dataclasses import asdict, dataclass, field, replace
import copy
import csv
import logging
import math
from pathlib import Path
import time

import numpy as np

from pta.data_synth import MaskSampler
from pta.errors import ConfigError, ContractError, TrainingAborted
from pta.eval_cli import VARIANTS, MetricsRow, enumerate_subsets
from pta.meta_purify import MetaOptimizer, MetaWeights, inner_step, outer_step
from pta.model_core import ModelConfig, PTANetwork, task_metric
from pta.nn import Adam, Params
from pta.serialize import read_blob_file, write_blob_file

log = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "phase", "L_task", "L_Diff", "L_KD", "L_inner", "L_outer"]


@dataclass
class TrainConfig:
    task: str = "regression"
    epochs: int = 40
    batch_size: int = None  # 16 regression / 32 classification
    lam: float = 0.1
    lr: float = None  # 5e-4 regression / 2e-4 classification
    meta_lr: float = 1e-2
    drop_prob: float = 0.5
    inner_steps_per_outer: int = 3
    n_steps: int = 5
    T: int = 200
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    variant: str = "full"
    outer_uses_refined: bool = True
    renormalize: bool = True
    literal_resoftmax: bool = False
    shared_predictor: bool = True
    d_f: int = 64
    d_z: int = 8
    enc_hidden: int = 64
    head_hidden: int = 64
    val_batch_size: int = None
    eval_seed: int = 12345

    def __post_init__(self):
        if self.task not in ("regression", "classification"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.batch_size is None:
            self.batch_size = 16 if self.task == "regression" else 32
        if self.lr is None:
            self.lr = 5e-4 if self.task == "regression" else 2e-4
        if self.val_batch_size is None:
            self.val_batch_size = self.batch_size
        for name in ("epochs", "batch_size", "inner_steps_per_outer", "n_steps", "T", "val_batch_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")

    @property
    def uses_diffusion(self):
        return self.variant != "no_diff" and self.lam > 0

    @property
    def uses_meta(self):
        return self.variant != "no_meta"

    def model_config(self, dataset):
        return ModelConfig(
            {s.name: s.obs_dim for s in dataset.specs},
            task=self.task,
            out_dim=dataset.label_dim,
            d_f=self.d_f,
            d_z=self.d_z,
            enc_hidden=self.enc_hidden,
            head_hidden=self.head_hidden,
            T=self.T,
            n_steps=self.n_steps,
            shared_predictor=self.shared_predictor,
        )

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    """Everything needed to resume a run bit-exactly."""

    config: TrainConfig
    seed: int
    net: PTANetwork
    params: Params
    opt: Adam
    meta: MetaWeights
    meta_opt: MetaOptimizer
    rng: np.random.Generator
    sampler: MaskSampler
    step: int = 0
    outer_steps: int = 0
    epoch: int = 0
    pos: int = 0
    perm: np.ndarray = None

    def copy(self):
        st = copy.copy(self)
        st.params = self.params.copy()
        st.opt = copy.deepcopy(self.opt)
        st.meta = copy.deepcopy(self.meta)
        st.meta_opt = copy.deepcopy(self.meta_opt)
        st.rng = copy.deepcopy(self.rng)
        st.sampler = copy.copy(self.sampler)
        st.perm = None if self.perm is None else self.perm.copy()
        return st


def init_state(config, dataset, seed):
    net = PTANetwork(config.model_config(dataset))
    p = net.init_params(seed)
    meta = MetaWeights.uniform(net.modalities, literal=config.literal_resoftmax)
    return TrainState(
        config=config,
        seed=int(seed),
        net=net,
        params=p,
        opt=Adam(p.data.size, config.lr),
        meta=meta,
        meta_opt=MetaOptimizer(len(net.modalities), config.meta_lr),
        rng=np.random.default_rng(np.random.SeedSequence([int(seed), 11])),
        sampler=MaskSampler(net.modalities, config.drop_prob),
    )


def _log_row(step, phase, meta, terms=None, l_outer=math.nan, uses_diff=True):
    row = {"step": step, "phase": phase, "L_task": math.nan, "L_Diff": math.nan, "L_KD": math.nan,
           "L_inner": math.nan, "L_outer": l_outer}
    if terms is not None:
        row["L_task"] = terms.l_task
        row["L_inner"] = terms.l_inner
        if uses_diff:
            row["L_Diff"] = terms.l_diff
            row["L_KD"] = terms.l_kd
    for m, w in zip(meta.names, meta.normalized):
        row["w_" + m] = float(w)
    for m, z in zip(meta.names, meta.logits):
        row["logit_" + m] = float(z)
    return row


def train(config, dataset, seed=0, state=None, max_steps=None, log_rows=None):
    """Run (or continue) the nested loop. Returns ``(state, log_rows)``.

    Per batch: sample a mask, take one inner Adam step on
    ``L_task + lam * L_DiffKD``. Every ``inner_steps_per_outer`` batches: one
    outer step on a validation batch. ``max_steps`` stops early so the run can
    be checkpointed and resumed.
    """
    train_set, val_set = dataset.train, dataset.val
    if len(train_set) == 0 or len(val_set) == 0:
        raise ConfigError("training and validation splits must be non-empty")
    if state is None:
        state = init_state(config, dataset, seed)
    cfg = state.config
    rows = [] if log_rows is None else log_rows
    B = min(cfg.batch_size, len(train_set))
    per_epoch = max(1, len(train_set) // B)
    total = cfg.epochs * per_epoch
    net, p = state.net, state.params
    last_good = state.copy()
    done = 0
    while state.step < total and (max_steps is None or done < max_steps):
        if state.perm is None or state.pos + B > len(train_set):
            state.perm = state.rng.permutation(len(train_set))
            state.pos = 0
            state.epoch += 1
        batch = train_set.take(state.perm[state.pos : state.pos + B])
        state.pos += B
        mask = state.sampler(state.rng)
        weights = state.meta.normalized
        logits_before = state.meta.logits.copy()
        try:
            terms = inner_step(net, p, state.opt, batch, mask.kept, weights, cfg.lam, state.rng,
                               use_diff=cfg.uses_diffusion, renormalize=cfg.renormalize)
        except TrainingAborted as exc:
            raise TrainingAborted(f"step {state.step}: {exc}", last_good=last_good, step=state.step) from None
        if not np.array_equal(logits_before, state.meta.logits):
            raise ContractError("inner step changed the meta weights")
        state.step += 1
        done += 1
        rows.append(_log_row(state.step, "inner", state.meta, terms, uses_diff=cfg.uses_diffusion))

        if cfg.uses_meta and state.step % cfg.inner_steps_per_outer == 0:
            Bv = min(cfg.val_batch_size, len(val_set))
            vbatch = val_set.take(np.sort(state.rng.choice(len(val_set), Bv, replace=False)))
            vmask = state.sampler(state.rng)
            before = p.data.tobytes()
            try:
                l_out = outer_step(net, p, vbatch, vmask.kept, state.meta, state.meta_opt, state.rng,
                                   use_refined=cfg.outer_uses_refined and cfg.uses_diffusion,
                                   renormalize=cfg.renormalize)
            except TrainingAborted as exc:
                raise TrainingAborted(f"step {state.step}: {exc}", last_good=last_good, step=state.step) from None
            if p.data.tobytes() != before:
                raise ContractError("outer step changed the model parameters")
            state.outer_steps += 1
            rows.append(_log_row(state.step, "outer", state.meta, l_outer=l_out))
            last_good = state.copy()
    return state, rows


def evaluate_subset(state, mask, split, seed=None):
    """Score one availability mask on ``split``. Returns a :class:`MetricsRow`."""
    cfg = state.config
    mask = tuple(mask)
    for m in mask:
        if m not in state.net.modalities:
            raise KeyError(f"modality {m!r} was not part of training")
    ordered = tuple(m for m in state.net.modalities if m in mask)
    t0 = time.perf_counter()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.eval_seed if seed is None else seed, 17]))
    pred = state.net.predict(state.params, split, ordered, state.meta.normalized, rng,
                             refined=cfg.uses_diffusion, renormalize=cfg.renormalize)
    value = task_metric(pred, split.labels, cfg.task)
    name = "mean_euclidean_error" if cfg.task == "regression" else "accuracy"
    return MetricsRow(ordered, state.seed, cfg.variant, name, value, time.perf_counter() - t0)


def evaluate_all(state, split):
    return [evaluate_subset(state, s, split) for s in enumerate_subsets(state.net.modalities)]


@dataclass
class AblationResult:
    rows: list
    logs: dict  # (variant, seed) -> log rows
    states: dict  # (variant, seed) -> final state


def run_ablation(config, dataset, seeds=None, variants=VARIANTS, keep_states=False, progress=None):
    """Train every variant for every seed and score every subset on the test split."""
    seeds = list(config.seeds if seeds is None else seeds)
    rows, logs, states = [], {}, {}
    for variant in variants:
        vcfg = replace(config, variant=variant)
        for seed in seeds:
            t0 = time.perf_counter()
            state, lrows = train(vcfg, dataset, seed)
            rows.extend(evaluate_all(state, dataset.test))
            logs[(variant, seed)] = lrows
            if keep_states:
                states[(variant, seed)] = state
            if progress:
                progress(variant, seed, time.perf_counter() - t0)
    return AblationResult(rows, logs, states)


# ----------------------------------------------------------------- logging


def write_log_csv(rows, path):
    if not rows:
        raise ConfigError("empty training log")
    wcols = [k for k in rows[0] if k.startswith("w_")]
    cols = LOG_COLUMNS + wcols
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow(["" if isinstance(r[c], float) and math.isnan(r[c]) else repr(r[c]) if isinstance(r[c], float)
                        else r[c] for c in cols])


def write_weight_csv(rows, path):
    """Per outer step: ``step``, the logits, the normalized weights and ``L_outer``.

    The first logged row is included as the starting point (``L_outer`` empty).
    """
    if not rows:
        raise ConfigError("empty training log")
    lcols = [k for k in rows[0] if k.startswith("logit_")]
    wcols = [k for k in rows[0] if k.startswith("w_")]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step"] + lcols + wcols + ["L_outer"])
        for i, r in enumerate(rows):
            if r["phase"] == "outer" or i == 0:
                l_out = "" if i == 0 and r["phase"] != "outer" else repr(r["L_outer"])
                w.writerow([r["step"]] + [repr(r[c]) for c in lcols + wcols] + [l_out])


def read_weight_trajectory(path):
    """``(steps, {modality: weights})`` from the outer rows of a log CSV, or None."""
    path = Path(path)
    if not path.exists():
        return None
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.DictReader(fh) if r["phase"] == "outer"]
    if not rows:
        return None
    mods = [k[2:] for k in rows[0] if k.startswith("w_")]
    return [int(r["step"]) for r in rows], {m: [float(r["w_" + m]) for r in rows] for m in mods}


# ------------------------------------------------------------- checkpoints


def _rng_state_to_json(state):
    return state  # PCG64 state is nested dicts of ints/strings


def save_checkpoint(state, path):
    """Float64 blob of every array plus a JSON header; round-trips bit-exactly."""
    arrays = {
        "theta": state.params.data,
        "theta.adam_m": state.opt.m,
        "theta.adam_v": state.opt.v,
        "meta.logits": state.meta.logits,
        "meta.adam_m": state.meta_opt.adam.m,
        "meta.adam_v": state.meta_opt.adam.v,
    }
    header = {
        "format": "pta-checkpoint",
        "train_config": asdict(state.config),
        "model_config": state.net.cfg.to_json(),
        "modalities": list(state.net.modalities),
        "layout": state.net.layout.to_json(),
        "seed": state.seed,
        "step": state.step,
        "outer_steps": state.outer_steps,
        "epoch": state.epoch,
        "pos": state.pos,
        "perm": None if state.perm is None else state.perm.tolist(),
        "theta_adam_t": state.opt.t,
        "meta_adam_t": state.meta_opt.adam.t,
        "meta_literal": state.meta.literal,
        "rng": _rng_state_to_json(state.rng.bit_generator.state),
        "mask_resamples": state.sampler.resamples,
        "schedule": state.net.schedule.to_json(),
        "ddim": {"n_steps": state.net.plan.n_steps, "delta": state.net.plan.delta},
    }
    write_blob_file(path, header, arrays, dtype="<f8")


def load_checkpoint(path):
    header, arrays = read_blob_file(path)
    if header.get("format") != "pta-checkpoint":
        raise ConfigError(f"{path} is not a training checkpoint")
    config = TrainConfig(**header["train_config"])
    mc = header["model_config"]
    net = PTANetwork(ModelConfig(**mc))
    if net.layout.to_json() != header["layout"]:
        raise ConfigError("checkpoint layout does not match the network built from its config")
    p = Params(net.layout, arrays["theta"])
    opt = Adam(p.data.size, config.lr)
    opt.m[:] = arrays["theta.adam_m"]
    opt.v[:] = arrays["theta.adam_v"]
    opt.t = header["theta_adam_t"]
    meta = MetaWeights(tuple(header["modalities"]), arrays["meta.logits"], header["meta_literal"])
    meta_opt = MetaOptimizer(len(meta.names), config.meta_lr)
    meta_opt.adam.m[:] = arrays["meta.adam_m"]
    meta_opt.adam.v[:] = arrays["meta.adam_v"]
    meta_opt.adam.t = header["meta_adam_t"]
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng"]
    sampler = MaskSampler(net.modalities, config.drop_prob)
    sampler.resamples = header["mask_resamples"]
    perm = None if header["perm"] is None else np.array(header["perm"], dtype=np.int64)
    return TrainState(config, header["seed"], net, p, opt, meta, meta_opt, rng, sampler,
                      header["step"], header["outer_steps"], header["epoch"], header["pos"], perm)


def export_model(state, path):
    """Parameters only, as 32-bit floats with named offsets (for inspection/sharing)."""
    header = {
        "format": "pta-model",
        "model_config": state.net.cfg.to_json(),
        "modalities": list(state.net.modalities),
        "seed": state.seed,
        "meta_weights": state.meta.normalized.tolist(),
    }
    arrays = {name: state.params[name] for name in state.net.layout.names()}
    write_blob_file(path, header, arrays, dtype="<f4")
