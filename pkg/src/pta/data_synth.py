"""Synthetic multimodal data: one shared latent scene, several noisy linear views.

Each sample draws a latent ``u ~ N(0, I_k)``. Modality ``i`` observes
``A_i u + noise`` with isotropic Gaussian noise whose scale is set from a
target SNR in dB. Regression labels are ``B u``; classification labels are
``argmax(C u)``.

Generation is chunked: samples are produced in fixed blocks of
``BLOCK_SIZE`` indices, each from its own child seed. The bytes produced do
not depend on how blocks are scheduled.
"""

from dataclasses import dataclass, field
import hashlib
import json
import math
from pathlib import Path

import numpy as np

from pta.errors import ConfigError, ValidationError

BLOCK_SIZE = 256

DEFAULT_OBS_DIMS = (16, 12, 24)
DEFAULT_SNRS_DB = (20.0, 10.0, -10.0)
DEFAULT_NAMES = ("m1", "m2", "m3")


@dataclass
class ModalitySpec:
    name: str
    view_matrix: np.ndarray  # (obs_dim, k)
    noise_sigma: float
    target_snr: float = math.nan

    def __post_init__(self):
        self.view_matrix = np.asarray(self.view_matrix, dtype=np.float64)
        if self.view_matrix.ndim != 2:
            raise ConfigError(f"view matrix for {self.name!r} must be 2-D")
        if not self.noise_sigma >= 0:
            raise ConfigError(f"noise_sigma for {self.name!r} must be >= 0")

    @property
    def obs_dim(self):
        return self.view_matrix.shape[0]

    @property
    def latent_dim(self):
        return self.view_matrix.shape[1]

    @classmethod
    def from_snr(cls, name, view_matrix, snr_db):
        """Pick the noise scale so that E||A u||^2 / E||noise||^2 hits ``snr_db``."""
        A = np.asarray(view_matrix, dtype=np.float64)
        signal = float(np.sum(A * A))  # E||A u||^2 for u ~ N(0, I)
        sigma = math.sqrt(signal / (A.shape[0] * 10.0 ** (snr_db / 10.0)))
        return cls(name, A, sigma, float(snr_db))

    def to_json(self):
        return {
            "name": self.name,
            "obs_dim": self.obs_dim,
            "noise_sigma": self.noise_sigma,
            "target_snr": None if math.isnan(self.target_snr) else self.target_snr,
            "view_matrix": self.view_matrix.tolist(),
        }

    @classmethod
    def from_json(cls, d):
        snr = d.get("target_snr")
        return cls(d["name"], np.array(d["view_matrix"]), float(d["noise_sigma"]),
                   math.nan if snr is None else float(snr))


@dataclass(frozen=True)
class AvailabilityMask:
    """Non-empty subset of modality names, kept in declaration order."""

    kept: tuple

    def __post_init__(self):
        if not self.kept:
            raise ConfigError("availability mask must be non-empty")

    def __contains__(self, name):
        return name in self.kept

    def __iter__(self):
        return iter(self.kept)

    def __len__(self):
        return len(self.kept)

    @classmethod
    def full(cls, modalities):
        return cls(tuple(modalities))


@dataclass
class SyntheticSplit:
    """Column-oriented batch of samples: ``observations[name]`` is (n, obs_dim)."""

    observations: dict
    labels: np.ndarray
    latents: np.ndarray
    indices: np.ndarray
    task: str = "regression"

    def __len__(self):
        return len(self.indices)

    @property
    def modalities(self):
        return list(self.observations)

    def take(self, idx):
        idx = np.asarray(idx)
        return SyntheticSplit(
            {m: x[idx] for m, x in self.observations.items()},
            self.labels[idx],
            self.latents[idx],
            self.indices[idx],
            self.task,
        )

    def sample(self, i):
        """One sample as ``(observations, label)``."""
        return {m: x[i] for m, x in self.observations.items()}, self.labels[i]


@dataclass
class Dataset:
    specs: list
    seed: int
    n_samples: int
    split_fractions: tuple
    task: str
    train: SyntheticSplit
    val: SyntheticSplit
    test: SyntheticSplit
    label_matrix: np.ndarray = field(repr=False, default=None)

    @property
    def modalities(self):
        return [s.name for s in self.specs]

    @property
    def label_dim(self):
        return self.label_matrix.shape[0]

    def splits(self):
        return self.train, self.val, self.test


def make_modality_specs(obs_dims=DEFAULT_OBS_DIMS, snrs_db=DEFAULT_SNRS_DB, latent_dim=8, seed=0, names=None):
    """Random Gaussian view matrices (entries N(0, 1/k)) at the requested SNRs."""
    if len(obs_dims) != len(snrs_db):
        raise ConfigError("obs_dims and snrs_db must have the same length")
    if not obs_dims:
        raise ConfigError("at least one modality is required")
    names = list(names) if names is not None else [f"m{i + 1}" for i in range(len(obs_dims))]
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 101]))
    specs = []
    for name, d, snr in zip(names, obs_dims, snrs_db):
        A = rng.normal(0.0, 1.0 / math.sqrt(latent_dim), size=(int(d), int(latent_dim)))
        specs.append(ModalitySpec.from_snr(name, A, float(snr)))
    return specs


def _label_matrix(task, latent_dim, label_dim, seed):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 202]))
    return rng.normal(0.0, 1.0 / math.sqrt(latent_dim), size=(int(label_dim), int(latent_dim)))


def _generate_samples(specs, n, seed, label_matrix, task):
    k = specs[0].latent_dim
    u = np.empty((n, k))
    obs = {s.name: np.empty((n, s.obs_dim)) for s in specs}
    n_blocks = (n + BLOCK_SIZE - 1) // BLOCK_SIZE
    children = np.random.SeedSequence([int(seed), 303]).spawn(n_blocks)
    for b, child in enumerate(children):
        lo, hi = b * BLOCK_SIZE, min(n, (b + 1) * BLOCK_SIZE)
        rng = np.random.default_rng(child)
        ub = rng.standard_normal((hi - lo, k))
        u[lo:hi] = ub
        for s in specs:
            noise = rng.standard_normal((hi - lo, s.obs_dim))
            obs[s.name][lo:hi] = ub @ s.view_matrix.T + s.noise_sigma * noise
    scores = u @ label_matrix.T
    labels = scores if task == "regression" else np.argmax(scores, axis=1).astype(np.int64)
    return u, obs, labels


def generate_dataset(specs, n_samples, seed, split_fractions=(0.6, 0.2, 0.2), task="regression",
                     label_dim=6, n_classes=5):
    """Build disjoint train/val/test splits. Pure function of the arguments."""
    if not specs:
        raise ConfigError("at least one modality spec is required")
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    fr = tuple(float(f) for f in split_fractions)
    if len(fr) != 3 or any(f <= 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three positive numbers summing to 1, got {fr}")
    if task not in ("regression", "classification"):
        raise ConfigError(f"unknown task {task!r}")
    k = specs[0].latent_dim
    if any(s.latent_dim != k for s in specs):
        raise ConfigError("all view matrices must share the latent dimension")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ConfigError("modality names must be unique")

    out_dim = label_dim if task == "regression" else n_classes
    L = _label_matrix(task, k, out_dim, seed)
    u, obs, labels = _generate_samples(specs, n_samples, seed, L, task)

    perm = np.random.default_rng(np.random.SeedSequence([int(seed), 404])).permutation(n_samples)
    n_val = int(math.floor(fr[1] * n_samples))
    n_test = int(math.floor(fr[2] * n_samples))
    n_train = n_samples - n_val - n_test
    cuts = (perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :])
    parts = []
    for idx in cuts:
        idx = np.sort(idx)
        parts.append(SyntheticSplit({m: x[idx] for m, x in obs.items()}, labels[idx], u[idx], idx, task))
    return Dataset(list(specs), int(seed), int(n_samples), fr, task, *parts, label_matrix=L)


class MaskSampler:
    """Uniform per-modality dropout with resample-on-empty.

    ``resamples`` counts how many all-dropped draws were rejected.
    """

    def __init__(self, modalities, drop_prob=0.5):
        self.modalities = tuple(modalities)
        if not self.modalities:
            raise ConfigError("modalities must be non-empty")
        if not 0.0 <= drop_prob < 1.0:
            raise ConfigError(f"drop_prob must lie in [0, 1), got {drop_prob}")
        self.drop_prob = float(drop_prob)
        self.resamples = 0

    def __call__(self, rng):
        while True:
            keep = rng.random(len(self.modalities)) >= self.drop_prob
            if keep.any():
                return AvailabilityMask(tuple(m for m, k in zip(self.modalities, keep) if k))
            self.resamples += 1


def sample_availability_mask(modalities, drop_prob, rng):
    return MaskSampler(modalities, drop_prob)(rng)


def compute_empirical_snr(spec, n, seed):
    """``10 log10(mean ||A u||^2 / mean ||noise||^2)`` over ``n`` fresh draws.

    Returns ``inf`` when the modality is noiseless.
    """
    if n < 100:
        raise ConfigError("need at least 100 draws for an SNR estimate")
    if spec.noise_sigma == 0:
        return math.inf
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 505]))
    u = rng.standard_normal((n, spec.latent_dim))
    noise = spec.noise_sigma * rng.standard_normal((n, spec.obs_dim))
    sig = np.mean(np.sum((u @ spec.view_matrix.T) ** 2, axis=1))
    noi = np.mean(np.sum(noise**2, axis=1))
    return 10.0 * math.log10(sig / noi)


def split_snr_db(spec, split):
    """Empirical SNR of one generated split, using the stored latents."""
    clean = split.latents @ spec.view_matrix.T
    noise = split.observations[spec.name] - clean
    noi = np.mean(np.sum(noise**2, axis=1))
    if noi == 0:
        return math.inf
    return 10.0 * math.log10(np.mean(np.sum(clean**2, axis=1)) / noi)


# ---------------------------------------------------------------- persistence


def _write_split(split, stem):
    blocks = [("latents", split.latents)]
    blocks += [(f"obs:{m}", x) for m, x in split.observations.items()]
    blocks += [("labels", split.labels.reshape(len(split), -1))]
    shapes = []
    with open(stem.with_suffix(".f32"), "wb") as fh:
        for key, arr in blocks:
            a = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(a.tobytes())
            shapes.append({"key": key, "shape": list(a.shape)})
    sidecar = {"dtype": "float32", "byteorder": "little", "blocks": shapes,
               "indices": split.indices.tolist(), "task": split.task}
    stem.with_suffix(".json").write_text(json.dumps(sidecar, indent=1))
    return stem.with_suffix(".f32").read_bytes()


def _read_split(stem):
    side = json.loads(stem.with_suffix(".json").read_text())
    raw = np.fromfile(stem.with_suffix(".f32"), dtype="<f4")
    pos = 0
    arrays = {}
    for blk in side["blocks"]:
        n = int(np.prod(blk["shape"]))
        arrays[blk["key"]] = raw[pos : pos + n].reshape(blk["shape"]).astype(np.float64)
        pos += n
    if pos != raw.size:
        raise ValidationError(f"{stem}: sidecar shapes do not cover the binary file")
    obs = {k.split(":", 1)[1]: v for k, v in arrays.items() if k.startswith("obs:")}
    labels = arrays["labels"]
    if side["task"] == "classification":
        labels = labels[:, 0].astype(np.int64)
    return SyntheticSplit(obs, labels, arrays["latents"], np.array(side["indices"], dtype=np.int64), side["task"])


def save_dataset(ds, out_dir):
    """Write ``manifest.json`` plus one ``.f32``/``.json`` pair per split."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = hashlib.sha256()
    for name, split in zip(("train", "val", "test"), ds.splits()):
        digest.update(_write_split(split, out / name))
    manifest = {
        "specs": [s.to_json() for s in ds.specs],
        "seed": ds.seed,
        "n": ds.n_samples,
        "split_fractions": list(ds.split_fractions),
        "task": ds.task,
        "label_matrix": ds.label_matrix.tolist(),
        "checksum": digest.hexdigest(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def load_dataset(data_dir):
    d = Path(data_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    digest = hashlib.sha256()
    for name in ("train", "val", "test"):
        digest.update((d / f"{name}.f32").read_bytes())
    if digest.hexdigest() != manifest["checksum"]:
        raise ValidationError(f"{d}: checksum mismatch")
    splits = [_read_split(d / name) for name in ("train", "val", "test")]
    return Dataset([ModalitySpec.from_json(s) for s in manifest["specs"]], manifest["seed"], manifest["n"],
                   tuple(manifest["split_fractions"]), manifest["task"], *splits,
                   label_matrix=np.array(manifest["label_matrix"]))


def dataset_from_config(cfg):
    """Build specs and dataset from a plain dict (the ``data`` block of a run config)."""
    seed = int(cfg.get("seed", 0))
    specs = make_modality_specs(
        obs_dims=tuple(cfg.get("obs_dims", DEFAULT_OBS_DIMS)),
        snrs_db=tuple(cfg.get("snrs_db", DEFAULT_SNRS_DB)),
        latent_dim=int(cfg.get("latent_dim", 8)),
        seed=seed,
        names=cfg.get("names"),
    )
    return generate_dataset(
        specs,
        int(cfg.get("n_samples", 3000)),
        seed,
        tuple(cfg.get("split_fractions", (0.6, 0.2, 0.2))),
        task=cfg.get("task", "regression"),
        label_dim=int(cfg.get("label_dim", 6)),
        n_classes=int(cfg.get("n_classes", 5)),
    )
