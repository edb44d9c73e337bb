"""Command line entry point: ``pta data gen | train | ablate | report | plot | dump-latents``.

A run config is a JSON file with an optional ``data`` block (arguments for
the synthetic generator) and an optional ``train`` block (TrainConfig fields).
``data.dir`` points at a dataset written by ``pta data gen`` instead.
"""

import argparse
import json
import logging
from pathlib import Path
import sys

import numpy as np

from pta.data_synth import dataset_from_config, load_dataset, save_dataset
from pta.errors import ConfigError
from pta.eval_cli import ReportTable, emit_report, emit_summary, parse_report, plot_metrics, rows_to_csv
from pta.trainer import (TrainConfig, evaluate_all, load_checkpoint, read_weight_trajectory, run_ablation,
                         save_checkpoint, train, write_log_csv, write_weight_csv, export_model)

log = logging.getLogger("pta")


def parse_seeds(text):
    """``"0..4"`` (inclusive range) or ``"0,3,7"``."""
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        lo, hi = int(lo), int(hi)
        if hi < lo:
            raise ConfigError(f"empty seed range {text!r}")
        return list(range(lo, hi + 1))
    return [int(s) for s in text.split(",") if s.strip()]


def load_config(path):
    cfg = json.loads(Path(path).read_text())
    unknown = set(cfg) - {"data", "train"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return cfg.get("data", {}), cfg.get("train", {})


def _dataset(data_cfg, data_dir=None):
    where = data_dir or data_cfg.get("dir")
    if where:
        return load_dataset(where)
    return dataset_from_config(data_cfg)


def _train_config(train_cfg, dataset):
    d = dict(train_cfg)
    d.setdefault("task", dataset.task)
    return TrainConfig.from_dict(d)


def _write_run(state, rows, out, append=False):
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "log.csv"
    if append and log_path.exists():
        old = log_path.read_text(encoding="utf-8")
        write_log_csv(rows, log_path)
        new = log_path.read_text(encoding="utf-8").split("\n", 1)[1]
        log_path.write_text(old + new, encoding="utf-8")
    else:
        write_log_csv(rows, log_path)
    write_weight_csv(rows, out / "weights.csv")
    save_checkpoint(state, out / "checkpoint.ptc")
    export_model(state, out / "model.f32")


# ------------------------------------------------------------------ commands


def cmd_data_gen(args):
    data_cfg, _ = load_config(args.config)
    ds = dataset_from_config(data_cfg)
    manifest = save_dataset(ds, args.out)
    print(f"wrote {ds.n_samples} samples to {args.out} (checksum {manifest['checksum'][:12]})")


def cmd_train(args):
    data_cfg, train_cfg = load_config(args.config)
    ds = _dataset(data_cfg, args.data)
    out = Path(args.out)
    if args.resume:
        state = load_checkpoint(args.resume)
        cfg = state.config
        rows = []
    else:
        cfg = _train_config(train_cfg, ds)
        state, rows = None, []
    state, rows = train(cfg, ds, args.seed, state=state, max_steps=args.max_steps, log_rows=rows)
    if not rows:
        raise ConfigError("nothing to do: the run is already complete")
    _write_run(state, rows, out, append=bool(args.resume))
    metrics = evaluate_all(state, ds.test)
    (out / "metrics.csv").write_text(rows_to_csv(metrics), encoding="utf-8")
    w = ", ".join(f"{m}={v:.3f}" for m, v in state.meta.as_dict().items())
    print(f"trained {cfg.variant} seed {state.seed}: {state.step} steps, weights {w}")


def cmd_ablate(args):
    data_cfg, train_cfg = load_config(args.config)
    ds = _dataset(data_cfg, args.data)
    cfg = _train_config(train_cfg, ds)
    seeds = parse_seeds(args.seeds)
    out = Path(args.out)

    def progress(variant, seed, dt):
        print(f"{variant} seed {seed}: {dt:.1f}s", flush=True)

    res = run_ablation(cfg, ds, seeds, keep_states=True, progress=progress)
    for (variant, seed), state in res.states.items():
        run_dir = out / f"{variant}_s{seed}"
        _write_run(state, res.logs[(variant, seed)], run_dir)
        rows = [r for r in res.rows if r.variant == variant and r.seed == seed]
        (run_dir / "metrics.csv").write_text(rows_to_csv(rows), encoding="utf-8")
    emit_report(res.rows, out / "rows.csv", "csv")
    print(ReportTable(res.rows).to_text())


def collect_rows(runs_dir):
    runs = Path(runs_dir)
    files = sorted(runs.glob("*/metrics.csv"))
    if not files:
        raise ConfigError(f"no */metrics.csv under {runs}")
    rows = []
    for f in files:
        rows.extend(parse_report(f.read_text(encoding="utf-8"), "csv"))
    return rows


def cmd_report(args):
    rows = collect_rows(args.runs)
    out = Path(args.out)
    table = ReportTable(rows)
    emit_report(rows, out / f"table.{args.format}", args.format)
    emit_summary(table, out / "summary.csv")
    (out / "sources.json").write_text(json.dumps({"runs": str(Path(args.runs).resolve())}, indent=1))
    print(table.to_text())


def cmd_plot(args):
    report = Path(args.report)
    fmt = "json" if report.suffix == ".json" else "csv"
    table = ReportTable(parse_report(report.read_text(encoding="utf-8"), fmt))
    runs_dir = args.runs
    sources = report.parent / "sources.json"
    if runs_dir is None and sources.exists():
        runs_dir = json.loads(sources.read_text())["runs"]
    logs = {}
    if runs_dir is not None:
        for d in sorted(Path(runs_dir).iterdir()):
            if d.is_dir():
                logs[d.name] = read_weight_trajectory(d / "log.csv")
    for path in plot_metrics(table, args.out, logs):
        print(path)


def cmd_dump_latents(args):
    from pta.serialize import write_flat_f32

    state = load_checkpoint(args.checkpoint)
    data_cfg = load_config(args.config)[0] if args.config else {}
    ds = _dataset(data_cfg, args.data)
    split = {"train": ds.train, "val": ds.val, "test": ds.test}[args.split]
    if args.limit:
        split = split.take(np.arange(min(args.limit, len(split))))
    net, p = state.net, state.params
    mask = tuple(args.mask.split(",")) if args.mask else net.modalities
    feats = {m: net.encode(p, m, split.observations[m])[0] for m in net.modalities}
    f_T = net.build_teacher(feats, state.meta.normalized, net.modalities, state.config.renormalize)
    arrays = {"z_T": net.project(p, f_T, "teacher")[0]}
    for m in mask:
        arrays[f"z_S.{m}"] = net.project(p, feats[m], m)[0]
    rng = np.random.default_rng(np.random.SeedSequence([state.config.eval_seed, 17]))
    for m, z in net.refine_latents(p, {m: feats[m] for m in mask}, rng).items():
        arrays[f"refined.{m}"] = z
    write_flat_f32(args.out, arrays)
    print(f"wrote {', '.join(arrays)} to {args.out}")


# ------------------------------------------------------------------- parser


def build_parser():
    ap = argparse.ArgumentParser(prog="pta", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    data = sub.add_parser("data", help="dataset utilities")
    dsub = data.add_subparsers(dest="data_command", required=True)
    gen = dsub.add_parser("gen", help="generate a synthetic dataset")
    gen.add_argument("--config", required=True)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_data_gen)

    tr = sub.add_parser("train", help="train one run")
    tr.add_argument("--config", required=True)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--out", required=True)
    tr.add_argument("--data", help="dataset directory (overrides the config)")
    tr.add_argument("--max-steps", type=int, help="stop after this many inner steps")
    tr.add_argument("--resume", help="checkpoint to continue from")
    tr.set_defaults(func=cmd_train)

    ab = sub.add_parser("ablate", help="all variants x seeds")
    ab.add_argument("--config", required=True)
    ab.add_argument("--seeds", default="0..4")
    ab.add_argument("--out", required=True)
    ab.add_argument("--data")
    ab.set_defaults(func=cmd_ablate)

    rp = sub.add_parser("report", help="aggregate run metrics into a table")
    rp.add_argument("--runs", required=True)
    rp.add_argument("--format", choices=["csv", "json"], default="csv")
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=cmd_report)

    pl = sub.add_parser("plot", help="bar chart and weight trajectories")
    pl.add_argument("--report", required=True)
    pl.add_argument("--out", required=True)
    pl.add_argument("--runs", help="run directory holding log.csv files")
    pl.set_defaults(func=cmd_plot)

    dl = sub.add_parser("dump-latents", help="write teacher, student and refined latents")
    dl.add_argument("--checkpoint", required=True)
    dl.add_argument("--config")
    dl.add_argument("--data")
    dl.add_argument("--split", choices=["train", "val", "test"], default="test")
    dl.add_argument("--mask", help="comma-separated modalities (default: all)")
    dl.add_argument("--limit", type=int)
    dl.add_argument("--out", required=True)
    dl.set_defaults(func=cmd_dump_latents)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"pta: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
