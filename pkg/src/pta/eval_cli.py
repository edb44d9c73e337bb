"""Subset enumeration, report tables and plots for ablation sweeps."""

import csv
from dataclasses import dataclass, fields
import io
from itertools import combinations
import json
import logging
import math
from pathlib import Path

import numpy as np

from pta.errors import ConfigError, ValidationError

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_diff", "no_meta")
LOWER_IS_BETTER = {"mean_euclidean_error": True, "accuracy": False}


def enumerate_subsets(modalities):
    """All non-empty subsets, by size then lexicographically by declared position."""
    mods = list(modalities)
    if not 1 <= len(mods) <= 16:
        raise ConfigError(f"need between 1 and 16 modalities, got {len(mods)}")
    return [tuple(c) for k in range(1, len(mods) + 1) for c in combinations(mods, k)]


def subset_label(subset):
    return "+".join(subset)


@dataclass
class MetricsRow:
    subset: tuple
    seed: int
    variant: str
    metric_name: str
    metric_value: float
    runtime_s: float = 0.0

    def __post_init__(self):
        self.subset = tuple(self.subset)
        if not math.isfinite(self.metric_value):
            raise ValidationError(f"non-finite metric for {self.subset}")
        if self.metric_name == "accuracy" and not 0.0 <= self.metric_value <= 1.0:
            raise ValidationError("accuracy must lie in [0, 1]")
        if self.metric_name == "mean_euclidean_error" and self.metric_value < 0:
            raise ValidationError("error must be >= 0")


COLUMNS = [f.name for f in fields(MetricsRow)]


def _fmt(v):
    return f"{v:.4f}"


def _row_cells(r):
    return [subset_label(r.subset), str(r.seed), r.variant, r.metric_name, _fmt(r.metric_value), _fmt(r.runtime_s)]


def rows_to_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow(_row_cells(r))
    return buf.getvalue()


def rows_to_json(rows):
    items = [dict(zip(COLUMNS, _row_cells(r))) for r in rows]
    return json.dumps(items, indent=1) + "\n"


def _parse_cells(cells):
    subset, seed, variant, name, value, runtime = cells
    return MetricsRow(tuple(subset.split("+")), int(seed), variant, name, float(value), float(runtime))


def parse_report(text, fmt="csv"):
    if fmt == "csv":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if header != COLUMNS:
            raise ValidationError(f"unexpected header {header}")
        return [_parse_cells(c) for c in reader if c]
    if fmt == "json":
        return [_parse_cells([d[c] for c in COLUMNS]) for d in json.loads(text)]
    raise ConfigError(f"unknown format {fmt!r}")


def emit_report(rows, out_path, fmt="csv"):
    """Write rows to ``out_path``; floats carry 4 decimals, column order is fixed."""
    if not rows:
        raise ConfigError("no rows to emit")
    text = rows_to_csv(rows) if fmt == "csv" else rows_to_json(rows) if fmt == "json" else None
    if text is None:
        raise ConfigError(f"unknown format {fmt!r}")
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return out


@dataclass
class Aggregate:
    median: float
    q25: float
    q75: float
    n: int

    @property
    def iqr(self):
        return self.q75 - self.q25


class ReportTable:
    """Rows plus per-(subset, variant) medians and the per-variant best count.

    Ties in the best count go to the lexicographically first variant name.
    """

    def __init__(self, rows):
        if not rows:
            raise ConfigError("report needs at least one row")
        self.rows = list(rows)
        names = {r.metric_name for r in self.rows}
        if len(names) != 1:
            raise ValidationError(f"mixed metrics in one table: {sorted(names)}")
        self.metric_name = names.pop()
        self.lower_is_better = LOWER_IS_BETTER.get(self.metric_name, True)
        groups = {}
        for r in self.rows:
            groups.setdefault((r.subset, r.variant), []).append(r.metric_value)
        self.aggregates = {}
        for key, vals in groups.items():
            q25, med, q75 = np.percentile(vals, [25, 50, 75])
            self.aggregates[key] = Aggregate(float(med), float(q25), float(q75), len(vals))
        order = {s: i for i, s in enumerate(dict.fromkeys(r.subset for r in self.rows))}
        self.subsets = sorted(order, key=lambda s: (len(s), order[s]))
        self.variants = sorted({r.variant for r in self.rows})

    def median(self, subset, variant):
        return self.aggregates[(tuple(subset), variant)].median

    def winner(self, subset):
        cands = [(v, self.aggregates[(subset, v)].median) for v in self.variants if (subset, v) in self.aggregates]
        best = min(c[1] for c in cands) if self.lower_is_better else max(c[1] for c in cands)
        return sorted(v for v, m in cands if m == best)[0]

    @property
    def best_count(self):
        tally = {v: 0 for v in self.variants}
        for s in self.subsets:
            tally[self.winner(s)] += 1
        return tally

    def summary_rows(self):
        """One dict per subset with the median (IQR) of each variant."""
        out = []
        for s in self.subsets:
            row = {"subset": subset_label(s)}
            for v in self.variants:
                a = self.aggregates.get((s, v))
                if a is not None:
                    row[v] = a.median
                    row[v + "_iqr"] = a.iqr
            row["best"] = self.winner(s)
            out.append(row)
        return out

    def to_text(self):
        head = ["subset"] + list(self.variants)
        lines = [" | ".join(f"{h:>12}" for h in head)]
        for row in self.summary_rows():
            cells = [f"{row['subset']:>12}"]
            for v in self.variants:
                mark = "*" if row["best"] == v else " "
                cells.append(f"{row[v]:>11.4f}{mark}" if v in row else f"{'-':>12}")
            lines.append(" | ".join(cells))
        bc = self.best_count
        lines.append(" | ".join([f"{'best count':>12}"] + [f"{bc[v]:>12d}" for v in self.variants]))
        return "\n".join(lines)


def emit_summary(table, out_path):
    """Median/IQR table as CSV (one line per subset)."""
    cols = ["subset"] + [c for v in table.variants for c in (v, v + "_iqr")] + ["best"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in table.summary_rows():
        w.writerow([row.get(c) if isinstance(row.get(c), str) else _fmt(row[c]) for c in cols])
    bc = table.best_count
    w.writerow(["best_count"] + [x for v in table.variants for x in (str(bc[v]), "")] + [""])
    Path(out_path).write_text(buf.getvalue(), encoding="utf-8")


# ---------------------------------------------------------------------- plots


def grouped_bar_data(table):
    """``(subset labels, {variant: medians})`` in table order."""
    labels = [subset_label(s) for s in table.subsets]
    data = {v: [table.aggregates[(s, v)].median if (s, v) in table.aggregates else np.nan for s in table.subsets]
            for v in table.variants}
    return labels, data


def plot_metrics(table, out_dir, weight_logs=None):
    """Grouped bar chart of medians plus one weight-trajectory chart per run.

    ``weight_logs`` maps a run name to ``(steps, {modality: weights})``;
    runs without a log are skipped with a warning. Returns the written paths.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels, data = grouped_bar_data(table)
    written = []
    fig, ax = plt.subplots(figsize=(8, 4))
    width = 0.8 / max(1, len(data))
    x = np.arange(len(labels))
    for i, (variant, vals) in enumerate(sorted(data.items())):
        ax.bar(x + i * width, vals, width, label=variant)
    ax.set_xticks(x + width * (len(data) - 1) / 2)
    ax.set_xticklabels(labels)
    ax.set_ylabel(table.metric_name)
    ax.legend()
    fig.tight_layout()
    path = out / f"bars_{table.metric_name}.png"
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    written.append(path)

    if not weight_logs:
        log.warning("no weight log found; skipping trajectory chart")
        return written
    for run, entry in sorted(weight_logs.items()):
        if entry is None:
            log.warning("run %s has no weight log; skipping", run)
            continue
        steps, traj = entry
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for m, w in traj.items():
            ax.plot(steps, w, label=m)
        ax.set_xlabel("step")
        ax.set_ylabel("modality weight")
        ax.set_ylim(0, 1)
        ax.legend()
        fig.tight_layout()
        path = out / f"weights_{run}.png"
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        written.append(path)
    return written
