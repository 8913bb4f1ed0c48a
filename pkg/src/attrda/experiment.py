"""Mode x seed comparison runs: accuracy tables, per-class gains and the
label-count / gain correlation."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentSpec, model_config
from .data import SOURCE, TARGET, generate
from .errors import ContractError
from .metrics import EvalReport, evaluate, gain_label_correlation, per_class_gain
from .train import make_split, mode_flags, train


@dataclass
class Cell:
    mode: str
    seed: int
    target: EvalReport
    source: EvalReport
    final_loss: float


@dataclass
class SeedGain:
    seed: int
    deltas: np.ndarray
    source_counts: np.ndarray
    improved: float
    unchanged: float
    worse: float
    correlation: float          # NaN when undefined (e.g. balanced counts)


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    cells: list[Cell]
    gains: list[SeedGain]

    def accuracies(self, mode: str) -> np.ndarray:
        return np.array([c.target.accuracy for c in self.cells if c.mode == mode])

    def source_accuracies(self, mode: str) -> np.ndarray:
        return np.array([c.source.accuracy for c in self.cells if c.mode == mode])

    def mean_correlation(self) -> float:
        r = np.array([g.correlation for g in self.gains])
        return float(np.nanmean(r)) if np.isfinite(r).any() else math.nan


def _run_seed(spec: ExperimentSpec, seed: int) -> tuple[list[Cell], SeedGain | None]:
    gen = spec.generator
    train_ds = generate(gen.config(seed), "train")
    test_ds = generate(gen.config(seed, "test"), "test")
    split = make_split(train_ds, spec.setting)
    # semi-supervised runs are scored on the held-out classes only
    classes = split.heldout_classes if spec.setting == "semisup" else None
    mc = model_config(spec.model, gen.schema, gen.dims, seed)
    cells = []
    for mode in spec.modes:
        res = train(train_ds, mc, spec.train_for(mode, seed), split=split)
        cells.append(Cell(mode, seed, evaluate(res.params, test_ds, classes, TARGET),
                          evaluate(res.params, test_ds, None, SOURCE),
                          res.log[-1]["total"] if res.log else math.nan))
    gain = None
    if spec.gain:
        by_mode = {c.mode: c for c in cells}
        g = per_class_gain(by_mode[spec.gain[0]].target, by_mode[spec.gain[1]].target)
        counts = np.bincount(train_ds.labels[(train_ds.domain == SOURCE) & train_ds.labeled],
                             minlength=gen.schema.n_classes)
        try:
            r = gain_label_correlation(g.deltas, counts)
        except ContractError:
            r = math.nan
        gain = SeedGain(seed, g.deltas, counts, g.improved, g.unchanged, g.worse, r)
    return cells, gain


def run_experiment(spec: ExperimentSpec) -> ExperimentResult:
    """Run every (mode, seed) cell; results come back in spec order whatever the worker count."""
    if spec.workers > 1:
        with ThreadPoolExecutor(spec.workers) as pool:
            per_seed = list(pool.map(lambda s: _run_seed(spec, s), spec.seeds))
    else:
        per_seed = [_run_seed(spec, s) for s in spec.seeds]
    by_key = {(c.mode, c.seed): c for cells, _ in per_seed for c in cells}
    cells = [by_key[(m, s)] for m in spec.modes for s in spec.seeds]
    gains = [g for _, g in per_seed if g is not None]
    return ExperimentResult(spec, cells, gains)


# -- outputs -----------------------------------------------------------------

def _num(x: float) -> str:
    return "nan" if x != x else repr(float(x))


def _flags(mode: str) -> tuple[str, str, str]:
    f = mode_flags(mode)
    return tuple("yes" if f[k] else "no" for k in ("adapt", "attr", "consist"))


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _sd(a: np.ndarray) -> float:
    return float(a.std(ddof=1)) if len(a) > 1 else 0.0


def results_csv(res: ExperimentResult) -> str:
    rows = [["mode", "adapt", "attr", "consist", "seed", "target_accuracy", "source_accuracy", "final_loss"]]
    for c in res.cells:
        rows.append([c.mode, *_flags(c.mode), c.seed, _num(c.target.accuracy), _num(c.source.accuracy),
                     _num(c.final_loss)])
    return _csv(rows)


def summary_csv(res: ExperimentResult) -> str:
    rows = [["mode", "adapt", "attr", "consist", "n_seeds", "mean_accuracy", "sd_accuracy",
             "mean_source_accuracy"]]
    for m in res.spec.modes:
        a = res.accuracies(m)
        rows.append([m, *_flags(m), len(a), _num(a.mean()), _num(_sd(a)), _num(res.source_accuracies(m).mean())])
    return _csv(rows)


def gain_csv(res: ExperimentResult) -> str:
    rows = [["seed", "class_id", "n_source_labels", "delta"]]
    for g in res.gains:
        for k in range(len(g.deltas)):
            if not np.isnan(g.deltas[k]):
                rows.append([g.seed, k, int(g.source_counts[k]), _num(g.deltas[k])])
    return _csv(rows)


def correlation_csv(res: ExperimentResult) -> str:
    rows = [["seed", "pearson_r", "improved", "unchanged", "worse"]]
    for g in res.gains:
        rows.append([g.seed, _num(g.correlation), _num(g.improved), _num(g.unchanged), _num(g.worse)])
    if res.gains:
        rows.append(["mean", _num(res.mean_correlation()),
                     *(_num(np.mean([getattr(g, k) for g in res.gains])) for k in ("improved", "unchanged", "worse"))])
    return _csv(rows)


def table(res: ExperimentResult) -> str:
    """Human-readable comparison: one row per mode, accuracies in percent."""
    spec = res.spec
    scope = "held-out classes" if spec.setting == "semisup" else "all classes"
    head = f"{'Mode':<20}{'Adapt':<7}{'Attr':<6}{'Consist':<9}{'Acc (mean +- sd)':<18}" + \
        "".join(f"{'seed ' + str(s):>9}" for s in spec.seeds)
    lines = [f"setting {spec.setting}: target accuracy (%) on {scope}, {len(spec.seeds)} seed(s)", head,
             "-" * len(head)]
    for m in spec.modes:
        a = res.accuracies(m) * 100
        mark = ["x" if v == "yes" else "" for v in _flags(m)]
        lines.append(f"{m:<20}{mark[0]:<7}{mark[1]:<6}{mark[2]:<9}{f'{a.mean():.2f} +- {_sd(a):.2f}':<18}"
                     + "".join(f"{v:9.2f}" for v in a))
    if res.gains:
        b, i = spec.gain
        g = res.gains
        lines += ["", f"per-class gain of {i} over {b}: improved {np.mean([x.improved for x in g]):.2f}, "
                      f"unchanged {np.mean([x.unchanged for x in g]):.2f}, worse {np.mean([x.worse for x in g]):.2f}",
                  f"correlation(source label count, gain): {res.mean_correlation():.3f} (mean over seeds)"]
    return "\n".join(lines) + "\n"


OUTPUTS = {
    "results.csv": results_csv,
    "summary.csv": summary_csv,
    "gain.csv": gain_csv,
    "correlation.csv": correlation_csv,
    "table.txt": table,
}


def write_outputs(res: ExperimentResult, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, fn in OUTPUTS.items():
        if name in ("gain.csv", "correlation.csv") and not res.spec.gain:
            continue
        p = out / name
        p.write_text(fn(res), encoding="utf-8")
        paths.append(p)
    (out / "spec.ini").write_text(res.spec.render(), encoding="utf-8")
    return paths
