"""Split protocol, batch composition and the SGD-with-momentum training loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Tape
from .data import SOURCE, TARGET, Dataset, _stream
from .errors import ConfigError, ContractError, NumericError
from .losses import Batch, LossWeights, SoftLabelBank, build_soft_labels, total_objective
from .model import ModelConfig, ModelParams, init, save_checkpoint

log = logging.getLogger(__name__)

SETTINGS = ("unsup", "semisup", "full")

# mode -> (uses target labels, attribute heads, consistency, adaptation)
MODES: dict[str, tuple[bool, bool, bool, bool]] = {
    "source-only":        (False, False, False, False),
    "source-plus-target": (True, False, False, False),
    "source-att":         (True, True, False, False),
    "source-att-acl":     (True, True, True, False),
    "dc":                 (True, False, False, True),
    "dc-att-acl":         (True, True, True, True),
}


def mode_flags(mode: str) -> dict[str, bool]:
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; choose from {', '.join(MODES)}")
    tgt, att, acl, adapt = MODES[mode]
    return {"target_labels": tgt, "attr": att, "consist": acl, "adapt": adapt}


def mode_weights(mode: str, base: LossWeights) -> LossWeights:
    """The weight configuration a mode trains with; disabled terms are zeroed."""
    f = mode_flags(mode)
    return replace(
        base,
        attribute_softmax=base.attribute_softmax if f["attr"] else 0.0,
        consistency=base.consistency if f["consist"] else 0.0,
        confusion=base.confusion if f["adapt"] else 0.0,
        class_soft=base.class_soft if f["adapt"] else 0.0,
        attribute_soft=base.attribute_soft if (f["adapt"] and f["attr"]) else 0.0,
    )


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 64
    steps: int = 1000
    mode: str = "dc-att-acl"
    setting: str = "unsup"
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    refresh_epochs: int = 1
    checkpoint_every: int = 0
    log_wall_time: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("batch_size must be even and >= 2")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.setting not in SETTINGS:
            raise ConfigError(f"unknown setting {self.setting!r}")
        if self.refresh_epochs < 1:
            raise ConfigError("refresh_epochs must be >= 1")
        mode_flags(self.mode)

    @property
    def effective_weights(self) -> LossWeights:
        return mode_weights(self.mode, self.weights)


# ---------------------------------------------------------------------------
# split


@dataclass(frozen=True)
class SplitPlan:
    labeled_classes: tuple[int, ...]
    heldout_classes: tuple[int, ...]
    visible: np.ndarray  # per dataset row: may training read this row's labels

    @property
    def n_target_labeled(self) -> int:
        return int(self.visible.sum())


def make_split(dataset: Dataset, setting: str) -> SplitPlan:
    """Which target labels training may see.

    semisup: classes sorted by target-label count (descending, ties by lower
    id); the first ceil(K/2) keep their target labels, the rest are held
    out. unsup: no target label is visible. full: every target label is.
    Source rows are always visible.
    """
    k = dataset.schema.n_classes
    is_src = dataset.domain == SOURCE
    tgt_labeled = (dataset.domain == TARGET) & dataset.labeled & (dataset.labels >= 0)
    if setting == "unsup":
        return SplitPlan((), tuple(range(k)), is_src.copy())
    if setting == "full":
        return SplitPlan(tuple(range(k)), (), is_src | tgt_labeled)
    if setting != "semisup":
        raise ConfigError(f"unknown setting {setting!r}")
    counts = np.bincount(dataset.labels[tgt_labeled], minlength=k)
    order = sorted(range(k), key=lambda c: (-counts[c], c))
    n_lab = math.ceil(k / 2)
    labeled = tuple(sorted(order[:n_lab]))
    held = tuple(sorted(order[n_lab:]))
    visible = is_src | (tgt_labeled & np.isin(dataset.labels, labeled))
    return SplitPlan(labeled, held, visible)


class TrainView:
    """Label access for training: hidden rows read as -1 and are never touched."""

    def __init__(self, dataset: Dataset, split: SplitPlan, target_labels: bool = True):
        self.dataset = dataset
        vis = split.visible.copy()
        if not target_labels:
            vis &= dataset.domain == SOURCE
        self.visible = vis
        self.source_idx = dataset.indices(SOURCE)
        self.target_idx = dataset.indices(TARGET)

    def labels(self, idx: np.ndarray) -> np.ndarray:
        out = np.full(len(idx), -1, dtype=np.int64)
        ok = self.visible[idx]
        out[ok] = self.dataset.labels[idx[ok]]
        return out

    def attr_labels(self, idx: np.ndarray) -> np.ndarray:
        out = np.full((len(idx), self.dataset.schema.n_attributes), -1, dtype=np.int64)
        ok = self.visible[idx]
        out[ok] = self.dataset.attr_labels[idx[ok]]
        return out

    def source_subset(self) -> Dataset:
        return self.dataset.subset(self.source_idx)


def compose_batch(view: TrainView, batch_size: int, rng: np.random.Generator) -> Batch:
    """Half source rows, half target rows, each drawn uniformly with replacement."""
    if batch_size < 2 or batch_size % 2:
        raise ConfigError("batch_size must be even and >= 2")
    if not len(view.source_idx) or not len(view.target_idx):
        raise ContractError("dataset needs both source and target examples")
    h = batch_size // 2
    idx = np.concatenate([
        view.source_idx[rng.integers(0, len(view.source_idx), size=h)],
        view.target_idx[rng.integers(0, len(view.target_idx), size=h)],
    ])
    ds = view.dataset
    return Batch(ds.features[idx], ds.domain[idx], view.labels(idx), view.attr_labels(idx), idx)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    params: ModelParams
    log: list[dict]
    split: SplitPlan
    initial: ModelParams


def _update(params: ModelParams, velocity: dict[str, np.ndarray], grads: dict[str, np.ndarray],
            lr: float, momentum: float) -> None:
    for name, g in grads.items():
        v = velocity[name]
        v *= momentum
        v -= lr * g
        params.arrays[name] = params.arrays[name] + v


def train(dataset: Dataset, model_config: ModelConfig, config: TrainConfig,
          split: SplitPlan | None = None, out_dir=None, callback=None) -> TrainResult:
    """Train from a fresh init seeded by ``config.seed``.

    With ``out_dir`` the metrics log is written as JSON lines and checkpoints
    every ``checkpoint_every`` steps plus at the end. ``callback(step,
    params, batch, record)`` runs after each update.
    """
    config.validate()
    schema = dataset.schema
    model_config.check_schema(schema)
    flags = mode_flags(config.mode)
    weights = config.effective_weights
    if split is None:
        split = make_split(dataset, config.setting)
    view = TrainView(dataset, split, target_labels=flags["target_labels"])

    params = init(replace(model_config, seed=config.seed))
    initial = params.copy()
    velocity = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    rng = _stream(config.seed, "sampling")
    needs_bank = config.setting != "unsup" and (weights.class_soft or weights.attribute_soft)
    source = view.source_subset() if needs_bank else None
    half = config.batch_size // 2
    steps_per_epoch = max(1, math.ceil(max(len(view.source_idx), len(view.target_idx)) / half))
    bank: SoftLabelBank | None = None

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "metrics.jsonl", "w", encoding="utf-8")
    records: list[dict] = []
    t0 = time.perf_counter()
    try:
        for step in range(config.steps):
            epoch, pos = divmod(step, steps_per_epoch)
            if needs_bank and pos == 0 and epoch % config.refresh_epochs == 0:
                bank = build_soft_labels(source, params, schema, weights.temperature)
            batch = compose_batch(view, config.batch_size, rng)
            tape = Tape()
            bound = params.bind(tape)
            try:
                loss, report = total_objective(bound, batch, schema, weights, bank, config.setting)
            except NumericError as exc:
                raise NumericError(f"divergence at step {step}: {exc}") from None
            rec = {"step": step, **report.record()}
            if config.log_wall_time:
                rec["wall_time"] = round(time.perf_counter() - t0, 6)
            records.append(rec)
            if out is not None:
                log_fh.write(json.dumps(rec) + "\n")
            if loss.tape is not None:
                gm = tape.backward(loss)
                grads = {name: gm[t] for name, t in bound.items()}
                _update(params, velocity, grads, config.learning_rate, config.momentum)
            bad = [n for n, a in params.arrays.items() if not np.isfinite(a).all()]
            if bad:
                raise NumericError(f"divergence at step {step}: parameter {bad[0]} non-finite; terms {rec}")
            if callback is not None:
                callback(step, params, batch, rec)
            if out is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                save_checkpoint(params, out / f"checkpoint-{step + 1}.txt")
    finally:
        if out is not None:
            log_fh.close()
    if out is not None:
        save_checkpoint(params, out / "checkpoint.txt")
    return TrainResult(params, records, split, initial)
