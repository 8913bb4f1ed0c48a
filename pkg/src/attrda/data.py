"""Two-domain datasets: in-memory container, synthetic generator, text I/O.

Dataset file format::

    dims <D> examples <N>
    <s|t> <0|1> <class|-> <a1,a2,...|-> <f_1> ... <f_D>

one line per example, floats written with 17 significant digits.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataError
from .schema import AttributeSchema

SOURCE, TARGET = 0, 1
SPLITS = ("train", "validation", "test")


@dataclass(frozen=True)
class Example:
    features: np.ndarray
    domain: int
    class_label: int | None
    attribute_labels: tuple[int, ...] | None
    labeled: bool


@dataclass
class Dataset:
    """Column-oriented example store.

    Missing labels are ``-1`` in ``labels`` / ``attr_labels``.
    """

    schema: AttributeSchema
    features: np.ndarray      # N x D
    domain: np.ndarray        # N, SOURCE or TARGET
    labels: np.ndarray        # N
    attr_labels: np.ndarray   # N x N_a
    labeled: np.ndarray       # N, bool
    split: str = "train"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DataError("features must be a 2-D array")
        n = len(self.features)
        self.domain = np.asarray(self.domain, dtype=np.int64).reshape(n)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(n)
        self.attr_labels = np.asarray(self.attr_labels, dtype=np.int64).reshape(n, self.schema.n_attributes)
        self.labeled = np.asarray(self.labeled, dtype=bool).reshape(n)
        if self.split not in SPLITS:
            raise DataError(f"unknown split tag {self.split!r}")
        self.validate()

    def validate(self) -> None:
        k = self.schema.n_classes
        if not np.isin(self.domain, (SOURCE, TARGET)).all():
            raise DataError("domain must be source or target")
        bad = np.flatnonzero((self.labels < -1) | (self.labels >= k))
        if bad.size:
            raise DataError(f"example {bad[0]}: class label {self.labels[bad[0]]} outside [0, {k})")
        for n, a in enumerate(self.schema.attributes):
            col = self.attr_labels[:, n]
            bad = np.flatnonzero((col < -1) | (col >= a.n_categories))
            if bad.size:
                raise DataError(f"example {bad[0]}: {a.name} label {col[bad[0]]} out of range")
        unlabeled_class = np.flatnonzero(self.labeled & (self.labels < 0))
        if unlabeled_class.size:
            raise DataError(f"example {unlabeled_class[0]}: labeled but no class label")
        has = self.labels >= 0
        expected = self.class_attribute_table()[np.where(has, self.labels, 0)]
        mism = has[:, None] & (self.attr_labels >= 0) & (self.attr_labels != expected)
        rows = np.flatnonzero(mism.any(axis=1))
        if rows.size:
            raise DataError(f"example {rows[0]}: attribute label inconsistent with schema")
        missing = np.flatnonzero(self.labeled[:, None] & (self.attr_labels < 0))
        if missing.size:
            raise DataError(f"example {missing[0] // max(1, self.schema.n_attributes)}: labeled but attribute labels missing")

    def class_attribute_table(self) -> np.ndarray:
        return np.array([a.class_to_category for a in self.schema.attributes], dtype=np.int64).T

    def __len__(self) -> int:
        return len(self.features)

    @property
    def dims(self) -> int:
        return self.features.shape[1]

    @property
    def n_target(self) -> int:
        return int((self.domain == TARGET).sum())

    @property
    def n_target_labeled(self) -> int:
        return int(((self.domain == TARGET) & self.labeled).sum())

    def example(self, i: int) -> Example:
        c = int(self.labels[i])
        attrs = tuple(int(v) for v in self.attr_labels[i])
        return Example(
            self.features[i].copy(), int(self.domain[i]),
            None if c < 0 else c,
            None if min(attrs) < 0 else attrs,
            bool(self.labeled[i]),
        )

    def __iter__(self) -> Iterator[Example]:
        return (self.example(i) for i in range(len(self)))

    def subset(self, mask_or_index) -> "Dataset":
        idx = np.asarray(mask_or_index)
        return Dataset(self.schema, self.features[idx], self.domain[idx], self.labels[idx],
                       self.attr_labels[idx], self.labeled[idx], self.split)

    def indices(self, domain: int) -> np.ndarray:
        return np.flatnonzero(self.domain == domain)

    @classmethod
    def from_examples(cls, schema: AttributeSchema, examples, split: str = "train") -> "Dataset":
        examples = list(examples)
        if not examples:
            raise DataError("dataset needs at least one example")
        na = schema.n_attributes
        return cls(
            schema,
            np.stack([np.asarray(e.features, dtype=np.float64) for e in examples]),
            [e.domain for e in examples],
            [-1 if e.class_label is None else e.class_label for e in examples],
            [[-1] * na if e.attribute_labels is None else list(e.attribute_labels) for e in examples],
            [e.labeled for e in examples],
            split,
        )


# ---------------------------------------------------------------------------
# synthetic generator


def _stream(seed: int, *names) -> np.random.Generator:
    """Named, independent RNG substream derived from one seed."""
    key = [int(seed) & 0xFFFFFFFF]
    for n in names:
        key.append(n if isinstance(n, int) else zlib.crc32(str(n).encode()))
    return np.random.default_rng(np.random.SeedSequence(key))


@dataclass
class GeneratorConfig:
    """Knobs of the synthetic source/target feature generator.

    ``shift_matrix``/``shift_bias`` default to ``I + shift_scale * G/sqrt(D)``
    and ``bias_scale * g`` with Gaussian ``G, g`` drawn from the seed.
    """

    schema: AttributeSchema
    dims: int = 32
    anchor_scale: float = 1.0
    prototype_noise: float = 0.5
    within_noise: float = 0.5
    shift_scale: float = 1.0
    bias_scale: float = 0.5
    target_noise: float = 0.5
    source_counts: tuple[int, ...] | int = 20
    target_counts: tuple[int, ...] | int = 20
    seed: int = 0
    shift_matrix: np.ndarray | None = field(default=None, repr=False)
    shift_bias: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        k = self.schema.n_classes
        for name in ("source_counts", "target_counts"):
            v = getattr(self, name)
            v = (int(v),) * k if np.isscalar(v) else tuple(int(x) for x in v)
            setattr(self, name, v)
        self.validate()

    def validate(self) -> None:
        k = self.schema.n_classes
        if self.dims < 1:
            raise ConfigError("dims must be >= 1")
        for name in ("anchor_scale", "prototype_noise", "within_noise", "shift_scale",
                     "bias_scale", "target_noise"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("source_counts", "target_counts"):
            v = getattr(self, name)
            if len(v) != k:
                raise ConfigError(f"{name} has {len(v)} entries, expected {k}")
            if min(v) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.shift_matrix is not None and np.shape(self.shift_matrix) != (self.dims, self.dims):
            raise ConfigError(f"shift_matrix must be {self.dims}x{self.dims}")
        if self.shift_bias is not None and np.shape(self.shift_bias) != (self.dims,):
            raise ConfigError(f"shift_bias must have length {self.dims}")

    def resolved_shift(self) -> tuple[np.ndarray, np.ndarray]:
        d = self.dims
        rng = _stream(self.seed, "shift")
        g = rng.standard_normal((d, d))
        h = rng.standard_normal(d)
        a = np.eye(d) + self.shift_scale * g / np.sqrt(d) if self.shift_matrix is None \
            else np.asarray(self.shift_matrix, dtype=np.float64)
        b = self.bias_scale * h if self.shift_bias is None else np.asarray(self.shift_bias, dtype=np.float64)
        return a, b

    def with_seed(self, seed: int) -> "GeneratorConfig":
        return replace(self, seed=seed)


def prototypes(config: GeneratorConfig) -> tuple[np.ndarray, list[np.ndarray], np.ndarray]:
    """Class prototypes plus the anchors and offsets they are built from.

    ``mu[c] = sum_n anchors[n][category_n(c)] + offsets[c]``
    """
    schema, d = config.schema, config.dims
    rng = _stream(config.seed, "prototypes")
    anchors = [config.anchor_scale * rng.standard_normal((a.n_categories, d)) for a in schema.attributes]
    offsets = config.prototype_noise * rng.standard_normal((schema.n_classes, d))
    mu = offsets.copy()
    for a, anc in zip(schema.attributes, anchors):
        mu += anc[list(a.class_to_category)]
    return mu, anchors, offsets


def generate(config: GeneratorConfig, split: str = "train") -> Dataset:
    """Sample a labeled two-domain dataset.

    Prototypes and the domain shift depend only on ``config.seed``, so the
    train/validation/test splits of one config share them; the noise draws
    come from a per-(split, class, domain) substream. Rows are ordered by
    domain, then class.
    """
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    config.validate()
    schema, d = config.schema, config.dims
    mu, _, _ = prototypes(config)
    a_mat, b_vec = config.resolved_shift()
    table = np.array([a.class_to_category for a in schema.attributes], dtype=np.int64).T

    feats, doms, labels = [], [], []
    for dom, counts in ((SOURCE, config.source_counts), (TARGET, config.target_counts)):
        for c in range(schema.n_classes):
            n = counts[c]
            if n == 0:
                continue
            rng = _stream(config.seed, "samples", split, c, dom)
            x = mu[c] + config.within_noise * rng.standard_normal((n, d))
            if dom == TARGET:
                x = x @ a_mat.T + b_vec + config.target_noise * rng.standard_normal((n, d))
            feats.append(x)
            doms.append(np.full(n, dom))
            labels.append(np.full(n, c))
    if not feats:
        raise ConfigError("all per-class counts are zero")
    labels = np.concatenate(labels)
    return Dataset(
        schema, np.concatenate(feats), np.concatenate(doms), labels,
        table[labels], np.ones(len(labels), dtype=bool), split,
    )


def imbalanced_counts(k: int, low: int, high: int, seed: int, stream: str = "counts") -> tuple[int, ...]:
    """Per-class counts drawn uniformly from ``[low, high]``."""
    if not 0 <= low <= high:
        raise ConfigError("need 0 <= low <= high")
    rng = _stream(seed, stream)
    return tuple(int(v) for v in rng.integers(low, high + 1, size=k))


# ---------------------------------------------------------------------------
# file I/O


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def dumps_dataset(ds: Dataset) -> str:
    out = [f"dims {ds.dims} examples {len(ds)}"]
    for i in range(len(ds)):
        c = int(ds.labels[i])
        attrs = ds.attr_labels[i]
        out.append(" ".join((
            "s" if ds.domain[i] == SOURCE else "t",
            "1" if ds.labeled[i] else "0",
            "-" if c < 0 else str(c),
            "-" if (attrs < 0).any() else ",".join(str(int(v)) for v in attrs),
            " ".join(_fmt(v) for v in ds.features[i]),
        )))
    return "\n".join(out) + "\n"


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_text(dumps_dataset(ds), encoding="utf-8")


def loads_dataset(text: str, schema: AttributeSchema, split: str = "train") -> Dataset:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DataError("empty dataset file")
    head = lines[0].split()
    if len(head) != 4 or head[0] != "dims" or head[2] != "examples":
        raise DataError("line 1: expected 'dims <D> examples <N>'")
    try:
        d, n = int(head[1]), int(head[3])
    except ValueError:
        raise DataError("line 1: non-integer dims/examples") from None
    if len(lines) - 1 != n:
        raise DataError(f"header declares {n} examples, file has {len(lines) - 1}")
    na = schema.n_attributes
    feats = np.empty((n, d))
    dom = np.empty(n, dtype=np.int64)
    lab = np.empty(n, dtype=np.int64)
    attrs = np.empty((n, na), dtype=np.int64)
    flag = np.empty(n, dtype=bool)
    for i, line in enumerate(lines[1:]):
        lineno = i + 2
        tok = line.split()
        if len(tok) != 4 + d:
            raise DataError(f"line {lineno}: expected {4 + d} fields, got {len(tok)}")
        if tok[0] not in ("s", "t") or tok[1] not in ("0", "1"):
            raise DataError(f"line {lineno}: bad domain/labeled field")
        dom[i] = SOURCE if tok[0] == "s" else TARGET
        flag[i] = tok[1] == "1"
        try:
            lab[i] = -1 if tok[2] == "-" else int(tok[2])
            if tok[3] == "-":
                attrs[i] = -1
            else:
                vals = [int(v) for v in tok[3].split(",")]
                if len(vals) != na:
                    raise DataError(f"line {lineno}: expected {na} attribute labels")
                attrs[i] = vals
            feats[i] = [float(v) for v in tok[4:]]
        except ValueError as exc:
            raise DataError(f"line {lineno}: {exc}") from None
    try:
        return Dataset(schema, feats, dom, lab, attrs, flag, split)
    except DataError as exc:
        msg = str(exc)
        if msg.startswith("example "):
            idx = int(msg.split()[1].rstrip(":"))
            msg = f"line {idx + 2}:" + msg.split(":", 1)[1]
        raise DataError(msg) from None


def load_dataset(path, schema: AttributeSchema, split: str = "train") -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"dataset file not found: {path}")
    return loads_dataset(path.read_text(encoding="utf-8"), schema, split)
