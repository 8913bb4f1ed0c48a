"""Shared backbone MLP with fine-grained, per-attribute and domain heads.

Parameters live in a flat ordered mapping of numpy arrays. Forward functions
take a *bound* mapping (name -> Tensor) produced by :meth:`ModelParams.bind`,
so a caller chooses per parameter group whether it is a tape leaf or a
constant.

Parameter names::

    rep.W{i}, rep.b{i}     backbone layers (ReLU between, none after the last)
    cls.W, cls.b           fine-grained head
    att{n}.W, att{n}.b     attribute heads
    dom.W0, dom.b0, dom.W1, dom.b1   two-layer domain classifier
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import _stream
from .errors import ConfigError, DataError, ShapeError
from .schema import AttributeSchema

GROUPS = ("rep", "cls", "att", "dom")


@dataclass
class ModelConfig:
    input_dim: int
    n_classes: int
    attribute_sizes: tuple[int, ...]
    hidden: tuple[int, ...] = (64, 64)
    feature_dim: int = 64
    domain_hidden: int = 64
    seed: int = 0

    def __post_init__(self):
        self.attribute_sizes = tuple(int(v) for v in self.attribute_sizes)
        self.hidden = tuple(int(v) for v in self.hidden)
        sizes = (self.input_dim, self.n_classes, self.feature_dim, self.domain_hidden,
                 *self.attribute_sizes, *self.hidden)
        if min(sizes) < 1:
            raise ConfigError("all model sizes must be >= 1")

    @classmethod
    def for_schema(cls, schema: AttributeSchema, input_dim: int, **kw) -> "ModelConfig":
        return cls(input_dim, schema.n_classes, tuple(a.n_categories for a in schema.attributes), **kw)

    def check_schema(self, schema: AttributeSchema) -> None:
        if self.n_classes != schema.n_classes or \
                self.attribute_sizes != tuple(a.n_categories for a in schema.attributes):
            raise ConfigError("model head sizes do not match the schema")

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        dims = (self.input_dim, *self.hidden, self.feature_dim)
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            shapes[f"rep.W{i}"] = (a, b)
            shapes[f"rep.b{i}"] = (b,)
        f = self.feature_dim
        shapes["cls.W"] = (f, self.n_classes)
        shapes["cls.b"] = (self.n_classes,)
        for n, k in enumerate(self.attribute_sizes):
            shapes[f"att{n}.W"] = (f, k)
            shapes[f"att{n}.b"] = (k,)
        shapes["dom.W0"] = (f, self.domain_hidden)
        shapes["dom.b0"] = (self.domain_hidden,)
        shapes["dom.W1"] = (self.domain_hidden, 2)
        shapes["dom.b1"] = (2,)
        return shapes


def group_of(name: str) -> str:
    head = name.split(".", 1)[0]
    return "att" if head.startswith("att") else head


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        shapes = self.config.layer_shapes()
        if list(self.arrays) != list(shapes):
            raise ConfigError("parameter names do not match the model config")
        for name, shape in shapes.items():
            arr = np.asarray(self.arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"{name}: shape {arr.shape}, expected {shape}")
            if not np.isfinite(arr).all():
                raise DataError(f"{name}: non-finite parameter")
            self.arrays[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def names(self, *groups: str) -> list[str]:
        return [n for n in self.arrays if not groups or group_of(n) in groups]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def bind(self, tape: Tape | None, frozen: tuple[str, ...] = ()) -> dict[str, Tensor]:
        """Tensors for every parameter; groups in ``frozen`` (or all, if no tape) are constants."""
        out = {}
        for name, arr in self.arrays.items():
            if tape is None or group_of(name) in frozen:
                out[name] = ad.constant(arr)
            else:
                out[name] = tape.leaf(arr)
        return out

    def equal(self, other: "ModelParams") -> bool:
        return list(self.arrays) == list(other.arrays) and all(
            np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays)


def init(config: ModelConfig) -> ModelParams:
    """Uniform(+-sqrt(3/fan_in)) weights (variance 1/fan_in), zero biases."""
    arrays = {}
    for name, shape in config.layer_shapes().items():
        if len(shape) == 1:
            arrays[name] = np.zeros(shape)
        else:
            bound = np.sqrt(3.0 / shape[0])
            arrays[name] = _stream(config.seed, "init", name).uniform(-bound, bound, size=shape)
    return ModelParams(config, arrays)


def _n_rep_layers(p: dict[str, Tensor]) -> int:
    return sum(1 for n in p if n.startswith("rep.W"))


def forward_features(p: dict[str, Tensor], x) -> Tensor:
    x = x if isinstance(x, Tensor) else ad.constant(x)
    depth = _n_rep_layers(p)
    if x.ndim != 2 or x.shape[1] != p["rep.W0"].shape[0]:
        raise ShapeError(f"input of shape {x.shape} does not match backbone input dim {p['rep.W0'].shape[0]}")
    h = x
    for i in range(depth):
        h = h @ p[f"rep.W{i}"] + p[f"rep.b{i}"]
        if i < depth - 1:
            h = ad.relu(h)
    return h


def _check_features(p: dict[str, Tensor], f: Tensor) -> None:
    want = p["cls.W"].shape[0]
    if f.ndim != 2 or f.shape[1] != want:
        raise ShapeError(f"features of shape {f.shape}, expected (B, {want})")


def forward_class_scores(p: dict[str, Tensor], f: Tensor) -> Tensor:
    _check_features(p, f)
    return f @ p["cls.W"] + p["cls.b"]


def forward_attribute_scores(p: dict[str, Tensor], f: Tensor, n: int) -> Tensor:
    _check_features(p, f)
    if f"att{n}.W" not in p or n < 0:
        raise ShapeError(f"no attribute head {n}")
    return f @ p[f"att{n}.W"] + p[f"att{n}.b"]


def forward_domain_scores(p: dict[str, Tensor], f: Tensor) -> Tensor:
    _check_features(p, f)
    h = ad.relu(f @ p["dom.W0"] + p["dom.b0"])
    return h @ p["dom.W1"] + p["dom.b1"]


def predict_features(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return forward_features(params.bind(None), np.asarray(x, dtype=np.float64)).data


def predict_class_scores(params: ModelParams, x: np.ndarray) -> np.ndarray:
    p = params.bind(None)
    return forward_class_scores(p, forward_features(p, np.asarray(x, dtype=np.float64))).data


# ---------------------------------------------------------------------------
# checkpoints


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> None:
    """Text checkpoint: ``config key value`` lines, then one ``param`` line per array."""
    cfg = asdict(params.config)
    lines = ["# attrda checkpoint"]
    for k, v in cfg.items():
        v = ",".join(str(i) for i in v) if isinstance(v, (tuple, list)) else str(v)
        lines.append(f"config {k} {v if v else '-'}")
    for k, v in (extra or {}).items():
        lines.append(f"meta {k} {v}")
    for name, arr in params.arrays.items():
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"param {name} {shape} " + " ".join(_fmt(v) for v in arr.reshape(-1)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path) -> ModelParams:
    cfg: dict = {}
    arrays: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        tok = line.split()
        try:
            if tok[0] == "config":
                cfg[tok[1]] = tok[2]
            elif tok[0] == "param":
                shape = tuple(int(s) for s in tok[2].split(","))
                vals = np.array([float(v) for v in tok[3:]])
                arrays[tok[1]] = vals.reshape(shape)
            elif tok[0] != "meta":
                raise ValueError(f"unknown record {tok[0]!r}")
        except (ValueError, IndexError) as exc:
            raise DataError(f"{path}: line {lineno}: {exc}") from None

    def ints(key):
        v = cfg[key]
        return () if v == "-" else tuple(int(i) for i in v.split(","))

    try:
        config = ModelConfig(
            input_dim=int(cfg["input_dim"]), n_classes=int(cfg["n_classes"]),
            attribute_sizes=ints("attribute_sizes"), hidden=ints("hidden"),
            feature_dim=int(cfg["feature_dim"]), domain_hidden=int(cfg["domain_hidden"]),
            seed=int(cfg["seed"]),
        )
    except KeyError as exc:
        raise DataError(f"{path}: missing config key {exc}") from None
    return ModelParams(config, arrays)


def checkpoint_meta(path) -> dict[str, str]:
    """The free-form ``meta key value`` records of a checkpoint."""
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        tok = line.split(maxsplit=2)
        if len(tok) >= 2 and tok[0] == "meta":
            out[tok[1]] = tok[2] if len(tok) == 3 else ""
    return out
