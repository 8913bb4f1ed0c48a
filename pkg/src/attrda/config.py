"""``key = value`` configuration files with section headers.

Sections: ``[generator]``, ``[model]``, ``[train]``, ``[weights]`` and, for
experiment specs, ``[experiment]`` plus optional ``[mode NAME]`` sections
overriding ``[train]`` keys for one mode.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import GeneratorConfig, imbalanced_counts
from .errors import ConfigError, SchemaError
from .losses import LossWeights
from .model import ModelConfig
from .schema import AttributeSchema, car_schema, factorial_schema, load_schema
from .train import MODES, SETTINGS, TrainConfig


def read_config(path) -> configparser.ConfigParser:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def parse_config(text: str, source: str = "<config>") -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        cp.read_string(text, source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cp


# -- value parsing -----------------------------------------------------------

def _int(v: str, key: str) -> int:
    try:
        return int(v)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {v!r}") from None


def _float(v: str, key: str) -> float:
    try:
        return float(v)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {v!r}") from None


def _bool(v: str, key: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {v!r}")


def _list(v: str) -> list[str]:
    return [t.strip() for t in v.split(",") if t.strip()]


def _ints(v: str, key: str) -> tuple[int, ...]:
    return tuple(_int(t, key) for t in _list(v))


def _floats(v: str, key: str) -> float | tuple[float, ...]:
    vals = [_float(t, key) for t in _list(v)]
    if not vals:
        raise ConfigError(f"{key}: empty value")
    return vals[0] if len(vals) == 1 else tuple(vals)


def _section(cp: configparser.ConfigParser, name: str, allowed) -> dict[str, str]:
    if not cp.has_section(name):
        return {}
    items = dict(cp.items(name))
    unknown = sorted(set(items) - set(allowed))
    if unknown:
        raise ConfigError(f"[{name}]: unknown key {unknown[0]!r}")
    return items


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render(sections: dict[str, dict]) -> str:
    """Fully resolved configuration back in file syntax."""
    out = []
    for name, items in sections.items():
        out.append(f"[{name}]")
        out += [f"{k} = {_fmt(v)}" for k, v in items.items()]
        out.append("")
    return "\n".join(out)


# -- generator ---------------------------------------------------------------

Counts = int | tuple[int, ...] | tuple[str, int, int]

_GEN_FLOATS = ("anchor_scale", "prototype_noise", "within_noise", "shift_scale", "bias_scale", "target_noise")
_GEN_KEYS = ("schema", "schema_file", "attributes", "classes", "dims", "seed", "source_counts", "target_counts",
             "test_source_counts", "test_target_counts", *_GEN_FLOATS)


def _counts(v: str, key: str) -> Counts:
    """``20``, ``3..12`` (uniform per class, seed dependent) or an explicit list."""
    if ".." in v:
        lo, hi = v.split("..", 1)
        return ("range", _int(lo.strip(), key), _int(hi.strip(), key))
    vals = _ints(v, key)
    return vals[0] if len(vals) == 1 else vals


def _counts_text(c: Counts) -> str:
    if isinstance(c, tuple) and c and c[0] == "range":
        return f"{c[1]}..{c[2]}"
    return _fmt(c)


# the default synthetic config: 48 classes, imbalanced source labels
DEFAULT_ATTRIBUTES = "make:4, body:4, trim:3"


@dataclass
class GeneratorSpec:
    """Generator settings; per-seed count ranges resolve in :meth:`config`."""

    schema: AttributeSchema
    schema_source: str = "attributes = " + DEFAULT_ATTRIBUTES
    dims: int = 64
    anchor_scale: float = 1.0
    prototype_noise: float = 0.5
    within_noise: float = 0.5
    shift_scale: float = 1.0
    bias_scale: float = 0.5
    target_noise: float = 1.0
    source_counts: Counts = ("range", 3, 12)
    target_counts: Counts = 20
    test_source_counts: Counts = 60
    test_target_counts: Counts = 60
    seed: int = 0

    def _resolve(self, c: Counts, seed: int, stream: str):
        if isinstance(c, tuple) and c and c[0] == "range":
            return imbalanced_counts(self.schema.n_classes, c[1], c[2], seed, stream)
        return c

    def config(self, seed: int | None = None, split: str = "train") -> GeneratorConfig:
        seed = self.seed if seed is None else seed
        src, tgt = ((self.source_counts, self.target_counts) if split == "train"
                    else (self.test_source_counts, self.test_target_counts))
        kw = {name: getattr(self, name) for name in _GEN_FLOATS}
        return GeneratorConfig(self.schema, dims=self.dims, seed=seed,
                               source_counts=self._resolve(src, seed, f"{split}-source-counts"),
                               target_counts=self._resolve(tgt, seed, f"{split}-target-counts"), **kw)

    def section(self) -> dict:
        key, _, val = self.schema_source.partition(" = ")
        out = {key: val, "dims": self.dims, "seed": self.seed}
        out.update({name: getattr(self, name) for name in _GEN_FLOATS})
        for name in ("source_counts", "target_counts", "test_source_counts", "test_target_counts"):
            out[name] = _counts_text(getattr(self, name))
        return out


def _schema_from(items: dict[str, str], base: Path) -> tuple[AttributeSchema, str]:
    given = [k for k in ("schema", "schema_file", "attributes") if k in items]
    if len(given) > 1:
        raise ConfigError(f"[generator]: give only one of {', '.join(given)}")
    if "schema_file" in items:
        path = Path(items["schema_file"])
        path = path if path.is_absolute() else base / path
        if not path.is_file():
            raise ConfigError(f"schema file not found: {path}")
        return load_schema(path), f"schema_file = {items['schema_file']}"
    if items.get("schema", "").strip() == "car":
        return car_schema(), "schema = car"
    if "schema" in items:
        raise ConfigError(f"[generator] schema: unknown built-in schema {items['schema']!r}")
    text = items.get("attributes", DEFAULT_ATTRIBUTES)
    sizes = {}
    for tok in _list(text):
        name, _, n = tok.partition(":")
        if not name.strip() or not n:
            raise ConfigError(f"[generator] attributes: expected name:size, got {tok!r}")
        sizes[name.strip()] = _int(n.strip(), "attributes")
    n_classes = _int(items["classes"], "classes") if "classes" in items else None
    try:
        schema = factorial_schema(sizes, n_classes)
    except SchemaError as exc:
        raise SchemaError(f"[generator] attributes: {exc}") from None
    src = f"attributes = {text}" + (f"\nclasses = {n_classes}" if n_classes else "")
    return schema, src


def generator_spec(cp: configparser.ConfigParser, base=".") -> GeneratorSpec:
    items = _section(cp, "generator", _GEN_KEYS)
    schema, src = _schema_from(items, Path(base))
    kw = {name: _float(items[name], name) for name in _GEN_FLOATS if name in items}
    for name in ("dims", "seed"):
        if name in items:
            kw[name] = _int(items[name], name)
    for name in ("source_counts", "target_counts", "test_source_counts", "test_target_counts"):
        if name in items:
            kw[name] = _counts(items[name], name)
    spec = GeneratorSpec(schema, src, **kw)
    spec.config()  # validate eagerly
    spec.config(split="test")
    return spec


# -- model / train / weights -------------------------------------------------

_MODEL_KEYS = ("hidden", "feature_dim", "domain_hidden")
_TRAIN_KEYS = ("learning_rate", "momentum", "batch_size", "steps", "mode", "setting", "seed",
               "refresh_epochs", "checkpoint_every", "log_wall_time")
_WEIGHT_KEYS = tuple(f.name for f in fields(LossWeights))


def model_options(cp: configparser.ConfigParser) -> dict:
    items = _section(cp, "model", _MODEL_KEYS)
    out: dict = {"hidden": (64, 64), "feature_dim": 64, "domain_hidden": 64}
    if "hidden" in items:
        out["hidden"] = _ints(items["hidden"], "hidden") if items["hidden"].strip() not in ("", "-") else ()
    for name in ("feature_dim", "domain_hidden"):
        if name in items:
            out[name] = _int(items[name], name)
    return out


def model_config(options: dict, schema: AttributeSchema, input_dim: int, seed: int = 0) -> ModelConfig:
    return ModelConfig.for_schema(schema, input_dim, seed=seed, **options)


def loss_weights(cp: configparser.ConfigParser) -> LossWeights:
    items = _section(cp, "weights", _WEIGHT_KEYS)
    return LossWeights(**{k: (_float(v, k) if k == "temperature" else _floats(v, k)) for k, v in items.items()})


def _train_kwargs(items: dict[str, str]) -> dict:
    kw: dict = {}
    for k, v in items.items():
        if k in ("learning_rate", "momentum"):
            kw[k] = _float(v, k)
        elif k in ("batch_size", "steps", "seed", "refresh_epochs", "checkpoint_every"):
            kw[k] = _int(v, k)
        elif k == "log_wall_time":
            kw[k] = _bool(v, k)
        else:
            kw[k] = v.strip()
    return kw


def train_config(cp: configparser.ConfigParser, mode: str | None = None, seed: int | None = None) -> TrainConfig:
    kw = _train_kwargs(_section(cp, "train", _TRAIN_KEYS))
    if mode is not None:
        kw["mode"] = mode
    if seed is not None:
        kw["seed"] = seed
    return TrainConfig(weights=loss_weights(cp), **kw)


def weights_section(w: LossWeights) -> dict:
    return {f.name: getattr(w, f.name) for f in fields(LossWeights)}


def train_section(t: TrainConfig) -> dict:
    return {f.name: getattr(t, f.name) for f in fields(TrainConfig) if f.name != "weights"}


def model_section(options: dict) -> dict:
    return {"hidden": options["hidden"] or "-", "feature_dim": options["feature_dim"],
            "domain_hidden": options["domain_hidden"]}


# -- experiment spec ---------------------------------------------------------

_EXP_KEYS = ("setting", "modes", "seeds", "gain", "workers", "generator", "out")


@dataclass
class ExperimentSpec:
    generator: GeneratorSpec
    model: dict
    train: TrainConfig                      # base; mode and seed are set per cell
    modes: tuple[str, ...]
    seeds: tuple[int, ...]
    setting: str = "unsup"
    gain: tuple[str, str] | None = None     # (baseline mode, improved mode)
    mode_overrides: dict[str, dict] = field(default_factory=dict)
    workers: int = 1
    out: str | None = None

    def __post_init__(self):
        if not self.modes:
            raise ConfigError("experiment needs at least one mode")
        for m in self.modes:
            if m not in MODES:
                raise ConfigError(f"unknown mode {m!r}; choose from {', '.join(MODES)}")
        if len(set(self.modes)) != len(self.modes):
            raise ConfigError("experiment modes must be distinct")
        if not self.seeds:
            raise ConfigError("experiment needs at least one seed")
        if self.setting not in SETTINGS:
            raise ConfigError(f"unknown setting {self.setting!r}")
        if self.gain is not None and not set(self.gain) <= set(self.modes):
            raise ConfigError("gain modes must be among the experiment modes")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def train_for(self, mode: str, seed: int) -> TrainConfig:
        return replace(self.train, mode=mode, seed=seed, setting=self.setting, **self.mode_overrides.get(mode, {}))

    def render(self) -> str:
        exp = {"setting": self.setting, "modes": self.modes, "seeds": self.seeds, "workers": self.workers}
        if self.gain:
            exp["gain"] = self.gain
        sections = {"experiment": exp, "generator": self.generator.section(), "model": model_section(self.model),
                    "train": {k: v for k, v in train_section(self.train).items()
                              if k not in ("mode", "seed", "setting")},
                    "weights": weights_section(self.train.weights)}
        for m, kw in self.mode_overrides.items():
            sections[f"mode {m}"] = kw
        return render(sections)


def experiment_spec(cp: configparser.ConfigParser, base=".") -> ExperimentSpec:
    base = Path(base)
    items = _section(cp, "experiment", _EXP_KEYS)
    if "generator" in items:
        # generator settings may live in their own file
        path = Path(items["generator"])
        path = path if path.is_absolute() else base / path
        if cp.has_section("generator"):
            raise ConfigError("[experiment] generator: file given and [generator] section present")
        gcp = read_config(path)
        gen = generator_spec(gcp, path.parent)
    else:
        gen = generator_spec(cp, base)
    setting = items.get("setting", "unsup").strip()
    modes = tuple(_list(items.get("modes", ", ".join(MODES))))
    seeds = _ints(items.get("seeds", "0"), "seeds")
    gain = None
    if "gain" in items:
        g = _list(items["gain"])
        if len(g) != 2:
            raise ConfigError("[experiment] gain: expected 'baseline, improved'")
        gain = (g[0], g[1])
    overrides = {}
    for sec in cp.sections():
        if sec.startswith("mode "):
            m = sec[5:].strip()
            if m not in MODES:
                raise ConfigError(f"[{sec}]: unknown mode {m!r}")
            kw = _train_kwargs(_section(cp, sec, _TRAIN_KEYS))
            if {"mode", "seed", "setting"} & set(kw):
                raise ConfigError(f"[{sec}]: mode, seed and setting are fixed per experiment")
            overrides[m] = kw
        elif sec not in ("experiment", "generator", "model", "train", "weights"):
            raise ConfigError(f"unknown section [{sec}]")
    fixed = {"mode", "seed", "setting"} & set(_section(cp, "train", _TRAIN_KEYS))
    if fixed:
        raise ConfigError(f"[train] {sorted(fixed)[0]}: set per experiment, not in [train]")
    base_train = train_config(cp)
    spec = ExperimentSpec(gen, model_options(cp), base_train, modes, seeds, setting, gain, overrides,
                          _int(items.get("workers", "1"), "workers"), items.get("out"))
    for m in spec.modes:
        spec.train_for(m, spec.seeds[0])  # validate overrides
    return spec


def load_experiment(path) -> ExperimentSpec:
    path = Path(path)
    return experiment_spec(read_config(path), path.parent)

