"""Attribute schemas: how fine-grained classes group into attribute categories.

File format (UTF-8 text, ``#`` comments and blank lines ignored)::

    classes 6
    attribute make 2
    class 0 category 0
    class 1 category 0
    ...                     # exactly K class lines per attribute block
    attribute body 3
    class 0 category 2
    ...
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SchemaError


@dataclass(frozen=True)
class Attribute:
    name: str
    n_categories: int
    class_to_category: tuple[int, ...]

    def members(self, category: int) -> list[int]:
        return [c for c, k in enumerate(self.class_to_category) if k == category]


@dataclass(frozen=True)
class AttributeSchema:
    n_classes: int
    attributes: tuple[Attribute, ...]
    _avg: list = field(default_factory=list, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(self.attributes))
        self.validate()

    @classmethod
    def from_maps(cls, n_classes: int, maps: dict[str, list[int]],
                  n_categories: dict[str, int] | None = None) -> "AttributeSchema":
        """Build from ``{name: class->category list}``; category counts default to max+1."""
        attrs = []
        for name, m in maps.items():
            k = (n_categories or {}).get(name, max(m) + 1 if len(m) else 0)
            attrs.append(Attribute(name, int(k), tuple(int(v) for v in m)))
        return cls(n_classes, tuple(attrs))

    @property
    def n_attributes(self) -> int:
        return len(self.attributes)

    @property
    def names(self) -> list[str]:
        return [a.name for a in self.attributes]

    def attribute_labels(self, class_id: int) -> tuple[int, ...]:
        return tuple(a.class_to_category[class_id] for a in self.attributes)

    def averaging_matrix(self, n: int) -> np.ndarray:
        """K x a_K matrix M with ``(f @ M)[k]`` = mean of f over classes in category k."""
        if not self._avg:
            for a in self.attributes:
                m = np.zeros((self.n_classes, a.n_categories))
                m[np.arange(self.n_classes), list(a.class_to_category)] = 1.0
                m /= m.sum(axis=0, keepdims=True)
                m.setflags(write=False)
                self._avg.append(m)
        return self._avg[n]

    def validate(self) -> None:
        if self.n_classes < 2:
            raise SchemaError(f"need at least 2 classes, got {self.n_classes}")
        if not self.attributes:
            raise SchemaError("schema has no attributes")
        seen = set()
        for a in self.attributes:
            if a.name in seen:
                raise SchemaError(f"duplicate attribute name {a.name!r}")
            seen.add(a.name)
            if not 2 <= a.n_categories <= self.n_classes:
                raise SchemaError(
                    f"attribute {a.name!r}: category count {a.n_categories} outside [2, {self.n_classes}]")
            if len(a.class_to_category) != self.n_classes:
                raise SchemaError(
                    f"attribute {a.name!r}: maps {len(a.class_to_category)} classes, expected {self.n_classes}")
            for c, k in enumerate(a.class_to_category):
                if not 0 <= k < a.n_categories:
                    raise SchemaError(f"attribute {a.name!r}: class {c} has out-of-range category {k}")
            used = set(a.class_to_category)
            for k in range(a.n_categories):
                if k not in used:
                    raise SchemaError(f"attribute {a.name!r}: empty attribute category {k}")


def dumps_schema(schema: AttributeSchema) -> str:
    lines = [f"classes {schema.n_classes}"]
    for a in schema.attributes:
        lines.append(f"attribute {a.name} {a.n_categories}")
        lines.extend(f"class {c} category {k}" for c, k in enumerate(a.class_to_category))
    return "\n".join(lines) + "\n"


def save_schema(schema: AttributeSchema, path) -> None:
    Path(path).write_text(dumps_schema(schema), encoding="utf-8")


def _int(tok: str, lineno: int, what: str) -> int:
    try:
        return int(tok)
    except ValueError:
        raise SchemaError(f"line {lineno}: {what} {tok!r} is not an integer") from None


def loads_schema(text: str) -> AttributeSchema:
    n_classes = None
    blocks: list[tuple[str, int, dict[int, int], int]] = []  # name, a_K, map, header line
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if tok[0] == "classes" and len(tok) == 2:
            if n_classes is not None:
                raise SchemaError(f"line {lineno}: repeated 'classes' header")
            n_classes = _int(tok[1], lineno, "class count")
        elif n_classes is None:
            raise SchemaError(f"line {lineno}: expected 'classes <K>' header first")
        elif tok[0] == "attribute" and len(tok) == 3:
            blocks.append((tok[1], _int(tok[2], lineno, "category count"), {}, lineno))
        elif tok[0] == "class" and len(tok) == 4 and tok[2] == "category":
            if not blocks:
                raise SchemaError(f"line {lineno}: class line before any attribute block")
            name, a_k, mapping, _ = blocks[-1]
            c = _int(tok[1], lineno, "class id")
            k = _int(tok[3], lineno, "category id")
            if not 0 <= c < n_classes:
                raise SchemaError(f"line {lineno}: class id {c} out of range [0, {n_classes})")
            if not 0 <= k < a_k:
                raise SchemaError(f"line {lineno}: category id {k} out of range [0, {a_k}) for {name!r}")
            if c in mapping:
                raise SchemaError(f"line {lineno}: class {c} mapped twice in {name!r}")
            mapping[c] = k
        else:
            raise SchemaError(f"line {lineno}: malformed line {raw.strip()!r}")
    if n_classes is None:
        raise SchemaError("empty schema file")
    attrs = []
    for name, a_k, mapping, hdr in blocks:
        if not 2 <= a_k <= n_classes:
            raise SchemaError(f"line {hdr}: attribute {name!r} category count {a_k} outside [2, {n_classes}]")
        missing = [c for c in range(n_classes) if c not in mapping]
        if missing:
            raise SchemaError(f"line {hdr}: attribute {name!r} has no category for class {missing[0]}")
        empty = sorted(set(range(a_k)) - set(mapping.values()))
        if empty:
            raise SchemaError(f"line {hdr}: attribute {name!r} has empty attribute category {empty[0]}")
        attrs.append(Attribute(name, a_k, tuple(mapping[c] for c in range(n_classes))))
    try:
        return AttributeSchema(n_classes, tuple(attrs))
    except SchemaError as exc:
        raise SchemaError(f"line 1: {exc}") from None


def load_schema(path) -> AttributeSchema:
    if not Path(path).is_file():
        raise SchemaError(f"schema file not found: {path}")
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise SchemaError(f"{path}: not UTF-8 text ({exc})") from None
    return loads_schema(text)


def factorial_schema(sizes: dict[str, int], n_classes: int | None = None) -> AttributeSchema:
    """Schema whose classes enumerate combinations of attribute categories.

    The first attribute varies fastest. ``n_classes`` truncates the list of
    combinations; validation rejects a truncation that empties a category.
    """
    names = list(sizes)
    total = int(np.prod([sizes[n] for n in names]))
    k = total if n_classes is None else n_classes
    if k > total:
        raise SchemaError(f"{k} classes exceed the {total} attribute combinations")
    maps = {n: [] for n in names}
    for c in range(k):
        rem = c
        for n in names:
            maps[n].append(rem % sizes[n])
            rem //= sizes[n]
    return AttributeSchema.from_maps(k, maps, sizes)


def car_schema() -> AttributeSchema:
    """170 classes with make(17), model(89), body(10), shaped like the car benchmark.

    Models nest inside makes; every make, model and body type is used.
    """
    k, n_make, n_model, n_body = 170, 17, 89, 10
    model_of = [c % n_model for c in range(k)]
    make_of_model = [m % n_make for m in range(n_model)]
    make = [make_of_model[m] for m in model_of]
    body = [(c * 7) % n_body for c in range(k)]
    return AttributeSchema.from_maps(
        k, {"make": make, "model": model_of, "body": body},
        {"make": n_make, "model": n_model, "body": n_body},
    )
