"""Training objectives: multi-task softmax, attribute consistency, domain
confusion and class/attribute soft-label transfer.

Every loss takes tensors (usually on a tape) and returns a scalar tensor.
Rows without a label for a term are excluded from that term's mean; a term
with no contributing rows evaluates to a constant 0 and is reported as
skipped by :func:`total_objective`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import SOURCE, TARGET, Dataset
from .errors import BankError, ConfigError, ContractError
from .model import (ModelParams, forward_attribute_scores, forward_class_scores,
                    forward_domain_scores, forward_features)
from .schema import AttributeSchema

EPS = 1e-12
LN2 = float(np.log(2.0))


def _per_attr(value, n_attr: int, name: str) -> tuple[float, ...]:
    if np.isscalar(value):
        return (float(value),) * n_attr
    value = tuple(float(v) for v in value)
    if len(value) != n_attr:
        raise ConfigError(f"{name}: {len(value)} weights for {n_attr} attributes")
    return value


@dataclass
class LossWeights:
    """Objective weights. Attribute-indexed weights accept a scalar or one value per attribute."""

    class_softmax: float = 1.0
    attribute_softmax: float | tuple[float, ...] = 1.0
    consistency: float | tuple[float, ...] = 1.0
    confusion: float = 1.0
    class_soft: float = 1.0
    attribute_soft: float = 1.0
    temperature: float = 2.0

    def __post_init__(self):
        for name in ("class_softmax", "confusion", "class_soft", "attribute_soft"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be >= 0")
        for name in ("attribute_softmax", "consistency"):
            v = getattr(self, name)
            if min(np.atleast_1d(v)) < 0:
                raise ConfigError(f"loss weight {name} must be >= 0")
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0")

    def alpha(self, n_attr: int) -> tuple[float, ...]:
        return _per_attr(self.attribute_softmax, n_attr, "attribute_softmax")

    def beta(self, n_attr: int) -> tuple[float, ...]:
        return _per_attr(self.consistency, n_attr, "consistency")


# ---------------------------------------------------------------------------
# classification


def _log_probs(scores: Tensor, temperature: float = 1.0) -> Tensor:
    return ad.log(ad.clamp_min(ad.softmax(scores, temperature), EPS))


def softmax_loss(scores: Tensor, labels) -> Tensor:
    """Mean of ``-log softmax(scores)[label]`` over rows with ``label >= 0``."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (scores.shape[0],):
        raise ContractError(f"labels {labels.shape} do not match scores {scores.shape}")
    rows = np.flatnonzero(labels >= 0)
    if rows.size == 0:
        return ad.constant(0.0)
    if labels[rows].max() >= scores.shape[1]:
        raise ContractError(f"label outside [0, {scores.shape[1]})")
    picked = ad.gather(_log_probs(ad.take_rows(scores, rows)), labels[rows])
    return -ad.mean(picked)


def attribute_softmax_loss(scores: Tensor, labels, n: int | None = None) -> Tensor:
    return softmax_loss(scores, labels)


def class_softmax_loss(scores: Tensor, labels) -> Tensor:
    return softmax_loss(scores, labels)


def multitask_softmax(attribute_losses: Sequence, class_loss, alphas: Sequence[float], alpha_c: float):
    """``sum_n alpha_n * L_a_n + alpha_c * L_C``; works on floats or tensors."""
    if len(attribute_losses) != len(alphas):
        raise ContractError("one weight per attribute loss required")
    total = alpha_c * class_loss
    for a, loss in zip(alphas, attribute_losses):
        total = total + a * loss
    return total


# ---------------------------------------------------------------------------
# attribute consistency


def aggregate_class_scores(f, schema: AttributeSchema, n: int) -> Tensor:
    """Per attribute category, the mean of the class scores of its member classes."""
    return ad.matmul(f, schema.averaging_matrix(n))


def symmetric_kl(p: Tensor, q: Tensor) -> Tensor:
    """Row-wise ``0.5 KL(p||q) + 0.5 KL(q||p)`` on probabilities clamped to ``[EPS, 1]``."""
    p = ad.clamp_min(p, EPS)
    q = ad.clamp_min(q, EPS)
    diff_log = ad.log(p) - ad.log(q)
    return ad.scale(ad.sum(p * diff_log - q * diff_log, axis=1), 0.5)


def consistency_loss(class_scores: Tensor, attribute_scores: Tensor, schema: AttributeSchema, n: int) -> Tensor:
    """Symmetric KL between the attribute head and the class head's aggregated view, batch mean.

    Class scores are averaged per category *before* the softmax.
    """
    a_k = schema.attributes[n].n_categories
    if attribute_scores.shape[1] != a_k or class_scores.shape[1] != schema.n_classes:
        raise ContractError("score widths do not match the schema")
    if class_scores.shape[0] == 0:
        return ad.constant(0.0)
    p_attr = ad.softmax(attribute_scores)
    p_hat = ad.softmax(aggregate_class_scores(class_scores, schema, n))
    return ad.mean(symmetric_kl(p_attr, p_hat))


def total_consistency(class_scores: Tensor, attribute_scores: Sequence[Tensor],
                      schema: AttributeSchema, betas: Sequence[float]) -> Tensor:
    total = ad.constant(0.0)
    for n, (s, b) in enumerate(zip(attribute_scores, betas)):
        if b:
            total = total + ad.scale(consistency_loss(class_scores, s, schema, n), b)
    return total


# ---------------------------------------------------------------------------
# domain confusion


def domain_classifier_loss(domain_scores: Tensor, domain_labels) -> Tensor:
    """Cross-entropy of the domain head against the true domains."""
    return softmax_loss(domain_scores, np.asarray(domain_labels, dtype=np.int64))


def confusion_loss(domain_scores: Tensor) -> Tensor:
    """Cross-entropy of the domain head's softmax against the uniform distribution."""
    return -ad.mean(ad.scale(ad.sum(_log_probs(domain_scores), axis=1), 0.5))


@dataclass
class ConfusionTerms:
    classifier: Tensor
    confusion: Tensor
    single_domain: bool


def domain_confusion_loss(p: dict[str, Tensor], features: Tensor, domain_labels) -> ConfusionTerms:
    """Domain classifier and confusion losses with their stop-gradients.

    The classifier term sees detached features, so it trains only the domain
    head; the confusion term sees a detached domain head, so it trains only
    the backbone.
    """
    domain_labels = np.asarray(domain_labels, dtype=np.int64)
    single = np.unique(domain_labels).size < 2
    cls = domain_classifier_loss(forward_domain_scores(p, ad.detach(features)), domain_labels)
    frozen = {k: (ad.detach(v) if k.startswith("dom.") else v) for k, v in p.items()}
    conf = confusion_loss(forward_domain_scores(frozen, features))
    return ConfusionTerms(cls, conf, single)


# Unsupervised adaptation losses: name -> fn(p, features, domain_labels) -> ConfusionTerms.
ADAPTATION_LOSSES: dict[str, Callable] = {"dc": domain_confusion_loss}


# ---------------------------------------------------------------------------
# soft labels


@dataclass
class SoftLabelBank:
    """Averaged temperature-softened source predictions.

    ``classes[c]`` is a distribution over K classes; ``attributes[n][k]`` a
    distribution over the categories of attribute n.
    """

    classes: np.ndarray
    attributes: list[np.ndarray]
    class_counts: np.ndarray
    attribute_counts: list[np.ndarray]
    temperature: float = 2.0

    def class_entry(self, c: int) -> np.ndarray:
        if not 0 <= c < len(self.classes):
            raise BankError(f"class {c} missing from soft-label bank")
        return self.classes[c]


def _softened(scores: np.ndarray, temperature: float) -> np.ndarray:
    return ad.softmax(ad.constant(scores), temperature).data


def _group_mean(probs: np.ndarray, groups: np.ndarray, n_groups: int, what: str):
    counts = np.bincount(groups, minlength=n_groups)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise BankError(f"{what} {empty[0]} has no source examples")
    sums = np.zeros((n_groups, probs.shape[1]))
    for g in range(n_groups):  # sequential per group keeps summation order fixed
        sums[g] = probs[groups == g].sum(axis=0)
    return sums / counts[:, None], counts


def build_soft_labels(source: Dataset, params: ModelParams, schema: AttributeSchema,
                      temperature: float) -> SoftLabelBank:
    """Per class / attribute category mean of softened head outputs over labeled source examples."""
    if not temperature > 0:
        raise ConfigError("temperature must be > 0")
    rows = np.flatnonzero((source.domain == SOURCE) & (source.labels >= 0))
    x = source.features[rows]
    labels = source.labels[rows]
    p = params.bind(None)
    f = forward_features(p, ad.constant(x))
    cls_probs = _softened(forward_class_scores(p, f).data, temperature)
    classes, class_counts = _group_mean(cls_probs, labels, schema.n_classes, "class")
    attrs, attr_counts = [], []
    for n, a in enumerate(schema.attributes):
        probs = _softened(forward_attribute_scores(p, f, n).data, temperature)
        cats = source.attr_labels[rows, n]
        m, c = _group_mean(probs, cats, a.n_categories, f"attribute {a.name!r} category")
        attrs.append(m)
        attr_counts.append(c)
    return SoftLabelBank(classes, attrs, class_counts, attr_counts, temperature)


def soft_label_loss(scores: Tensor, labels, bank_entries: np.ndarray, temperature: float) -> Tensor:
    """Mean over rows with ``label >= 0`` of ``H(bank[label], softmax(scores / T))``."""
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.flatnonzero(labels >= 0)
    if rows.size == 0:
        return ad.constant(0.0)
    bank_entries = np.asarray(bank_entries)
    if labels[rows].max() >= len(bank_entries):
        raise BankError(f"label {labels[rows].max()} missing from soft-label bank")
    targets = bank_entries[labels[rows]]
    logp = _log_probs(ad.take_rows(scores, rows), temperature)
    return -ad.mean(ad.sum(logp * targets, axis=1))


# ---------------------------------------------------------------------------
# full objective


@dataclass
class Batch:
    features: np.ndarray
    domain: np.ndarray
    labels: np.ndarray         # -1 where the label is hidden
    attr_labels: np.ndarray    # -1 where hidden
    index: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.features)


@dataclass
class LossReport:
    terms: dict[str, float | list[float] | None] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)
    single_domain: bool = False

    def record(self) -> dict:
        return dict(self.terms)


def _val(t: Tensor) -> float:
    return float(t.data)


def total_objective(p: dict[str, Tensor], batch: Batch, schema: AttributeSchema, weights: LossWeights,
                    bank: SoftLabelBank | None = None, setting: str = "unsup",
                    adaptation: str = "dc") -> tuple[Tensor, LossReport]:
    """Weighted sum of all enabled terms plus a per-term report.

    Softmax terms use every row with a visible label, consistency and
    confusion use every row, soft-label terms use labeled target rows only.
    Terms whose weight is zero are not evaluated and report ``None``.
    """
    if setting not in ("unsup", "semisup", "full"):
        raise ConfigError(f"unknown setting {setting!r}")
    n_attr = schema.n_attributes
    alphas, betas = weights.alpha(n_attr), weights.beta(n_attr)
    w_csoft = weights.class_soft if setting != "unsup" else 0.0
    w_asoft = weights.attribute_soft if setting != "unsup" else 0.0
    if (w_csoft or w_asoft) and bank is None:
        raise ContractError("semi-supervised soft-label terms need a soft-label bank")

    rep = LossReport()
    t = rep.terms
    total = ad.constant(0.0)

    def add(name, value, w):
        nonlocal total
        if value.node is None and not value.data.any():
            rep.skipped.append(name)
        total = total + ad.scale(value, w)
        return _val(value)

    f = forward_features(p, batch.features)
    need_cls = weights.class_softmax or any(betas) or w_csoft
    cls_scores = forward_class_scores(p, f) if need_cls else None
    need_att = [bool(alphas[n] or betas[n] or w_asoft) for n in range(n_attr)]
    att_scores = [forward_attribute_scores(p, f, n) if need_att[n] else None for n in range(n_attr)]

    t["L_C"] = add("L_C", class_softmax_loss(cls_scores, batch.labels), weights.class_softmax) \
        if weights.class_softmax else None
    t["L_a"] = [
        add(f"L_a[{n}]", attribute_softmax_loss(att_scores[n], batch.attr_labels[:, n], n), alphas[n])
        if alphas[n] else None for n in range(n_attr)]
    t["L_con"] = [
        add(f"L_con[{n}]", consistency_loss(cls_scores, att_scores[n], schema, n), betas[n])
        if betas[n] else None for n in range(n_attr)]

    if weights.confusion:
        terms = ADAPTATION_LOSSES[adaptation](p, f, batch.domain)
        t["L_conf_cls"] = add("L_conf_cls", terms.classifier, weights.confusion)
        t["L_conf_confusion"] = add("L_conf_confusion", terms.confusion, weights.confusion)
        rep.single_domain = terms.single_domain
    else:
        t["L_conf_cls"] = t["L_conf_confusion"] = None

    tgt = batch.domain == TARGET
    if w_csoft:
        lab = np.where(tgt, batch.labels, -1)
        t["L_csoft"] = add("L_csoft", soft_label_loss(cls_scores, lab, bank.classes, weights.temperature), w_csoft)
    else:
        t["L_csoft"] = None
    if w_asoft:
        vals = []
        for n in range(n_attr):
            lab = np.where(tgt, batch.attr_labels[:, n], -1)
            vals.append(add(f"L_asoft[{n}]",
                            soft_label_loss(att_scores[n], lab, bank.attributes[n], weights.temperature),
                            w_asoft))
        t["L_asoft"] = vals
    else:
        t["L_asoft"] = [None] * n_attr
    t["total"] = _val(total)
    return total, rep
