"""Counterfactual and group bias functionals with exact parameter gradients.

All functionals work on soft class probabilities so they are differentiable in
the head parameters. The reference class of a counterfactual pair is the
positive class (index 1) for binary heads and the factual member's argmax
class for multiclass heads; it is computed once at the head under audit and
then held fixed, including while other code perturbs the parameters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dataset import CounterfactualPair, CounterfactualSet, Dataset, as_dataset
from .exceptions import InputError
from .model import ModelHead, predict_proba

METRICS = ("counterfactual", "demographic-parity", "equal-opportunity")


@dataclass
class BiasReport:
    metric: str
    value: float
    per_item: list = field(default_factory=list)
    threshold: float = 0.0
    verdict: bool = False

    def __post_init__(self):
        if self.metric not in METRICS:
            raise InputError(f"unknown bias metric {self.metric!r}")

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "value": float(self.value),
            "threshold": float(self.threshold),
            "verdict": "biased" if self.verdict else "unbiased",
            "per_item": [float(v) for v in self.per_item],
        }

    def to_text(self) -> str:
        """Structured text record: ``key: value`` header then a per-item table."""
        lines = [
            f"metric: {self.metric}",
            f"value: {self.value!r}",
            f"threshold: {self.threshold!r}",
            f"verdict: {'biased' if self.verdict else 'unbiased'}",
            f"items: {len(self.per_item)}",
            "",
            "index,contribution",
        ]
        lines += [f"{i},{float(v)!r}" for i, v in enumerate(self.per_item)]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


@dataclass(frozen=True)
class GroupSpec:
    attribute_value: int
    label_value: int | None = None

    def members(self, data: Dataset) -> np.ndarray:
        mask = data.attributes == self.attribute_value
        if self.label_value is not None:
            mask &= data.labels == self.label_value
        return np.flatnonzero(mask)


# -- helpers -------------------------------------------------------------------


def _as_set(dex) -> CounterfactualSet:
    if isinstance(dex, CounterfactualSet):
        return dex
    if isinstance(dex, CounterfactualPair):
        return CounterfactualSet.from_pairs([dex])
    return CounterfactualSet.from_pairs(dex)


def reference_classes(head: ModelHead, dex: CounterfactualSet) -> np.ndarray:
    dex = _as_set(dex)
    if head.n_classes == 2:
        return np.ones(len(dex), dtype=np.int64)
    return np.argmax(predict_proba(head, dex.factual), axis=1)


def positive_class(head: ModelHead, positive: int | None) -> int:
    if positive is None:
        if head.n_classes != 2:
            raise InputError("multiclass group metrics need an explicit positive class")
        return 1
    if not 0 <= positive < head.n_classes:
        raise InputError(f"positive class {positive} out of range")
    return int(positive)


def _class_prob_grads(head: ModelHead, data, classes) -> tuple[np.ndarray, np.ndarray]:
    """Probabilities ``p_r`` and their flat parameter gradients, one row per sample."""
    Z = head.inputs(data)
    P = predict_proba(head, data)
    idx = np.arange(len(Z))
    pr = P[idx, classes]
    # d p_r / d z_c = p_r (1[c = r] - p_c)
    D = -pr[:, None] * P
    D[idx, classes] += pr
    G = (D[:, :, None] * Z[:, None, :]).reshape(len(Z), -1)
    return pr, G


def _sign(x):
    # subgradient 0 at exact ties
    return np.sign(x)


# -- counterfactual bias --------------------------------------------------------------


def cf_bias_per_pair(head: ModelHead, dex, ref_classes=None) -> np.ndarray:
    dex = _as_set(dex)
    ref = reference_classes(head, dex) if ref_classes is None else np.asarray(ref_classes)
    idx = np.arange(len(dex))
    p_f = predict_proba(head, dex.factual)[idx, ref]
    p_c = predict_proba(head, dex.counterfactual)[idx, ref]
    return np.abs(p_f - p_c)


def cf_bias_sample(head: ModelHead, pair: CounterfactualPair, ref_class=None) -> float:
    """Absolute change of the reference-class probability across one pair."""
    ref = None if ref_class is None else [ref_class]
    return float(cf_bias_per_pair(head, CounterfactualSet.from_pairs(
        [pair],
        n_classes=head.n_classes,
        n_attribute_values=max(2, pair.factual.attribute + 1, pair.counterfactual.attribute + 1),
    ), ref)[0])


def cf_bias_dataset(head: ModelHead, dex, delta: float = 0.0, ref_classes=None) -> BiasReport:
    per = cf_bias_per_pair(head, dex, ref_classes)
    value = float(np.mean(per))
    return BiasReport("counterfactual", value, per.tolist(), float(delta), value > delta)


def grad_cf_bias(head: ModelHead, dex, literal: bool = False, ref_classes=None) -> np.ndarray:
    """Gradient of the mean counterfactual bias.

    Each pair contributes ``sign(p_ref(c) - p_ref(c_bar)) * (grad p_ref(c) -
    grad p_ref(c_bar))``. ``literal=True`` drops the sign and returns the
    plain mean of the gradient differences.
    """
    dex = _as_set(dex)
    ref = reference_classes(head, dex) if ref_classes is None else np.asarray(ref_classes)
    p_f, G_f = _class_prob_grads(head, dex.factual, ref)
    p_c, G_c = _class_prob_grads(head, dex.counterfactual, ref)
    s = np.ones(len(dex)) if literal else _sign(p_f - p_c)
    return (s[:, None] * (G_f - G_c)).mean(axis=0)


def identify(head: ModelHead, dex, delta: float = 0.0) -> BiasReport:
    """Measure counterfactual bias and flag the head as biased when it exceeds ``delta``."""
    return cf_bias_dataset(head, dex, delta)


# -- group metrics -------------------------------------------------------------------


def _group_terms(head, data, groups, positive, metric):
    data = as_dataset(data)
    g1, g0 = groups
    if metric == "equal-opportunity":
        pos = positive_class(head, positive)
        g1 = GroupSpec(g1.attribute_value, pos if g1.label_value is None else g1.label_value)
        g0 = GroupSpec(g0.attribute_value, pos if g0.label_value is None else g0.label_value)
    members = []
    for name, g in (("first", g1), ("second", g0)):
        idx = g.members(data)
        if len(idx) == 0:
            raise InputError(
                f"{name} group (attribute={g.attribute_value}, label={g.label_value}) is empty"
            )
        members.append(idx)
    return data, members


def _group_bias(head, data, groups, positive, delta, metric):
    data, (i1, i0) = _group_terms(head, data, groups, positive, metric)
    r = positive_class(head, positive)
    P = predict_proba(head, data)[:, r]
    m1, m0 = float(np.mean(P[i1])), float(np.mean(P[i0]))
    value = abs(m1 - m0)
    return BiasReport(metric, value, [m1, m0], float(delta), value > delta)


def _grad_group_bias(head, data, groups, positive, absolute, metric):
    data, (i1, i0) = _group_terms(head, data, groups, positive, metric)
    r = positive_class(head, positive)
    cls = np.full(len(data), r)
    p, G = _class_prob_grads(head, data, cls)
    diff = G[i1].mean(axis=0) - G[i0].mean(axis=0)
    if absolute:
        return _sign(p[i1].mean() - p[i0].mean()) * diff
    return diff


def dp_bias(head, data, groups, positive=None, delta: float = 0.0) -> BiasReport:
    """Gap in mean positive-class probability between two attribute groups.

    ``per_item`` holds the two group means.
    """
    return _group_bias(head, data, groups, positive, delta, "demographic-parity")


def grad_dp_bias(head, data, groups, positive=None, absolute=True) -> np.ndarray:
    """Gradient of :func:`dp_bias`; ``absolute=False`` differentiates the signed gap."""
    return _grad_group_bias(head, data, groups, positive, absolute, "demographic-parity")


def eo_bias(head, data, groups, positive=None, delta: float = 0.0) -> BiasReport:
    """Demographic-parity gap restricted to samples labeled with the positive class."""
    return _group_bias(head, data, groups, positive, delta, "equal-opportunity")


def grad_eo_bias(head, data, groups, positive=None, absolute=True) -> np.ndarray:
    return _grad_group_bias(head, data, groups, positive, absolute, "equal-opportunity")
