"""Newton-step bias removal.

Three update rules share one engine. Each adds ``alpha * H^{-1} Delta_i`` to
the parameters for a list of gradient differences ``Delta_i``:

* top-K removal: ``Delta_k = grad L(z_k)`` for the K most harmful samples;
* counterfactual replacement: ``Delta_k = grad L(z_k) - grad L(z_bar_k)``;
* external pairs: ``Delta_i = grad L(c_i) - grad L(c_bar_i)``.

Gradients and the Hessian are taken at the starting head and the Hessian is
factorized once, unless ``SolveConfig.recompute_each_step`` asks for a fresh
Hessian and fresh gradients after every step.
"""

from __future__ import annotations

import csv
import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize_scalar

from . import bias as bias_mod
from .dataset import CounterfactualSet, Dataset, Sample, as_dataset
from .exceptions import InputError
from .influence import rank
from .linalg import HessianOperator, SolveConfig
from .model import ModelHead, accuracy, hessian, per_sample_grads

logger = logging.getLogger(__name__)

STRATEGIES = ("topk-removal", "counterfactual-replacement", "external-pairs")


HESSIAN_SCOPES = ("retained", "full")
STEP_RULES = ("auto", "1/n", "search")


@dataclass(frozen=True)
class UnlearnConfig:
    """Settings shared by the update rules.

    ``step_scale`` multiplies every Newton step. It is a non-negative number or
    one of

    * ``"1/n"``: ``1 / n`` with ``n`` the head's training size. With the
      mean-loss Hessian this is the classical Newton removal step, the one an
      actual removal of the sample would take to first order;
    * ``"search"``: the step along the summed Newton direction that minimizes
      the counterfactual bias of the pairs being unlearned (external pairs only);
    * ``"auto"``: ``"search"`` for external pairs, ``"1/n"`` otherwise.

    ``hessian_scope`` applies to the training-sample strategies: ``"retained"``
    evaluates the Hessian on the data left after the update (training set minus
    removed samples, plus twins for replacement), ``"full"`` uses the operator
    supplied by the caller.
    """

    strategy: str = "external-pairs"
    k: int = 200
    delta: float = 0.0
    step_scale: float | str = "auto"
    solve: SolveConfig = field(default_factory=SolveConfig)
    curve_stride: int | None = None  # None -> max(1, k // 50)
    hessian_scope: str = "retained"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise InputError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.k < 1:
            raise InputError("k must be at least 1")
        if isinstance(self.step_scale, str):
            if self.step_scale not in STEP_RULES:
                raise InputError(f"step_scale must be a number or one of {STEP_RULES}")
        elif not float(self.step_scale) >= 0:
            raise InputError("step_scale must be non-negative")
        if self.curve_stride is not None and self.curve_stride < 1:
            raise InputError("curve_stride must be positive")
        if self.hessian_scope not in HESSIAN_SCOPES:
            raise InputError(f"hessian_scope must be one of {HESSIAN_SCOPES}")

    def step_rule(self, external: bool) -> float | str:
        if self.step_scale == "auto":
            return "search" if external else "1/n"
        return self.step_scale


def search_step(head: ModelHead, direction, dex: CounterfactualSet) -> float:
    """Step length ``a >= 0`` minimizing the bias of ``dex`` at ``theta + a * direction``.

    Scans a half-octave grid around ``1 / n`` (including zero), then refines
    the best bracket with a bounded scalar search.
    """
    direction = np.asarray(direction, dtype=float)
    ref = bias_mod.reference_classes(head, dex)

    def value(a):
        return bias_mod.cf_bias_dataset(head.with_theta(head.theta + a * direction), dex,
                                        ref_classes=ref).value

    grid = np.concatenate([[0.0], 2.0 ** np.arange(-6.0, 20.5, 0.5) / head.n])
    vals = np.array([value(a) for a in grid])
    j = int(np.argmin(vals))
    if j == 0:
        return 0.0
    lo, hi = grid[j - 1], grid[min(j + 1, len(grid) - 1)]
    res = minimize_scalar(value, bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-4 * grid[j]})
    return float(res.x) if res.fun < vals[j] else float(grid[j])


@dataclass
class Evaluator:
    """Held-out material used to score heads along an unlearning run."""

    audit: CounterfactualSet | None = None
    test: Dataset | None = None
    delta: float = 0.0

    def bias(self, head):
        if self.audit is None:
            return None
        return bias_mod.cf_bias_dataset(head, self.audit, self.delta)

    def accuracy(self, head):
        return None if self.test is None else accuracy(head, self.test)


@dataclass
class UnlearnOutcome:
    strategy: str
    head_before: ModelHead
    head_after: ModelHead
    bias_before: bias_mod.BiasReport | None
    bias_after: bias_mod.BiasReport | None
    accuracy_before: float | None
    accuracy_after: float | None
    per_step_curve: list = field(default_factory=list)
    samples_used: int = 0
    seconds: float = 0.0
    notes: dict = field(default_factory=dict)

    @property
    def update(self) -> np.ndarray:
        return self.head_after.theta - self.head_before.theta

    def summary(self) -> dict:
        def val(r):
            return None if r is None else float(r.value)

        return {
            "strategy": self.strategy,
            "samples_used": int(self.samples_used),
            "accuracy_before": self.accuracy_before,
            "accuracy_after": self.accuracy_after,
            "bias_before": val(self.bias_before),
            "bias_after": val(self.bias_after),
            "verdict_before": None if self.bias_before is None else bool(self.bias_before.verdict),
            "verdict_after": None if self.bias_after is None else bool(self.bias_after.verdict),
            "seconds": float(self.seconds),
            "notes": self.notes,
        }

    def write_report(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), sort_keys=True, indent=1) + "\n")

    def write_curve(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["pairs_used", "bias", "accuracy"])
            for used, b, acc in self.per_step_curve:
                w.writerow([used, "" if b is None else repr(float(b)), "" if acc is None else repr(float(acc))])


def _stride(config, m):
    return config.curve_stride or max(1, m // 50)


def _record(evaluator, head, used):
    b = evaluator.bias(head)
    return (used, None if b is None else b.value, evaluator.accuracy(head))


def _resolve_step(head, op, steps, config, strategy, dex):
    rule = config.step_rule(strategy == "external-pairs")
    if rule == "1/n":
        return 1.0 / head.n
    if rule == "search":
        if dex is None:
            raise InputError("step_scale='search' needs counterfactual pairs to measure")
        if op is None:
            raise InputError("step_scale='search' needs a Hessian operator")
        return search_step(head, np.sum(steps, axis=0), dex) if len(steps) else 0.0
    return float(rule)


def _apply(head, op, deltas, config, evaluator, strategy, delta_fn=None, hessian_data=None,
           hessian_weight=None, notes=None, dex=None):
    """Add ``alpha * H^{-1} Delta_i`` for every row of ``deltas``."""
    start = time.perf_counter()
    evaluator = evaluator or Evaluator()
    m = len(deltas)
    stride = _stride(config, m)
    notes = dict(notes or {})
    theta0 = head.theta
    steps = None
    if op is not None and m and (not config.solve.recompute_each_step
                                 or config.step_rule(strategy == "external-pairs") == "search"):
        steps = op.solve(deltas, config.solve)
    elif op is None and m and not config.solve.recompute_each_step:
        raise InputError("a Hessian operator is required")
    alpha = _resolve_step(head, op, steps if steps is not None else np.zeros((0, head.n_params)),
                          config, strategy, dex)
    notes["step_scale"] = alpha
    curve = [_record(evaluator, head, 0)]
    if config.solve.recompute_each_step:
        if delta_fn is None or hessian_data is None:
            raise InputError("recompute_each_step needs the training data for fresh Hessians")
        notes["recompute_each_step"] = True
        theta = theta0.copy()
        for i in range(m):
            cur = head.with_theta(theta)
            op_i = hessian(cur, hessian_data, _mode(config.solve), sample_weight=hessian_weight)
            theta = theta + alpha * op_i.solve(delta_fn(cur, i), config.solve)
            if (i + 1) % stride == 0 or i + 1 == m:
                curve.append(_record(evaluator, head.with_theta(theta), i + 1))
        after = head.with_theta(theta)
    else:
        for used in range(stride, m + 1, stride):
            partial = head.with_theta(theta0 + alpha * np.sum(steps[:used], axis=0))
            curve.append(_record(evaluator, partial, used))
        after = head.with_theta(theta0 + alpha * np.sum(steps, axis=0)) if m else head
        if m and m % stride:
            curve.append(_record(evaluator, after, m))
    return UnlearnOutcome(
        strategy,
        head,
        after,
        evaluator.bias(head),
        evaluator.bias(after),
        evaluator.accuracy(head),
        evaluator.accuracy(after),
        curve,
        m,
        time.perf_counter() - start,
        notes,
    )


def _mode(solve: SolveConfig):
    return "dense-factorized" if solve.method == "direct" else "matrix-free"


def _harmful_indices(scores, k):
    n_scores = len(list(scores))
    harmful, _ = rank(scores, min(k, n_scores))
    return np.array([s.sample_index for s in harmful], dtype=np.int64)


def unlearn_topk(head, op, train, scores, config: UnlearnConfig, evaluator=None):
    """Remove the top-K harmful training samples with one Newton step each."""
    train = as_dataset(train)
    scores = list(scores)
    covered = {s.sample_index for s in scores}
    if covered != set(range(len(train))):
        raise InputError("scores must cover every training sample exactly")
    if config.k > len(train):
        raise InputError(f"k={config.k} exceeds the training set size {len(train)}")
    idx = _harmful_indices(scores, config.k)
    if len(idx) == 0:
        warnings.warn("no harmful samples to unlearn; head left unchanged", stacklevel=2)
        logger.warning("no harmful samples to unlearn")
    chosen = train.subset(idx)
    deltas = per_sample_grads(head, chosen) if len(idx) else np.zeros((0, head.n_params))
    weight = None
    if config.hessian_scope == "retained":
        weight = np.ones(len(train))
        weight[idx] = 0.0
        if not config.solve.recompute_each_step and len(idx):
            op = hessian(head, train, _mode(config.solve), sample_weight=weight)
    return _apply(
        head, op, deltas, config, evaluator, "topk-removal",
        delta_fn=lambda h, i: per_sample_grads(h, chosen.subset([i]))[0],
        hessian_data=train, hessian_weight=weight,
        notes={"removed_indices": idx.tolist(), "hessian_scope": config.hessian_scope},
    )


def _twins_for(train, idx, pair_lookup):
    missing = []
    twins = []
    for k in idx:
        if isinstance(pair_lookup, Dataset):
            twin = pair_lookup[int(k)] if k < len(pair_lookup) else None
        elif callable(pair_lookup):
            twin = pair_lookup(int(k))
        else:
            twin = pair_lookup.get(int(k))
        if twin is None:
            missing.append(int(k))
        else:
            twins.append(twin)
    if missing:
        raise InputError(f"no bias-conflicting twin for training indices {missing}")
    return twins


def _check_twin(train, k, twin: Sample):
    orig = train[int(k)]
    keep = np.ones(train.n_features, dtype=bool)
    keep[list(train.attribute_columns)] = False
    if (
        twin.label != orig.label
        or twin.attribute == orig.attribute
        or np.asarray(twin.features).shape != orig.features.shape
        or not np.array_equal(np.asarray(twin.features)[keep], orig.features[keep])
    ):
        return False
    return True


def unlearn_replace(head, op, train, scores, pair_lookup, config: UnlearnConfig, evaluator=None):
    """Unlearn the top-K harmful samples while learning their bias-conflicting twins.

    ``pair_lookup`` maps a training index to its twin: a :class:`Dataset`
    row-aligned with ``train``, a mapping, or a callable.
    """
    train = as_dataset(train)
    scores = list(scores)
    if config.k > len(train):
        raise InputError(f"k={config.k} exceeds the training set size {len(train)}")
    idx = _harmful_indices(scores, config.k)
    twins = _twins_for(train, idx, pair_lookup)
    bad = [int(k) for k, t in zip(idx, twins) if not _check_twin(train, k, t)]
    if bad:
        raise InputError(f"twins of training indices {bad} are not valid counterfactuals")
    if len(idx) == 0:
        warnings.warn("no harmful samples to unlearn; head left unchanged", stacklevel=2)
        deltas = np.zeros((0, head.n_params))
        twin_set = None
    else:
        twin_set = train.subset(idx).replace(
            X=np.stack([np.asarray(t.features, dtype=float) for t in twins]),
            attributes=np.array([t.attribute for t in twins]),
            aligned=None,
        )
        orig = train.subset(idx)
        deltas = per_sample_grads(head, orig) - per_sample_grads(head, twin_set)
    hessian_data, weight = train, None
    if config.hessian_scope == "retained" and twin_set is not None:
        # training set with the replaced rows swapped for their twins
        hessian_data = train.replace(
            X=np.concatenate([train.X, twin_set.X]),
            attributes=np.concatenate([train.attributes, twin_set.attributes]),
            labels=np.concatenate([train.labels, twin_set.labels]),
            aligned=None,
        )
        weight = np.ones(len(hessian_data))
        weight[idx] = 0.0
        if not config.solve.recompute_each_step:
            op = hessian(head, hessian_data, _mode(config.solve), sample_weight=weight)
    return _apply(
        head, op, deltas, config, evaluator, "counterfactual-replacement",
        delta_fn=lambda h, i: (per_sample_grads(h, train.subset([idx[i]]))[0]
                               - per_sample_grads(h, twin_set.subset([i]))[0]),
        hessian_data=hessian_data, hessian_weight=weight,
        notes={"replaced_indices": idx.tolist(), "hessian_scope": config.hessian_scope,
               "twin_attributes": [int(t.attribute) for t in twins]},
    )


def _pair_deltas(head, dex: CounterfactualSet):
    return per_sample_grads(head, dex.factual) - per_sample_grads(head, dex.counterfactual)


def unlearn_external(head, op, dex: CounterfactualSet, config: UnlearnConfig, evaluator=None, train=None):
    """Newton updates from the first ``min(k, len(dex))`` external counterfactual pairs.

    When ``evaluator`` is omitted the bias is measured on ``dex`` itself.
    ``train`` is only needed with ``recompute_each_step``.
    """
    used = dex.head(config.k)
    evaluator = evaluator or Evaluator(audit=dex, delta=config.delta)
    deltas = _pair_deltas(head, used)
    return _apply(
        head, op, deltas, config, evaluator, "external-pairs",
        delta_fn=lambda h, i: _pair_deltas(h, used.take([i]))[0],
        hessian_data=train, notes={"pairs": len(used)}, dex=used,
    )


def run_fmd(head, dex: CounterfactualSet, delta: float, config: UnlearnConfig,
            op: HessianOperator | None = None, train=None, evaluator=None):
    """Identify bias on ``dex`` and, if it exceeds ``delta``, unlearn it pair by pair.

    Parameters move by ``alpha * H^{-1} Delta_i`` for each pair in turn, with
    ``Delta_i`` and ``H`` taken at the input head.
    """
    start = time.perf_counter()
    evaluator = evaluator or Evaluator(audit=dex, delta=delta)
    report = bias_mod.identify(head, dex, delta)
    if not report.verdict:
        acc = evaluator.accuracy(head)
        b = evaluator.bias(head)
        return UnlearnOutcome("external-pairs", head, head, b, b, acc, acc,
                              [_record(evaluator, head, 0)], 0,
                              time.perf_counter() - start, {"gate": "unbiased", "identified": report.value})
    if op is None:
        if train is None:
            raise InputError("run_fmd needs a Hessian operator or the training data")
        op = hessian(head, train, _mode(config.solve))
    if config.solve.recompute_each_step:
        out = unlearn_external(head, op, dex, config, evaluator, train)
        out.notes.update({"gate": "biased", "identified": report.value})
        return out
    used = dex.head(config.k)
    deltas = _pair_deltas(head, used)
    stride = _stride(config, len(used))
    steps = op.solve(deltas, config.solve)
    alpha = _resolve_step(head, op, steps, config, "external-pairs", used)
    theta = head.theta.copy()
    curve = [_record(evaluator, head, 0)]
    for i, step in enumerate(steps):
        theta = theta + alpha * step
        if (i + 1) % stride == 0 or i + 1 == len(steps):
            curve.append(_record(evaluator, head.with_theta(theta), i + 1))
    after = head.with_theta(theta)
    return UnlearnOutcome(
        "external-pairs", head, after, evaluator.bias(head), evaluator.bias(after),
        evaluator.accuracy(head), evaluator.accuracy(after), curve, len(used),
        time.perf_counter() - start,
        {"gate": "biased", "identified": report.value, "step_scale": alpha},
    )
