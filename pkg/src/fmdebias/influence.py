"""Influence of training samples on bias functionals.

A score is the derivative of a bias functional with respect to upweighting one
training sample, ``-grad B . H^{-1} . grad L(z_k)``. Positive scores mark
harmful samples: removing them lowers the bias. The inverse-Hessian solve is
done once for ``grad B`` and reused for every sample.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bias as bias_mod
from .exceptions import InputError
from .linalg import HessianOperator, SolveConfig
from .model import ModelHead, per_sample_grads

NEUTRAL_TOL = 1e-12


@dataclass(frozen=True)
class InfluenceScore:
    sample_index: int
    value: float

    @property
    def classification(self) -> str:
        if abs(self.value) <= NEUTRAL_TOL:
            return "neutral"
        return "harmful" if self.value > 0 else "helpful"


def solve_hinv(op: HessianOperator, v, config: SolveConfig | None = None) -> np.ndarray:
    return op.solve(v, config)


def influence_on_bias(op: HessianOperator, bias_grad, sample_grad, config=None, hinv_bias_grad=None) -> float:
    """``-bias_grad . H^{-1} . sample_grad``; pass ``hinv_bias_grad`` to reuse a solve."""
    bias_grad = np.asarray(bias_grad, dtype=float)
    sample_grad = np.asarray(sample_grad, dtype=float)
    if bias_grad.shape != (op.dim,) or sample_grad.shape != (op.dim,):
        raise InputError("gradient lengths must match the Hessian dimension")
    u = op.solve(bias_grad, config) if hinv_bias_grad is None else hinv_bias_grad
    return -float(u @ sample_grad)


def scores_from_bias_grad(head: ModelHead, op: HessianOperator, bias_grad, train, config=None):
    u = op.solve(np.asarray(bias_grad, dtype=float), config)
    # row-wise reduction: identical samples get bit-identical scores, which gemv does not promise
    values = -np.sum(per_sample_grads(head, train) * u, axis=1)
    return [InfluenceScore(k, float(v)) for k, v in enumerate(values)]


def influence_cf(head, op, dex, train, config: SolveConfig | None = None, literal: bool = False):
    """Per-sample influence on the mean counterfactual bias of ``dex``."""
    g = bias_mod.grad_cf_bias(head, dex, literal=literal)
    return scores_from_bias_grad(head, op, g, train, config)


def influence_dp(head, op, dataset, groups, train, config=None, positive=None, absolute=True):
    g = bias_mod.grad_dp_bias(head, dataset, groups, positive, absolute=absolute)
    return scores_from_bias_grad(head, op, g, train, config)


def influence_eo(head, op, dataset, groups, train, config=None, positive=None, absolute=True):
    g = bias_mod.grad_eo_bias(head, dataset, groups, positive, absolute=absolute)
    return scores_from_bias_grad(head, op, g, train, config)


def rank(scores, k: int):
    """Top-``k`` harmful (largest positive first) and helpful (most negative first).

    Ties keep ascending sample index. Only strictly positive (negative) scores
    qualify as harmful (helpful), so either list may hold fewer than ``k``.
    """
    scores = list(scores)
    if k > len(scores):
        raise InputError(f"k={k} exceeds the number of scores ({len(scores)})")
    if k < 0:
        raise InputError("k must be non-negative")
    by_desc = sorted(scores, key=lambda s: (-s.value, s.sample_index))
    by_asc = sorted(scores, key=lambda s: (s.value, s.sample_index))
    harmful = [s for s in by_desc if s.value > 0][:k]
    helpful = [s for s in by_asc if s.value < 0][:k]
    return harmful, helpful


def write_scores(scores, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_index", "value", "classification"])
        for s in scores:
            w.writerow([s.sample_index, repr(float(s.value)), s.classification])


def read_scores(path):
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: no such score file")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or reader.fieldnames[:2] != ["sample_index", "value"]:
            raise InputError(f"{path}: expected columns sample_index,value")
        try:
            return [InfluenceScore(int(r["sample_index"]), float(r["value"])) for r in reader]
        except (TypeError, ValueError) as exc:
            raise InputError(f"{path}: malformed score row ({exc})") from None
