"""Brute-force ground truth: retraining under perturbed weights and finite differences.

Retraining keeps the row count ``n`` fixed and edits sample weights, so a
removal is a zero weight and an ``eps`` upweight is a weight of ``1 + n*eps``.
That is the objective whose derivative the influence scores approximate.
"""

from __future__ import annotations

import csv
import logging
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import as_dataset
from .exceptions import InputError, NumericalError
from .model import ModelHead, TrainConfig, train_head

logger = logging.getLogger(__name__)

FIXTURE_VERSION = 1
COLD_CHECK_RATE = 0.05


@dataclass(frozen=True)
class OracleRun:
    base_head: ModelHead
    perturbation: tuple  # ("remove-index", (i, ...)) | ("upweight", i, eps) | ("parameter-bump", j, h)
    result_head: ModelHead
    bias_delta: float | None = None


def _cold_check_due(key: bytes, rate: float) -> bool:
    # deterministic 1-in-(1/rate) choice keyed on the perturbation
    return rate > 0 and (zlib.crc32(key) % 10_000) < rate * 10_000


def _retrain(base: ModelHead, train, weights, config: TrainConfig, key: bytes, cold_check: float):
    kwargs = dict(l2=base.l2, feature_map=base.feature_map, sample_weight=weights,
                  n_classes=base.n_classes)
    warm = train_head(train, config, init=base, **kwargs)
    if not warm.converged:
        raise NumericalError(f"retraining did not reach grad_tol={config.grad_tol} "
                             f"(gradient norm {warm.grad_norm:.3e})")
    if _cold_check_due(key, cold_check):
        cold = train_head(train, config, **kwargs)
        gap = float(np.max(np.abs(cold.theta - warm.theta)))
        scale = max(1.0, float(np.max(np.abs(warm.theta))))
        if gap > 1e-6 * scale:
            raise NumericalError(f"warm and cold retraining disagree by {gap:.3e}")
        logger.debug("cold-start check passed (gap %.2e)", gap)
    return warm


def _check_base(base: ModelHead, train):
    if base.n != len(train):
        raise InputError(f"base head was trained on {base.n} rows, got {len(train)}")


def retrain_without(train, indices, config: TrainConfig | None = None, base: ModelHead | None = None,
                    l2: float | None = None, cold_check: float = COLD_CHECK_RATE) -> ModelHead:
    """Converged head of the training objective with ``indices`` given zero weight.

    ``base`` supplies the regularization, feature map and warm start; without
    it a head is first trained on the full data with ``l2``.
    """
    config = config or TrainConfig()
    train = as_dataset(train)
    idx = np.unique(np.asarray(indices, dtype=np.int64).reshape(-1))
    if len(idx) and (idx[0] < 0 or idx[-1] >= len(train)):
        raise InputError(f"indices out of range for {len(train)} samples")
    if base is None:
        base = train_head(train, config, l2=0.01 if l2 is None else l2)
    _check_base(base, train)
    w = np.ones(len(train))
    w[idx] = 0.0
    return _retrain(base, train, w, config, b"remove" + idx.tobytes(), cold_check)


def retrain_upweighted(train, index: int, eps: float, config: TrainConfig | None = None,
                       base: ModelHead | None = None, l2: float | None = None,
                       cold_check: float = COLD_CHECK_RATE) -> ModelHead:
    """Converged head of ``(1/n) sum_i L(z_i) + eps * L(z_index)``."""
    config = config or TrainConfig()
    train = as_dataset(train)
    if not abs(eps) < 1:
        raise InputError("eps must satisfy |eps| < 1")
    if not 0 <= index < len(train):
        raise InputError(f"index {index} out of range for {len(train)} samples")
    if base is None:
        base = train_head(train, config, l2=0.01 if l2 is None else l2)
    _check_base(base, train)
    w = np.ones(len(train))
    w[index] += len(train) * eps
    key = b"upweight" + np.array([index, eps]).tobytes()
    return _retrain(base, train, w, config, key, cold_check)


def loo_bias_deltas(base: ModelHead, train, bias_fn, indices=None, config: TrainConfig | None = None,
                    cold_check: float = COLD_CHECK_RATE) -> np.ndarray:
    """``bias_fn(retrained) - bias_fn(base)`` for each single removal."""
    train = as_dataset(train)
    indices = range(len(train)) if indices is None else indices
    b0 = bias_fn(base)
    return np.array([
        bias_fn(retrain_without(train, [k], config, base, cold_check=cold_check)) - b0
        for k in indices
    ])


def default_step(theta) -> np.ndarray:
    """Central-difference step ``cbrt(eps) * max(1, |theta_j|)``."""
    return np.cbrt(np.finfo(float).eps) * np.maximum(1.0, np.abs(np.asarray(theta, dtype=float)))


def finite_diff(value_fn, head_or_theta, h=None) -> np.ndarray:
    """Central-difference derivative of ``value_fn(theta)`` in every coordinate.

    ``value_fn`` may return a scalar or an array; row ``j`` of the result is the
    derivative with respect to ``theta[j]``. ``h`` is a scalar or per-coordinate
    step and defaults to :func:`default_step`.
    """
    theta = head_or_theta.theta if isinstance(head_or_theta, ModelHead) else head_or_theta
    theta = np.array(theta, dtype=float)
    steps = default_step(theta) if h is None else np.broadcast_to(np.asarray(h, dtype=float), theta.shape)
    if np.any(steps <= 0):
        raise InputError("finite-difference step must be positive")
    rows = []
    for j in range(len(theta)):
        tp, tm = theta.copy(), theta.copy()
        tp[j] += steps[j]
        tm[j] -= steps[j]
        fp = np.asarray(value_fn(tp), dtype=float)
        fm = np.asarray(value_fn(tm), dtype=float)
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise NumericalError(f"non-finite evaluation at coordinate {j}")
        rows.append((fp - fm) / (tp[j] - tm[j]))
    return np.array(rows)


# -- fixtures -------------------------------------------------------------------------------


def write_fixture(path, columns, rows, meta: dict | None = None) -> None:
    """Versioned CSV: ``# version=..`` and ``# key=value`` comment lines, then a header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(f"# fmdebias-fixture version={FIXTURE_VERSION}\n")
        for k, v in sorted((meta or {}).items()):
            fh.write(f"# {k}={v}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def read_fixture(path) -> tuple[dict, list[dict]]:
    """Return ``(meta, rows)``; a missing or outdated fixture is an error, never regenerated."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"fixture {path} is missing; regenerate it with the fixture minting script")
    meta = {}
    with path.open(newline="") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            text = line[1:].strip()
            if text.startswith("fmdebias-fixture"):
                meta["version"] = int(text.split("version=")[1])
            elif "=" in text:
                k, v = text.split("=", 1)
                meta[k.strip()] = v.strip()
        else:
            body.append(line)
    if meta.get("version") != FIXTURE_VERSION:
        raise InputError(f"fixture {path} has version {meta.get('version')}, expected {FIXTURE_VERSION}")
    return meta, list(csv.DictReader(body))
