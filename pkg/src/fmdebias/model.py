"""Convex softmax heads on top of a frozen feature map.

Parameters are stored as the augmented matrix ``[W | b]`` of shape
``(n_classes, feature_dim + 1)`` and flattened row-major, so the intercept of
class ``c`` sits at flat index ``c * (feature_dim + 1) + feature_dim``.
Binary problems use the same two-class parameterization.

The per-sample loss is cross-entropy plus that sample's share of the ridge
penalty, ``L(z, theta) = CE(z, theta) + lambda / (2 n) * ||W||^2``, so that the
mean per-sample loss over the ``n`` training rows is the training objective.
Intercepts are not penalized.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import log_softmax, softmax

from .dataset import Dataset, Sample, as_dataset
from .exceptions import InputError, TrainingDivergedError
from .linalg import HessianOperator, gauge_project

logger = logging.getLogger(__name__)

FEATURE_MODES = ("identity-with-attribute", "identity-without-attribute", "fixed-affine")
OPTIMIZERS = ("newton", "gradient-descent")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Deterministic, never-retrained map from raw records to head inputs."""

    mode: str = "identity-without-attribute"
    n_attribute_values: int = 0
    projection: np.ndarray | None = None
    offset: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in FEATURE_MODES:
            raise InputError(f"unknown feature map mode {self.mode!r}; expected one of {FEATURE_MODES}")
        if self.mode == "identity-with-attribute" and self.n_attribute_values < 2:
            raise InputError("identity-with-attribute needs n_attribute_values >= 2")
        if self.mode == "fixed-affine":
            if self.projection is None:
                raise InputError("fixed-affine feature map needs a projection matrix")
            proj = np.asarray(self.projection, dtype=float)
            off = np.zeros(proj.shape[0]) if self.offset is None else np.asarray(self.offset, dtype=float)
            if proj.ndim != 2 or off.shape != (proj.shape[0],):
                raise InputError("projection must be (out, in) and offset (out,)")
            object.__setattr__(self, "projection", proj)
            object.__setattr__(self, "offset", off)

    @classmethod
    def random_affine(cls, input_dim: int, output_dim: int, seed: int = 0) -> "FeatureMap":
        """Seeded random projection standing in for a frozen backbone."""
        rng = np.random.default_rng(seed)
        proj = rng.standard_normal((output_dim, input_dim)) / np.sqrt(input_dim)
        offset = 0.1 * rng.standard_normal(output_dim)
        return cls("fixed-affine", projection=proj, offset=offset)

    def output_dim(self, input_dim: int) -> int:
        if self.mode == "identity-with-attribute":
            return input_dim + self.n_attribute_values
        if self.mode == "fixed-affine":
            return self.projection.shape[0]
        return input_dim

    def input_dim(self) -> int | None:
        return self.projection.shape[1] if self.mode == "fixed-affine" else None

    def transform(self, X: np.ndarray, attributes: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if self.mode == "identity-with-attribute":
            attributes = np.asarray(attributes, dtype=np.int64)
            if attributes.size and (attributes.min() < 0 or attributes.max() >= self.n_attribute_values):
                raise InputError("attribute code outside the feature map's declared cardinality")
            onehot = np.zeros((X.shape[0], self.n_attribute_values))
            onehot[np.arange(X.shape[0]), attributes] = 1.0
            return np.hstack([X, onehot])
        if self.mode == "fixed-affine":
            if X.shape[1] != self.projection.shape[1]:
                raise InputError(
                    f"feature map expects {self.projection.shape[1]} inputs, got {X.shape[1]}"
                )
            return X @ self.projection.T + self.offset
        return X

    def attribute_coordinates(self, data: Dataset) -> tuple[int, ...]:
        """Head-input coordinates that carry the protected attribute.

        Empty for the affine map, which mixes every input column.
        """
        if self.mode == "identity-with-attribute":
            return tuple(range(data.n_features, data.n_features + self.n_attribute_values))
        if self.mode == "identity-without-attribute":
            return data.attribute_columns
        return ()

    def to_dict(self) -> dict:
        out = {"mode": self.mode, "n_attribute_values": int(self.n_attribute_values)}
        if self.mode == "fixed-affine":
            out["projection"] = self.projection.tolist()
            out["offset"] = self.offset.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureMap":
        proj = d.get("projection")
        off = d.get("offset")
        return cls(
            d["mode"],
            int(d.get("n_attribute_values", 0)),
            None if proj is None else np.array(proj, dtype=float),
            None if off is None else np.array(off, dtype=float),
        )

    def __eq__(self, other):
        if not isinstance(other, FeatureMap):
            return NotImplemented
        if (self.mode, self.n_attribute_values) != (other.mode, other.n_attribute_values):
            return False
        if self.mode != "fixed-affine":
            return True
        return np.array_equal(self.projection, other.projection) and np.array_equal(
            self.offset, other.offset
        )

    __hash__ = None


@dataclass(frozen=True)
class TrainConfig:
    max_iters: int = 100
    grad_tol: float = 1e-10
    seed: int = 0
    optimizer: str = "newton"

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise InputError(f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}")
        if not self.grad_tol > 0:
            raise InputError("grad_tol must be positive")
        if self.max_iters <= 0:
            raise InputError("max_iters must be positive")


@dataclass(frozen=True, eq=False)
class ModelHead:
    weights: np.ndarray
    bias: np.ndarray
    l2: float
    n: int
    feature_map: FeatureMap = field(default_factory=FeatureMap)
    seed: int = 0
    converged: bool = True
    iterations: int = 0
    grad_norm: float = 0.0

    def __post_init__(self):
        W = np.array(self.weights, dtype=float)
        b = np.array(self.bias, dtype=float)
        if W.ndim != 2 or b.shape != (W.shape[0],):
            raise InputError(f"weights {W.shape} and bias {b.shape} are inconsistent")
        if W.shape[0] < 2:
            raise InputError("a head needs at least two classes")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise InputError("head parameters must be finite")
        if self.l2 < 0:
            raise InputError("l2 must be non-negative")
        if self.n <= 0:
            raise InputError("n must be positive")
        W.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", W)
        object.__setattr__(self, "bias", b)

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def n_params(self) -> int:
        return self.n_classes * (self.feature_dim + 1)

    @property
    def theta(self) -> np.ndarray:
        return np.hstack([self.weights, self.bias[:, None]]).ravel()

    @property
    def penalty_mask(self) -> np.ndarray:
        m = np.ones((self.n_classes, self.feature_dim + 1))
        m[:, -1] = 0.0
        return m.ravel()

    def with_theta(self, theta, **changes) -> "ModelHead":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise InputError(f"parameter vector has length {theta.shape}, expected {self.n_params}")
        M = theta.reshape(self.n_classes, self.feature_dim + 1)
        return replace(self, weights=M[:, :-1], bias=M[:, -1], **changes)

    def inputs(self, data) -> np.ndarray:
        """Augmented head inputs ``[phi(x), 1]`` for a dataset or single sample."""
        X, a = _raw(data)
        expected = self.feature_map.input_dim()
        if expected is not None and X.shape[1] != expected:
            raise InputError(f"sample has {X.shape[1]} features, feature map expects {expected}")
        phi = self.feature_map.transform(X, a)
        if phi.shape[1] != self.feature_dim:
            raise InputError(
                f"feature map produced {phi.shape[1]} features, head expects {self.feature_dim}"
            )
        return np.hstack([phi, np.ones((phi.shape[0], 1))])

    def to_dict(self) -> dict:
        return {
            "format": "fmdebias-head",
            "version": CHECKPOINT_VERSION,
            "weights": self.weights.tolist(),
            "bias": self.bias.tolist(),
            "l2": float(self.l2),
            "n": int(self.n),
            "seed": int(self.seed),
            "feature_map": self.feature_map.to_dict(),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "grad_norm": float(self.grad_norm),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelHead":
        if d.get("format") != "fmdebias-head":
            raise InputError("not a head checkpoint")
        return cls(
            np.array(d["weights"], dtype=float),
            np.array(d["bias"], dtype=float),
            float(d["l2"]),
            int(d["n"]),
            FeatureMap.from_dict(d["feature_map"]),
            int(d.get("seed", 0)),
            bool(d.get("converged", True)),
            int(d.get("iterations", 0)),
            float(d.get("grad_norm", 0.0)),
        )


def save_head(head: ModelHead, path) -> None:
    # json writes floats with repr, which round-trips exactly
    Path(path).write_text(json.dumps(head.to_dict(), sort_keys=True, indent=1) + "\n")


def load_head(path) -> ModelHead:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: not a valid checkpoint ({exc})") from exc
    return ModelHead.from_dict(d)


def _raw(data):
    if isinstance(data, Sample):
        X = np.asarray(data.features, dtype=float).reshape(1, -1)
        return X, np.array([data.attribute])
    data = as_dataset(data)
    return data.X, data.attributes


def _labels(data) -> np.ndarray:
    if isinstance(data, Sample):
        return np.array([data.label])
    return as_dataset(data).labels


def _check_labels(head, y):
    if y.size and (y.min() < 0 or y.max() >= head.n_classes):
        raise InputError(f"labels must lie in [0, {head.n_classes})")


# -- core math on augmented inputs ------------------------------------------------


def _probs(theta, Z, n_classes):
    M = theta.reshape(n_classes, -1)
    return softmax(Z @ M.T, axis=1)


def _per_sample_grads(theta, Z, y, n_classes, l2, n):
    P = _probs(theta, Z, n_classes)
    P[np.arange(len(y)), y] -= 1.0
    G = (P[:, :, None] * Z[:, None, :]).reshape(len(y), -1)
    if l2:
        G += (l2 / n) * _mask(n_classes, Z.shape[1]) * theta
    return G


def _mask(n_classes, width):
    m = np.ones((n_classes, width))
    m[:, -1] = 0.0
    return m.ravel()


def _objective(theta, Z, y, n_classes, l2, n, w):
    M = theta.reshape(n_classes, -1)
    logp = log_softmax(Z @ M.T, axis=1)
    ce = -logp[np.arange(len(y)), y]
    reg = 0.5 * (l2 / n) * float(np.sum(M[:, :-1] ** 2))
    return float(np.sum(w * (ce + reg)) / n)


def _mean_grad(theta, Z, y, n_classes, l2, n, w):
    P = _probs(theta, Z, n_classes)
    P[np.arange(len(y)), y] -= 1.0
    g = ((w[:, None] * P).T @ Z).ravel() / n
    if l2:
        g += (l2 / n) * (np.sum(w) / n) * _mask(n_classes, Z.shape[1]) * theta
    return g


def _dense_hessian(theta, Z, n_classes, l2, n, w):
    P = _probs(theta, Z, n_classes)
    k = Z.shape[1]
    dim = n_classes * k
    H = np.zeros((dim, dim))
    for c in range(n_classes):
        sl = slice(c * k, (c + 1) * k)
        H[sl, sl] = (Z * (w * P[:, c])[:, None]).T @ Z
    Q = (P[:, :, None] * Z[:, None, :]).reshape(len(Z), dim)
    H -= Q.T @ (w[:, None] * Q)
    H /= n
    H = 0.5 * (H + H.T)
    if l2:
        H[np.diag_indices(dim)] += (l2 / n) * (np.sum(w) / n) * _mask(n_classes, k)
    return H


def _hvp(theta, Z, n_classes, l2, n, w, v):
    P = _probs(theta, Z, n_classes)
    V = v.reshape(n_classes, -1)
    U = Z @ V.T
    PU = P * U
    SU = PU - P * PU.sum(axis=1, keepdims=True)
    out = ((w[:, None] * SU).T @ Z).ravel() / n
    if l2:
        out += (l2 / n) * (np.sum(w) / n) * _mask(n_classes, Z.shape[1]) * v
    return out


def _hessian_trace(theta, Z, n_classes, l2, n, w):
    P = _probs(theta, Z, n_classes)
    s = np.sum(P - P**2, axis=1) * np.sum(Z**2, axis=1)
    tr = float(np.sum(w * s) / n)
    return tr + (l2 / n) * (np.sum(w) / n) * n_classes * (Z.shape[1] - 1)


# -- public operations ---------------------------------------------------------------


def predict_proba(head: ModelHead, data) -> np.ndarray:
    """Class probabilities; a vector for a single :class:`Sample`, else ``(n, C)``."""
    Z = head.inputs(data)
    P = _probs(head.theta, Z, head.n_classes)
    return P[0] if isinstance(data, Sample) else P


def loss(head: ModelHead, data) -> np.ndarray:
    """Per-sample loss including each sample's share of the ridge penalty."""
    Z = head.inputs(data)
    y = _labels(data)
    _check_labels(head, y)
    M = head.theta.reshape(head.n_classes, -1)
    logp = log_softmax(Z @ M.T, axis=1)
    reg = 0.5 * (head.l2 / head.n) * float(np.sum(head.weights**2))
    return -logp[np.arange(len(y)), y] + reg


def grad_loss(head: ModelHead, sample) -> np.ndarray:
    """Gradient of one sample's loss with respect to the flat parameters."""
    return per_sample_grads(head, sample)[0]


def per_sample_grads(head: ModelHead, data) -> np.ndarray:
    Z = head.inputs(data)
    y = _labels(data)
    _check_labels(head, y)
    return _per_sample_grads(head.theta, Z, y, head.n_classes, head.l2, head.n)


def objective(head: ModelHead, data, sample_weight=None) -> float:
    Z = head.inputs(data)
    y = _labels(data)
    w = _weights(sample_weight, len(y))
    return _objective(head.theta, Z, y, head.n_classes, head.l2, head.n, w)


def mean_grad(head: ModelHead, data, sample_weight=None) -> np.ndarray:
    Z = head.inputs(data)
    y = _labels(data)
    w = _weights(sample_weight, len(y))
    return _mean_grad(head.theta, Z, y, head.n_classes, head.l2, head.n, w)


def hessian(head: ModelHead, data, mode: str = "dense-factorized", sample_weight=None) -> HessianOperator:
    """Hessian of the mean training loss at the head's parameters.

    With ``l2 == 0`` a damping of ``1e-3 * trace(H) / dim`` is added before
    factorization and recorded on the operator.
    """
    data = as_dataset(data)
    if len(data) == 0:
        raise InputError("dataset is empty")
    Z = head.inputs(data)
    w = _weights(sample_weight, len(data))
    theta = head.theta
    C, n, l2 = head.n_classes, head.n, head.l2
    trace = _hessian_trace(theta, Z, C, l2, n, w)
    dim = head.n_params
    damping = 0.0
    if l2 == 0:
        damping = 1e-3 * trace / dim
        logger.info("l2 = 0: damping Hessian by %.3e", damping)

    def matvec(v):
        return _hvp(theta, Z, C, l2, n, w, v)

    if mode == "matrix-free":
        return HessianOperator(mode, dim, C, trace, matvec, damping=damping)
    if mode != "dense-factorized":
        raise InputError(f"unknown Hessian mode {mode!r}")
    H = _dense_hessian(theta, Z, C, l2, n, w)
    return HessianOperator(mode, dim, C, trace, matvec, matrix=H, damping=damping)


def hvp(head: ModelHead, data, v) -> np.ndarray:
    """Hessian-vector product without forming the Hessian."""
    v = np.asarray(v, dtype=float)
    if v.shape != (head.n_params,):
        raise InputError(f"vector length {v.shape} does not match parameter count {head.n_params}")
    data = as_dataset(data)
    Z = head.inputs(data)
    w = np.ones(len(data))
    return _hvp(head.theta, Z, head.n_classes, head.l2, head.n, w, v)


def _weights(sample_weight, n):
    if sample_weight is None:
        return np.ones(n)
    w = np.asarray(sample_weight, dtype=float).reshape(-1)
    if w.shape != (n,):
        raise InputError(f"sample_weight has length {w.shape[0]}, expected {n}")
    if not np.all(np.isfinite(w)):
        raise InputError("sample weights must be finite")
    return w


def train_head(
    data,
    config: TrainConfig | None = None,
    l2: float = 0.01,
    feature_map: FeatureMap | None = None,
    sample_weight=None,
    n_classes: int | None = None,
    init: ModelHead | None = None,
) -> ModelHead:
    """Fit the head by minimizing ``(1/n) sum_i w_i L(z_i, theta)``.

    ``n`` is the number of rows, so zero weights remove samples from the sum
    without changing each sample's ridge share, and a weight of ``1 + n*eps``
    upweights a sample by ``eps``. Newton steps with backtracking are the
    default; gradient descent is kept for cross-checks.
    """
    config = config or TrainConfig()
    data = as_dataset(data)
    if len(data) == 0:
        raise InputError("cannot train on an empty dataset")
    if l2 < 0:
        raise InputError("l2 must be non-negative")
    feature_map = feature_map or FeatureMap()
    C = n_classes or data.n_classes
    n = len(data)
    if init is not None:
        if init.feature_map != feature_map:
            raise InputError("warm start head uses a different feature map")
        theta = init.theta.copy()
    else:
        k = feature_map.output_dim(data.n_features) + 1
        theta = np.zeros(C * k)
    head = ModelHead(
        np.zeros((C, len(theta) // C - 1)), np.zeros(C), l2, n, feature_map, config.seed
    ).with_theta(theta)
    Z = head.inputs(data)
    y = data.labels
    _check_labels(head, y)
    w = _weights(sample_weight, n)

    f = _objective(theta, Z, y, C, l2, n, w)
    if not np.isfinite(f):
        raise TrainingDivergedError("initial objective is not finite")
    g = _mean_grad(theta, Z, y, C, l2, n, w)
    it = 0
    converged = bool(np.max(np.abs(g)) <= config.grad_tol)
    step = 1.0
    while not converged and it < config.max_iters:
        it += 1
        if config.optimizer == "newton":
            H = _dense_hessian(theta, Z, C, l2, n, w)
            op = HessianOperator(
                "dense-factorized", len(theta), C, float(np.trace(H)),
                lambda v: H @ v, matrix=H,
                damping=0.0 if l2 > 0 else 1e-10 * max(np.trace(H), 1.0) / len(theta),
            )
            direction = -op.solve(g)
            t = 1.0
        else:
            direction = -g
            t = step * 2.0
        slope = float(g @ direction)
        while True:
            cand = theta + t * direction
            f_new = _objective(cand, Z, y, C, l2, n, w)
            if not np.isfinite(f_new):
                if t < 1e-20:
                    raise TrainingDivergedError(f"objective became non-finite at iteration {it}")
            elif f_new <= f + 1e-4 * t * slope:
                break
            elif config.optimizer == "newton" and t == 1.0 and f_new - f <= 1e-12 * abs(f):
                # at the rounding floor the Armijo test is noise; accept a full step
                # that does not increase the gradient norm
                g_new = _mean_grad(cand, Z, y, C, l2, n, w)
                if np.max(np.abs(g_new)) <= np.max(np.abs(g)):
                    break
            t *= 0.5
            if t < 1e-20:
                break
        if t < 1e-20:
            # no decrease possible at working precision
            g = _mean_grad(theta, Z, y, C, l2, n, w)
            converged = bool(np.max(np.abs(g)) <= config.grad_tol)
            break
        step = t
        theta, f = cand, f_new
        g = _mean_grad(theta, Z, y, C, l2, n, w)
        converged = bool(np.max(np.abs(g)) <= config.grad_tol)

    # the CE gradient has zero class-sum; strip any rounding drift into the gauge
    theta = theta - gauge_project(theta * (1 - _mask(C, Z.shape[1])), C)
    grad_norm = float(np.max(np.abs(g)))
    if not converged:
        logger.warning("training stopped after %d iterations with gradient norm %.3e", it, grad_norm)
    return head.with_theta(theta, converged=converged, iterations=it, grad_norm=grad_norm)


def accuracy(head: ModelHead, data) -> float:
    data = as_dataset(data)
    return float(np.mean(np.argmax(predict_proba(head, data), axis=1) == data.labels))
