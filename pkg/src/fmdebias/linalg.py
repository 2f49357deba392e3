"""Hessian operators and inverse-Hessian solves.

The softmax head is invariant to adding the same vector to every class row of
``[W | b]``. Along that gauge subspace the cross-entropy curvature is zero, so
the raw Hessian is singular whenever intercepts are unregularized. Every
gradient the package feeds to a solve has zero class-sum and therefore lies in
the gauge complement, which the Hessian maps into itself. Adding a multiple of
the gauge projector leaves solves on that complement unchanged while making
the operator positive definite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import linalg as sla

from .exceptions import ConvergenceError, FactorizationError, InputError

SOLVE_METHODS = ("direct", "conjugate-gradient")


@dataclass(frozen=True)
class SolveConfig:
    method: str = "direct"
    cg_tol: float = 1e-8
    cg_max_iters: int | None = None  # None -> 10 * dim
    recompute_each_step: bool = False

    def __post_init__(self):
        if self.method not in SOLVE_METHODS:
            raise InputError(f"unknown solve method {self.method!r}; expected one of {SOLVE_METHODS}")
        if not self.cg_tol > 0:
            raise InputError("cg_tol must be positive")
        if self.cg_max_iters is not None and self.cg_max_iters <= 0:
            raise InputError("cg_max_iters must be positive")


def gauge_project(v: np.ndarray, n_classes: int) -> np.ndarray:
    """Project flat parameter vector(s) onto the class-shift subspace."""
    v = np.asarray(v, dtype=float)
    shaped = v.reshape(v.shape[:-1] + (n_classes, -1))
    mean = shaped.mean(axis=-2, keepdims=True)
    return np.broadcast_to(mean, shaped.shape).reshape(v.shape)


class HessianOperator:
    """Empirical-risk Hessian of a softmax head, dense or matrix-free.

    ``matvec`` applies the raw Hessian. ``solve`` applies the inverse of the
    regularized operator ``H + gauge_shift * P_gauge + damping * I``.
    """

    def __init__(
        self,
        mode: str,
        dim: int,
        n_classes: int,
        trace: float,
        matvec: Callable[[np.ndarray], np.ndarray],
        matrix: np.ndarray | None = None,
        damping: float = 0.0,
    ):
        if mode not in ("dense-factorized", "matrix-free"):
            raise InputError(f"unknown Hessian mode {mode!r}")
        self.mode = mode
        self.dim = int(dim)
        self.n_classes = int(n_classes)
        self.trace = float(trace)
        self.damping = float(damping)
        self.gauge_shift = self.trace / self.dim if self.trace > 0 else 1.0
        self.matrix = matrix
        self._matvec = matvec
        self._factor = None
        if mode == "dense-factorized":
            if matrix is None:
                raise InputError("dense mode needs the Hessian matrix")
            self._factorize()

    def _factorize(self):
        A = self.regularized_matrix()
        try:
            self._factor = sla.cho_factor(A, lower=True, check_finite=True)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise FactorizationError(f"Cholesky factorization failed: {exc}", self.damping) from exc

    def regularized_matrix(self) -> np.ndarray:
        if self.matrix is None:
            raise InputError("matrix-free operator has no dense matrix")
        k = self.dim // self.n_classes
        gauge = np.kron(np.full((self.n_classes, self.n_classes), 1.0 / self.n_classes), np.eye(k))
        return self.matrix + self.gauge_shift * gauge + self.damping * np.eye(self.dim)

    def matvec(self, v: np.ndarray) -> np.ndarray:
        v = self._check(v)
        return self._matvec(v)

    def regularized_matvec(self, v: np.ndarray) -> np.ndarray:
        v = self._check(v)
        out = self._matvec(v) + self.gauge_shift * gauge_project(v, self.n_classes)
        if self.damping:
            out = out + self.damping * v
        return out

    def _check(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape != (self.dim,):
            raise InputError(f"vector length {v.shape} does not match Hessian dimension {self.dim}")
        return v

    def solve(self, v: np.ndarray, config: SolveConfig | None = None) -> np.ndarray:
        config = config or SolveConfig()
        v = np.asarray(v, dtype=float)
        if v.ndim == 2:
            if v.shape[1] != self.dim:
                raise InputError(f"right-hand sides have width {v.shape[1]}, expected {self.dim}")
            if config.method == "direct" and self._factor is not None:
                return sla.cho_solve(self._factor, v.T).T
            return np.stack([self.solve(row, config) for row in v]) if len(v) else v.copy()
        v = self._check(v)
        if config.method == "direct" and self._factor is not None:
            return sla.cho_solve(self._factor, v)
        max_iters = config.cg_max_iters or 10 * self.dim
        return conjugate_gradient(self.regularized_matvec, v, config.cg_tol, max_iters)


def conjugate_gradient(apply_A, b, tol=1e-8, max_iters=1000):
    """Solve ``A x = b`` for symmetric positive definite ``A`` given as a product.

    Stops when ``||A x - b|| / ||b|| <= tol``; raises :class:`ConvergenceError`
    carrying the achieved relative residual otherwise.
    """
    b = np.asarray(b, dtype=float)
    bnorm = np.linalg.norm(b)
    x = np.zeros_like(b)
    if bnorm == 0.0:
        return x
    r = b.copy()
    p = r.copy()
    rs = r @ r
    for _ in range(max_iters):
        Ap = apply_A(p)
        curv = p @ Ap
        if curv <= 0:
            raise ConvergenceError("operator is not positive definite along a search direction",
                                   np.sqrt(rs) / bnorm)
        step = rs / curv
        x += step * p
        r -= step * Ap
        rs_new = r @ r
        if np.sqrt(rs_new) <= tol * bnorm:
            # recursive residual drifts; confirm against the true one
            true_res = np.linalg.norm(apply_A(x) - b) / bnorm
            if true_res <= tol:
                return x
            r = b - apply_A(x)
            p = r.copy()
            rs = r @ r
            continue
        p = r + (rs_new / rs) * p
        rs = rs_new
    residual = np.linalg.norm(apply_A(x) - b) / bnorm
    if residual <= tol:
        return x
    raise ConvergenceError(f"conjugate gradient did not converge in {max_iters} iterations", residual)
