"""Orthogonal and semi-orthogonal parametrizations.

Every raw matrix is valid: the square case goes through the Cayley map of its
skew-symmetric part, the rectangular case through a sign-fixed thin QR. The
constraint therefore survives any optimizer update of the raw values.
"""

from __future__ import annotations

import warnings

import numpy as np
import scipy.linalg as sla

from .tensor import Tensor, add, is_grad_enabled, scale, sub, transpose


class LinearAlgebraError(ArithmeticError):
    pass


PIVOT_TOL = 1e-12
RESIDUAL_TOL = 1e-8


def linear_solve(a: Tensor, b: Tensor) -> Tensor:
    """Differentiable X with A·X = B (square A)."""
    if a.ndim != 2 or a.shape[0] != a.shape[1] or b.ndim != 2 or b.shape[0] != a.shape[0]:
        raise LinearAlgebraError(f"linear_solve: bad shapes {a.shape}, {b.shape}")
    with warnings.catch_warnings():
        # a zero pivot is reported below as LinearAlgebraError
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(a.data, check_finite=True)
    if np.abs(np.diag(lu)).min() <= PIVOT_TOL:
        raise LinearAlgebraError("linear_solve: matrix is singular to working precision")
    x = sla.lu_solve((lu, piv), b.data)
    resid = np.abs(a.data @ x - b.data).max()
    if not np.isfinite(resid) or resid > RESIDUAL_TOL * max(1.0, np.abs(b.data).max()):
        raise LinearAlgebraError(f"linear_solve: residual {resid:.3e} too large")

    def vjp(g):
        gb = sla.lu_solve((lu, piv), g, trans=1)
        return -gb @ x.T, gb

    return Tensor.from_op(x, (a, b), vjp)


def orthogonalize(raw: Tensor) -> Tensor:
    """Cayley map Q = (I - A)(I + A)^-1 with A = (raw - raw^T)/2.

    I - A and (I + A)^-1 commute, so Q is obtained from one solve.
    """
    if raw.ndim != 2 or raw.shape[0] != raw.shape[1]:
        raise LinearAlgebraError(f"orthogonalize needs a square matrix, got {raw.shape}")
    eye = Tensor(np.eye(raw.shape[0]))
    skew = scale(sub(raw, transpose(raw)), 0.5)
    return linear_solve(add(eye, skew), sub(eye, skew))


def _copyltu(m: np.ndarray) -> np.ndarray:
    return np.tril(m) + np.tril(m, -1).T


def _thin_qr(a: Tensor) -> Tensor:
    m, n = a.shape
    q, r = np.linalg.qr(a.data, mode="reduced")
    d = np.sign(np.diag(r))
    d[d == 0] = 1.0
    q = q * d
    r = d[:, None] * r
    rdiag = np.abs(np.diag(r))
    if rdiag.min() <= 1e-10 * max(rdiag.max(), 1e-300):
        raise LinearAlgebraError(f"semi_orthogonalize: rank-deficient {m}x{n} input")

    def vjp(gq):
        # R has no upstream gradient: only Q leaves this op
        mm = -gq.T @ q
        x = gq + q @ _copyltu(mm)
        return (sla.solve_triangular(r, x.T, lower=False).T,)

    return Tensor.from_op(q, (a,), vjp)


def semi_orthogonalize(raw: Tensor) -> Tensor:
    """Orthonormal columns from the thin QR of ``raw`` (R diagonal >= 0).

    A wide matrix (fewer rows than columns) gets orthonormal rows instead,
    via the QR of its transpose.
    """
    if raw.ndim != 2:
        raise LinearAlgebraError(f"semi_orthogonalize needs a matrix, got {raw.shape}")
    if raw.shape[0] >= raw.shape[1]:
        return _thin_qr(raw)
    return transpose(_thin_qr(transpose(raw)))


class OrthogonalParam:
    """Square learnable matrix that is orthogonal at every read."""

    map = staticmethod(orthogonalize)

    def __init__(self, d: int, rng: np.random.Generator | None = None, init_scale: float = 0.0,
                 name: str | None = None):
        raw = np.zeros((d, d)) if rng is None or init_scale == 0 else rng.normal(0.0, init_scale, (d, d))
        self.raw = Tensor(raw, requires_grad=True, name=name)
        self._cached: Tensor | None = None
        self._cached_version = -1

    @classmethod
    def from_raw(cls, raw: np.ndarray, name: str | None = None):
        obj = cls.__new__(cls)
        obj.raw = Tensor(raw, requires_grad=True, name=name)
        obj._cached = None
        obj._cached_version = -1
        return obj

    @property
    def dirty(self) -> bool:
        return self._cached is None or self._cached_version != self.raw._version

    def value(self) -> Tensor:
        """The constrained matrix. Inside a recorded graph it is rebuilt (so
        gradients reach ``raw``); outside, it is cached until ``raw`` changes."""
        if is_grad_enabled():
            q = self.map(self.raw)
            self._cached, self._cached_version = Tensor(q.data), self.raw._version
            return q
        if self.dirty:
            self._cached = Tensor(self.map(self.raw).data)
            self._cached_version = self.raw._version
        return self._cached

    @property
    def cached_q(self) -> np.ndarray:
        if self.dirty:
            self._cached = Tensor(self.map(self.raw.detach()).data)
            self._cached_version = self.raw._version
        return self._cached.data


class SemiOrthogonalParam(OrthogonalParam):
    """Rectangular learnable matrix with orthonormal columns (rows if wide)."""

    map = staticmethod(semi_orthogonalize)

    def __init__(self, rows: int, cols: int, rng: np.random.Generator, name: str | None = None):
        self.raw = Tensor(rng.normal(0.0, 1.0, (rows, cols)), requires_grad=True, name=name)
        self._cached = None
        self._cached_version = -1


def orthogonality_error(q: np.ndarray) -> float:
    """max |Q^T Q - I| over the smaller Gram side."""
    g = q.T @ q if q.shape[0] >= q.shape[1] else q @ q.T
    return float(np.abs(g - np.eye(g.shape[0])).max())
