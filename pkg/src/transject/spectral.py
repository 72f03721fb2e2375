"""Gram spectra of the layer-0 embeddings, plus executable spectral checks.

The eigenvalue diagonal used by the attention is obtained without an
eigensolver: a learnable orthogonal basis ``Q`` is fitted so that
``Q diag(s) Q^T`` reconstructs the gram matrix, with ``s = diag(Q^T G Q)``.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .ortho import OrthogonalParam
from .tensor import (
    Tensor,
    backward,
    matmul,
    mul,
    reshape,
    square,
    sub,
    tmax,
    tmin,
    transpose,
    tsum,
)


class NumericError(ArithmeticError):
    pass


class PreconditionError(ValueError):
    pass


def gram(x0: Tensor) -> Tensor:
    """x0^T x0 for (N, d) or per sample for (B, N, d)."""
    return matmul(transpose(x0), x0)


def approx_eigen(g: Tensor, u: OrthogonalParam | Tensor) -> tuple[Tensor, Tensor]:
    """Diagonal of Q^T G Q and the Frobenius reconstruction error of Q diag Q^T.

    ``g`` is (d, d) or (B, d, d). Returns ``(sigma_raw, recon_loss)``;
    for batched input ``recon_loss`` has one entry per sample.
    """
    q = u.value() if isinstance(u, OrthogonalParam) else u
    gq = matmul(g, q)
    sigma = tsum(mul(q, gq), axis=-2)
    d = q.shape[0]
    s_row = reshape(sigma, sigma.shape[:-1] + (1, d))
    recon = matmul(mul(q, s_row), transpose(q))
    err = tsum(square(sub(g, recon)), axis=(-2, -1))
    return sigma, err


def standardize(sigma_raw: Tensor, eps: float = 1e-12) -> Tensor:
    """Min-max rescale the last axis onto [0, 1]; constant rows map to ones."""
    hi = tmax(sigma_raw, axis=-1, keepdims=True)
    lo = tmin(sigma_raw, axis=-1, keepdims=True)
    span = hi.data - lo.data
    flat = span <= eps * np.maximum(np.abs(hi.data), 1.0)
    safe = Tensor(flat.astype(np.float64))
    scaled = (sigma_raw - lo) / (hi - lo + safe)
    keep = Tensor((~flat).astype(np.float64))
    return scaled * keep + safe


def random_sigma(d: int, seed: int) -> np.ndarray:
    """Seeded uniform spectrum, standardized (Random-TransJect initialisation)."""
    if d < 1:
        raise PreconditionError("d must be >= 1")
    draws = np.random.default_rng(seed).uniform(0.0, 1.0, d)
    return standardize(Tensor(draws)).data.copy()


# -- power iteration checks ----------------------------------------------------

def power_iteration_sym(a: np.ndarray, tol: float = 1e-10, max_iter: int = 10000,
                        seed: int = 0) -> float:
    """Largest eigenvalue of a symmetric PSD matrix.

    The power method is run on ``A^(2^k)`` by repeated normalized squaring, so
    nearly equal leading eigenvalues still separate after a few dozen steps;
    the estimate is the Rayleigh quotient of the converged direction on ``A``.
    """
    a = np.asarray(a, dtype=np.float64)
    scale_ = np.abs(a).max()
    if scale_ == 0.0:
        return 0.0
    b = a / scale_
    v = np.random.default_rng(seed).normal(size=a.shape[0])
    v /= np.linalg.norm(v)
    lam = float(v @ a @ v)
    for _ in range(min(max_iter, 200)):
        b = b @ b
        top = np.abs(b).max()
        if top == 0.0:
            break
        b /= top
        w = b @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            break
        v = w / nw
        new = float(v @ a @ v)
        if abs(new - lam) <= tol * max(abs(new), 1e-300) and np.linalg.norm(a @ v - new * v) <= \
                np.sqrt(tol) * max(abs(new), 1e-300):
            return new
        lam = new
    # plain iterations polish the direction (and cover the degenerate b == 0 exit)
    for _ in range(max_iter):
        w = a @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        new = float(v @ a @ v)
        if abs(new - lam) <= tol * max(abs(new), 1e-300):
            return new
        lam = new
    raise NumericError(f"power iteration did not converge in {max_iter} iterations")


def top_singular_value(w: np.ndarray, tol: float = 1e-10, max_iter: int = 10000) -> float:
    return float(np.sqrt(max(power_iteration_sym(w.T @ w, tol, max_iter), 0.0)))


def check_linear_activation_bound(w: np.ndarray, trials: int = 10000,
                                  seed: int = 0) -> tuple[float, float]:
    """Sampled sup of ||W x|| over unit x, and sigma_1 by power iteration.

    The sampled value is a lower bound; the contract is empirical <= sigma_1.
    """
    if trials < 100:
        raise PreconditionError("need at least 100 trials")
    w = np.asarray(w, dtype=np.float64)
    x = np.random.default_rng(seed).normal(size=(trials, w.shape[1]))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    empirical = float(np.linalg.norm(x @ w.T, axis=1).max())
    sigma1 = top_singular_value(w)
    if empirical > sigma1 + 1e-8:
        raise NumericError(f"sampled bound {empirical} exceeds sigma_1 {sigma1}")
    return empirical, sigma1


def check_stochastic_eigenvalue(m: np.ndarray, tol: float = 1e-13, max_iter: int = 10000,
                                seed: int = 0) -> float:
    """Magnitude of the dominant eigenvalue of a column-stochastic matrix."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise PreconditionError(f"need a square matrix, got {m.shape}")
    if (m < 0).any() or np.abs(m.sum(axis=0) - 1.0).max() > 1e-9:
        raise PreconditionError("matrix is not column-stochastic")
    v = np.abs(np.random.default_rng(seed).normal(size=m.shape[0])) + 0.1
    v /= np.linalg.norm(v)
    est = np.linalg.norm(m @ v)
    for _ in range(max_iter):
        w = m @ v
        nw = np.linalg.norm(w)
        v = w / nw
        new = np.linalg.norm(m @ v)
        if abs(new - est) <= tol:
            return float(new)
        est = new
    raise NumericError("power iteration on stochastic matrix did not converge")


def jacobian(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    """Dense Jacobian of a vector map by one backward pass per output."""
    xt = Tensor(x, requires_grad=True)
    out = f(xt)
    rows = []
    for i in range(out.data.size):
        xt.zero_grad()
        sel = np.zeros(out.shape)
        sel.reshape(-1)[i] = 1.0
        backward(tsum(mul(f(xt), Tensor(sel))))
        rows.append(xt.grad.reshape(-1).copy())
    return np.array(rows)


def check_c1_lipschitz_bound(f: Callable[[Tensor], Tensor], x: np.ndarray, y: np.ndarray,
                             steps: int = 64) -> tuple[float, float]:
    """Compare ||f(y) - f(x)|| / ||y - x|| with the largest Jacobian norm on the segment.

    For a C^1 map the ratio never exceeds the sup of the Jacobian norm along
    the segment (sampled here at ``steps + 1`` points, so the returned sup is
    itself a lower estimate).
    """
    fx, fy = f(Tensor(x)).data, f(Tensor(y)).data
    ratio = float(np.linalg.norm(fy - fx) / np.linalg.norm(y - x))
    sup = 0.0
    for t in np.linspace(0.0, 1.0, steps + 1):
        j = jacobian(f, x + t * (y - x))
        sup = max(sup, top_singular_value(j))
    return ratio, sup
