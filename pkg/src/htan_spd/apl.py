"""Adaptive piecewise-linear activations and the functional metric over them.

An activation is y = ReLU(x) + sum_m alpha_m * ReLU(-x + beta_m): `beta`
holds the shared basis biases, `alpha` the per-task coordinates. Squared
functional distance between two coordinate vectors is the quadratic form
under an SPD metric; the standard-normal-input metric is the Gram matrix
G_ij = E[ReLU(beta_i - x) * ReLU(beta_j - x)], x ~ N(0, 1).
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .autodiff import DomainError, ShapeError, Tensor, matmul, record, stack, sub
from .quadrature import QuadratureError, integrate

_SQRT_2PI = math.sqrt(2.0 * math.pi)
GRAM_JITTER_SCALE = 1e-6


def _npdf(x: np.ndarray) -> np.ndarray:
    return np.exp(-0.5 * x * x) / _SQRT_2PI


def _ncdf(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def _check_pair(alpha: Tensor, beta: Tensor) -> int:
    if alpha.data.ndim != 1 or beta.data.ndim != 1:
        raise ShapeError("alpha and beta must be rank-1")
    if alpha.data.shape != beta.data.shape:
        raise ShapeError(
            f"coordinate/basis length mismatch: {alpha.data.shape} vs {beta.data.shape}")
    return alpha.data.shape[0]


def apl_apply(x: Tensor, alpha: Tensor, beta: Tensor) -> Tensor:
    """Apply the piecewise-linear activation elementwise over `x`."""
    _check_pair(alpha, beta)
    xf = x.data.ravel()
    diff = beta.data[None, :] - xf[:, None]            # (n, M)
    hinge_mask = diff > 0.0
    hinges = np.where(hinge_mask, diff, 0.0)
    y = np.where(xf > 0.0, xf, 0.0) + hinges @ alpha.data
    out = Tensor._wrap(y.reshape(x.data.shape))

    relu_mask = xf > 0.0
    alpha_d = alpha.data

    def bwd(g):
        gf = g.ravel()
        mask_f = hinge_mask.astype(np.float64)
        gx = gf * relu_mask - gf * (mask_f @ alpha_d)
        galpha = hinges.T @ gf
        gbeta = alpha_d * (mask_f.T @ gf)
        return gx.reshape(x.data.shape), galpha, gbeta

    record((x, alpha, beta), (out,), bwd)
    return out


def gaussian_gram_closed_form(beta: np.ndarray) -> np.ndarray:
    """Exact raw Gram entries via normal pdf/cdf (no jitter); test oracle."""
    beta = np.asarray(beta, dtype=np.float64)
    b_i = beta[:, None]
    b_j = beta[None, :]
    m = np.minimum(b_i, b_j)
    return (b_i * b_j + 1.0) * np.vectorize(_ncdf)(m) + (b_i + b_j - m) * _npdf(m)


def _gram_entry_quad(bi: float, bj: float, lo: float, hi: float,
                     breaks, tol: float) -> float:
    def f(x):
        return (np.maximum(bi - x, 0.0) * np.maximum(bj - x, 0.0) * _npdf(x))

    return integrate(f, lo, hi, tol=tol, breakpoints=breaks)


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(15)


def _gram_dgrad_matrix(b: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """H[i, k] = d(raw G_ik)/d(beta_i) = integral 1{x < b_i} ReLU(b_k - x) N(x).

    Composite Gauss-Legendre with panel edges at every basis value (the
    integrand is smooth inside each panel) and panel width capped at 1 so
    the Gaussian factor is resolved to machine precision.
    """
    edges = np.unique(np.concatenate(([lo, hi], b)))
    refined = [np.linspace(a, c, max(2, int(np.ceil(c - a)) + 1))
               for a, c in zip(edges[:-1], edges[1:])]
    m = b.shape[0]
    h = np.zeros((m, m))
    for seg in refined:
        for a, c in zip(seg[:-1], seg[1:]):
            half, mid = 0.5 * (c - a), 0.5 * (a + c)
            x = mid + half * _GL_NODES
            wpdf = half * _GL_WEIGHTS * _npdf(x)
            indicator = x[None, :] < b[:, None]
            hinge = np.maximum(b[:, None] - x[None, :], 0.0)
            h += (indicator * wpdf[None, :]) @ hinge.T
    return h


def gaussian_gram(beta: Tensor, tol: float = 1e-8) -> Tensor:
    """Standard-normal Gram matrix of the hinge basis, jittered to strict PD.

    Entries by adaptive quadrature to absolute tolerance `tol` over an
    interval covering both the basis range and the normal's mass (10 sigma
    past each, truncation below 1e-20); jitter adds eps*I with
    eps = 1e-6 * trace(G)/M so duplicate basis entries stay invertible.
    The node is differentiable w.r.t. beta (quadrature-differentiated).
    """
    if beta.data.ndim != 1:
        raise ShapeError("gaussian_gram expects a rank-1 basis vector")
    b = beta.data
    if not np.all(np.isfinite(b)):
        raise DomainError("gaussian_gram: non-finite basis entry")
    m_count = b.shape[0]
    # cover the basis range AND the standard normal's mass; beyond 10 sigma
    # the truncated tail contributes below 1e-20
    lo, hi = float(min(b.min(), 0.0) - 10.0), float(max(b.max(), 0.0) + 10.0)
    breaks = tuple(float(v) for v in np.unique(b))

    raw = np.empty((m_count, m_count), dtype=np.float64)
    for i in range(m_count):
        for j in range(i, m_count):
            try:
                val = _gram_entry_quad(float(b[i]), float(b[j]), lo, hi, breaks, tol)
            except QuadratureError as err:
                raise QuadratureError(f"gram entry ({i}, {j}): {err}") from err
            raw[i, j] = raw[j, i] = val

    eps = GRAM_JITTER_SCALE * float(np.trace(raw)) / m_count
    out = Tensor._wrap(raw + eps * np.eye(m_count))

    def bwd(g):
        # out = raw + (c/M) * trace(raw) * I  =>  dL/draw = g + (c/M) tr(g_diag) I
        g_raw = g + (GRAM_JITTER_SCALE / m_count) * np.trace(g) * np.eye(m_count)
        h = _gram_dgrad_matrix(b, lo, hi)
        gbeta = np.array([
            float(np.dot(g_raw[i, :] + g_raw[:, i], h[i, :]))
            for i in range(m_count)
        ])
        return (gbeta,)

    record((beta,), (out,), bwd)
    return out


def mahalanobis_sq(a1: Tensor, a2: Tensor, metric: Tensor) -> Tensor:
    """Squared functional distance (a1-a2)^T metric (a1-a2); scalar tensor."""
    if a1.data.shape != a2.data.shape or a1.data.ndim != 1:
        raise ShapeError("coordinate vectors must be rank-1 and equal length")
    m_count = a1.data.shape[0]
    if metric.data.shape != (m_count, m_count):
        raise ShapeError(
            f"metric shape {metric.data.shape} does not match coordinates ({m_count},)")
    delta = sub(a1, a2)
    return matmul(delta, matmul(metric, delta))


def distance_matrix(alphas: Sequence[Tensor], metric: Tensor) -> Tensor:
    """Pairwise squared-distance matrix over task coordinates (T x T)."""
    t_count = len(alphas)
    if t_count < 2:
        raise ShapeError("distance_matrix needs at least two coordinate vectors")
    pair: dict[tuple[int, int], Tensor] = {}
    for i in range(t_count):
        for j in range(i + 1, t_count):
            pair[(i, j)] = mahalanobis_sq(alphas[i], alphas[j], metric)
    rows = []
    for i in range(t_count):
        entries = []
        for j in range(t_count):
            if i == j:
                entries.append(Tensor(0.0))
            else:
                entries.append(pair[(min(i, j), max(i, j))])
        rows.append(stack(entries))
    return stack(rows)
