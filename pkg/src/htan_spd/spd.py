"""SPD-manifold network layers modulated by the activation basis vector.

A network step alternates BiMap congruence transforms
X -> W [X + diag(ReLU(V b + v0))] W^T (W orthogonal, on the Stiefel
manifold) with ReEig eigenvalue clamping X -> U max(t, Lambda) U^T where
t = ReLU(Q b + q0) + floor. Applied recurrently it maps the metric at slot
n-1 plus the basis vector b_n to the metric at slot n.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    add,
    constant,
    diag_embed,
    matmul,
    maximum,
    record,
    relu,
    transpose,
)

EIG_CLAMP = 1e-10        # degenerate-eigenvalue cutoff in the eig backward
REEIG_FLOOR = 1e-8       # additive floor on ReEig thresholds
SPD_EIG_FLOOR = 1e-10    # projection floor and invariant threshold
SPD_SYM_TOL = 1e-10
STIEFEL_TOL = 1e-6


class NumericalError(RuntimeError):
    """Numerical failure outside the autodiff domain checks."""


def sym_eig(x: Tensor) -> tuple[Tensor, Tensor]:
    """Eigendecomposition of a symmetric matrix: (descending values, vectors).

    The input is symmetrized as (X + X^T)/2 first. Eigenvector columns get a
    deterministic sign (largest-magnitude component positive). Backward is
    the structured symmetric rule
        dX = U (diag(g_lam) + sym(F * (U^T g_U))) U^T,
    F_ij = 1/(lam_j - lam_i) off-diagonal, zeroed when |lam_j - lam_i| is
    below the degeneracy cutoff.
    """
    if x.data.ndim != 2 or x.data.shape[0] != x.data.shape[1]:
        raise ShapeError(f"sym_eig expects a square matrix, got {x.data.shape}")
    if not np.all(np.isfinite(x.data)):
        raise NumericalError("sym_eig: non-finite entries")
    s = 0.5 * (x.data + x.data.T)
    lam, u = np.linalg.eigh(s)
    lam = lam[::-1].copy()
    u = np.ascontiguousarray(u[:, ::-1])
    flip = u[np.abs(u).argmax(axis=0), np.arange(u.shape[1])] < 0.0
    u[:, flip] *= -1.0

    lam_t = Tensor._wrap(lam)
    u_t = Tensor._wrap(u)

    def bwd(g_lam, g_u):
        diff = lam[None, :] - lam[:, None]          # F_ij = 1/(lam_j - lam_i)
        with np.errstate(divide="ignore"):
            f = np.where(np.abs(diff) < EIG_CLAMP, 0.0, 1.0 / diff)
        inner = np.diag(g_lam).astype(np.float64)
        a = u.T @ g_u
        fa = f * a
        inner = inner + 0.5 * (fa + fa.T)
        dx = u @ inner @ u.T
        return (0.5 * (dx + dx.T),)

    record((x,), (lam_t, u_t), bwd)
    return lam_t, u_t


def bimap_forward(x: Tensor, beta: Tensor, w: Tensor, v: Tensor, b: Tensor) -> Tensor:
    """Congruence transform with basis-modulated nonnegative diagonal shift."""
    m = x.data.shape[0]
    if x.data.shape != (m, m) or w.data.shape != (m, m) or v.data.shape != (m, m):
        raise ShapeError("bimap_forward: square M x M tensors required")
    if beta.data.shape != (m,) or b.data.shape != (m,):
        raise ShapeError("bimap_forward: beta and bias must have length M")
    shift = diag_embed(relu(add(matmul(v, beta), b)))
    return matmul(matmul(w, add(x, shift)), transpose(w))


def reeig_forward(x: Tensor, beta: Tensor, q: Tensor, c: Tensor) -> Tensor:
    """Clamp eigenvalues from below with basis-modulated thresholds.

    Eigenvalues are sorted descending and thresholds applied in index order;
    at an exact tie the gradient routes to the threshold branch.
    """
    m = x.data.shape[0]
    if q.data.shape != (m, m) or c.data.shape != (m,) or beta.data.shape != (m,):
        raise ShapeError("reeig_forward: dimension mismatch")
    lam, u = sym_eig(x)
    thresholds = add(relu(add(matmul(q, beta), c)), constant(REEIG_FLOOR))
    clamped = maximum(thresholds, lam)
    return matmul(matmul(u, diag_embed(clamped)), transpose(u))


@dataclass
class SPDLayerParams:
    """One BiMap/ReEig pair: orthogonal w plus the two modulation maps."""

    w: Tensor
    v: Tensor
    b: Tensor
    q: Tensor
    c: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, m: int) -> "SPDLayerParams":
        scale = 1.0 / np.sqrt(m)

        def u(*shape):
            return Tensor(rng.uniform(-scale, scale, size=shape))

        return cls(w=Tensor(random_orthogonal(rng, m)), v=u(m, m), b=u(m),
                   q=u(m, m), c=u(m))

    def named(self, prefix: str):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.v", self.v
        yield f"{prefix}.b", self.b
        yield f"{prefix}.q", self.q
        yield f"{prefix}.c", self.c


@dataclass
class SPDNetParams:
    """K stacked layer pairs applied recurrently across time slots."""

    layers: list[SPDLayerParams]

    @classmethod
    def init(cls, rng: np.random.Generator, m: int, k: int) -> "SPDNetParams":
        return cls(layers=[SPDLayerParams.init(rng, m) for _ in range(k)])

    def named(self, prefix: str):
        for idx, layer in enumerate(self.layers):
            yield from layer.named(f"{prefix}.layer{idx}")

    def stiefel_tensors(self) -> list[Tensor]:
        return [layer.w for layer in self.layers]


def spdnet_step(m_prev: Tensor, beta: Tensor, params: SPDNetParams) -> Tensor:
    """One recurrent transformation of the metric; K=0 is the identity map."""
    x = m_prev
    for layer in params.layers:
        x = bimap_forward(x, beta, layer.w, layer.v, layer.b)
        x = reeig_forward(x, beta, layer.q, layer.c)
    return x


def spdnet_rollout(m0: Tensor, betas: list[Tensor], params: SPDNetParams) -> list[Tensor]:
    """Metric trace M_1..M_N from M_0 and the per-slot basis vectors."""
    out = []
    current = m0
    for beta in betas:
        current = spdnet_step(current, beta, params)
        out.append(current)
    return out


# ---------------------------------------------------------------------------
# Stiefel optimization and SPD hygiene (pure ndarray level)


def random_orthogonal(rng: np.random.Generator, m: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(m, m)))
    return q * np.sign(np.diag(r))


def stiefel_defect(w: np.ndarray) -> float:
    return float(np.abs(w @ w.T - np.eye(w.shape[0])).max())


def stiefel_step(w: np.ndarray, grad: np.ndarray, lr: float,
                 direction: str = "descent") -> np.ndarray:
    """Riemannian step with QR retraction; returns the new orthogonal matrix.

    The Euclidean gradient is projected to the tangent space at w
    (G - w sym(w^T G)), stepped, then retracted by QR with the R diagonal
    sign-corrected so the result is a proper orthogonal factor.
    """
    if direction not in ("ascent", "descent"):
        raise ValueError(f"direction must be ascent|descent, got {direction!r}")
    if not lr > 0.0:
        raise ValueError("lr must be positive")
    wtg = w.T @ grad
    tangent = grad - w @ (0.5 * (wtg + wtg.T))
    step = lr * tangent if direction == "ascent" else -lr * tangent
    q, r = np.linalg.qr(w + step)
    diag = np.diag(r)
    if np.any(np.abs(diag) < 1e-12):
        raise NumericalError(
            f"rank-deficient retraction: |diag(R)| min = {np.abs(diag).min():.3e}")
    q = q * np.sign(diag)
    return q


def spd_project(x: np.ndarray, floor: float = SPD_EIG_FLOOR) -> np.ndarray:
    """Symmetrize and floor the spectrum; numerical hygiene for recurrences."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericalError("spd_project: non-finite entries")
    s = 0.5 * (x + x.T)
    lam, u = np.linalg.eigh(s)
    lam = np.maximum(lam, floor)
    out = u @ np.diag(lam) @ u.T
    return 0.5 * (out + out.T)


def spd_defects(x: np.ndarray) -> tuple[float, float]:
    """(symmetry defect, min eigenvalue) used by the invariant monitors."""
    sym = float(np.abs(x - x.T).max())
    min_eig = float(np.linalg.eigvalsh(0.5 * (x + x.T)).min())
    return sym, min_eig
