"""Finite-difference verification of analytic gradients.

A check takes a closure that rebuilds the forward pass from scratch (the
tape contract forbids replay), runs one taped backward for the analytic
side, and central differences with a detached forward for the numeric side.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .autodiff import Tape, Tensor, backward


def relative_error(analytic: float, numeric: float) -> float:
    """|a - n| / max(1, |a|) — the normalization used across the suite."""
    return abs(analytic - numeric) / max(1.0, abs(analytic))


def fd_gradient(build: Callable[[], Tensor], leaf: Tensor, index: int,
                step: float = 1e-5) -> float:
    """Central finite difference of the scalar `build()` w.r.t. one coordinate."""
    flat = leaf.data.ravel()
    orig = flat[index]
    flat[index] = orig + step
    hi = float(build().data)
    flat[index] = orig - step
    lo = float(build().data)
    flat[index] = orig
    return (hi - lo) / (2.0 * step)


def check_gradients(build: Callable[[], Tensor],
                    leaves: Mapping[str, Tensor],
                    step: float = 1e-5,
                    coords_per_leaf: int = 4,
                    rng: np.random.Generator | None = None) -> dict[str, float]:
    """Compare analytic grads of `build()` against central differences.

    Checks up to `coords_per_leaf` randomly chosen coordinates of every
    leaf. Returns {"<name>[i]": relative_error}; callers assert on the max.
    """
    rng = rng or np.random.default_rng(0)
    for t in leaves.values():
        t.zero_grad()
    with Tape() as tape:
        out = build()
    backward(tape, out)

    report: dict[str, float] = {}
    for name, leaf in leaves.items():
        n = leaf.data.size
        if n == 0:
            continue
        grad = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
        count = min(coords_per_leaf, n)
        picks = rng.choice(n, size=count, replace=False)
        for idx in picks:
            idx = int(idx)
            numeric = fd_gradient(build, leaf, idx, step=step)
            analytic = float(grad.ravel()[idx])
            report[f"{name}[{idx}]"] = relative_error(analytic, numeric)
    return report
