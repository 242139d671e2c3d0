"""Legendre-Gauss-Lobatto collocation machinery.

Provides the node set, quadrature weights and differentiation matrix used by
the optimal-control transcription.  The LGL family includes both endpoints,
which is what lets the transcription enforce dynamics at every node and pin
the initial state.

Nodes are the roots of (1 - tau^2) P'_N(tau), found by Newton iteration from
Chebyshev-Gauss-Lobatto initial guesses.  Weights are

    w_j = 2 / (N (N + 1) [P_N(tau_j)]^2)

and the differentiation matrix is the classic form

    D[j, k] = (P_N(tau_j) / P_N(tau_k)) / (tau_j - tau_k)    (j != k)
    D[0, 0] = -N (N + 1) / 4,   D[N, N] = +N (N + 1) / 4,    else 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

NEWTON_TOL = 1e-14
NEWTON_MAX_ITER = 100


class BasisConstructionError(RuntimeError):
    """Newton iteration for the LGL nodes failed to converge."""


@dataclass(frozen=True)
class CollocationBasis:
    """Immutable LGL basis of polynomial degree ``n_nodes - 1`` on [-1, 1]."""

    n_nodes: int
    nodes: np.ndarray
    weights: np.ndarray
    d: np.ndarray

    @property
    def degree(self) -> int:
        return self.n_nodes - 1


def _legendre_table(tau: np.ndarray, n: int) -> np.ndarray:
    """Legendre polynomials P_0..P_n evaluated at ``tau`` (columns)."""
    p = np.zeros((tau.size, n + 1))
    p[:, 0] = 1.0
    if n >= 1:
        p[:, 1] = tau
    for k in range(2, n + 1):
        p[:, k] = ((2 * k - 1) * tau * p[:, k - 1] - (k - 1) * p[:, k - 2]) / k
    return p


@lru_cache(maxsize=None)
def lgl_basis(n: int) -> CollocationBasis:
    """Build (and cache) the degree-``n`` LGL basis.

    Construction is O(n^2) and the basis is reused on every controller step,
    hence the cache.
    """
    if n < 1:
        raise ValueError("polynomial degree must be >= 1")

    tau = -np.cos(np.pi * np.arange(n + 1) / n)
    for _ in range(NEWTON_MAX_ITER):
        p = _legendre_table(tau, n)
        delta = (tau * p[:, n] - p[:, n - 1]) / ((n + 1) * p[:, n])
        tau = tau - delta
        if np.max(np.abs(delta)) < NEWTON_TOL:
            break
    else:
        raise BasisConstructionError(f"LGL Newton iteration stalled for N={n}")

    tau[0], tau[-1] = -1.0, 1.0
    pn = _legendre_table(tau, n)[:, n]
    weights = 2.0 / (n * (n + 1) * pn**2)

    d = np.zeros((n + 1, n + 1))
    diff = tau[:, None] - tau[None, :]
    np.fill_diagonal(diff, 1.0)
    d = (pn[:, None] / pn[None, :]) / diff
    np.fill_diagonal(d, 0.0)
    d[0, 0] = -n * (n + 1) / 4.0
    d[-1, -1] = n * (n + 1) / 4.0

    tau.setflags(write=False)
    weights.setflags(write=False)
    d.setflags(write=False)
    return CollocationBasis(n_nodes=n + 1, nodes=tau, weights=weights, d=d)


def time_map(
    basis: CollocationBasis, t0: float, tf: float
) -> tuple[np.ndarray, float]:
    """Map the basis nodes onto [t0, tf].

    Returns the physical node times and the scale factor (tf - t0) / 2 that
    converts tau-derivatives and tau-quadrature to physical time.
    """
    if tf <= t0:
        raise ValueError("tf must exceed t0")
    scale = 0.5 * (tf - t0)
    times = t0 + scale * (basis.nodes + 1.0)
    return times, scale
