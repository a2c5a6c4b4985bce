"""Pairwise-complete Kendall's tau-a surfaces for irregularly sampled components."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data_model import MixedDataset

__all__ = ["TauSurface", "InsufficientDataError", "tau_surface", "tau_surfaces", "DEFAULT_C0"]

DEFAULT_C0 = 10


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TauSurface:
    """Sample Kendall's tau between component ``j`` at ``s`` and ``k`` at ``t``.

    ``tau[a, b]`` is the statistic for ``(times[a], times[b])``; cells with
    ``N <= c0`` are NaN.  ``N`` holds the pairwise-complete subject pair counts
    for every cell, retained or not.
    """

    j: int
    k: int
    times: np.ndarray
    tau: np.ndarray
    N: np.ndarray
    c0: int

    @property
    def mask(self) -> np.ndarray:
        return self.N > self.c0

    def cells(self):
        """Retained cells as ``(s_index, t_index, tau, N)`` arrays."""
        a, b = np.nonzero(self.mask)
        return a, b, self.tau[a, b], self.N[a, b]

    def transpose(self) -> "TauSurface":
        return TauSurface(self.k, self.j, self.times, self.tau.T.copy(), self.N.T.copy(), self.c0)

    def to_csv(self, path) -> None:
        a, b, tau, N = self.cells()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["s", "t", "tau_hat", "N"])
            for i, jj, tt, nn in zip(a, b, tau, N):
                w.writerow([repr(float(self.times[i])), repr(float(self.times[jj])), repr(float(tt)), int(nn)])


def _sign_blocks(x: np.ndarray, rows: slice):
    """Pair signs and pair-completeness for subjects ``rows`` against all subjects.

    ``x`` has shape (n, P) with NaN for missing; returns arrays of shape
    (P, r * n).
    """
    xr = x[rows]
    diff = xr[:, None, :] - x[None, :, :]
    obs = ~np.isnan(diff)
    sgn = np.sign(np.where(obs, diff, 0.0))
    P = x.shape[1]
    return sgn.reshape(-1, P).T, obs.reshape(-1, P).T.astype(float)


def _pair_sums(x: np.ndarray, chunk: int | None = None):
    """Sum of sign products and completeness counts over ordered subject pairs."""
    n, P = x.shape
    if chunk is None:
        chunk = max(1, int(4e6 // max(n * P, 1)))
    num = np.zeros((P, P))
    cnt = np.zeros((P, P))
    for start in range(0, n, chunk):
        sgn, obs = _sign_blocks(x, slice(start, min(n, start + chunk)))
        num += sgn @ sgn.T
        cnt += obs @ obs.T
    # each unordered pair appears twice; self pairs have zero sign and are removed from counts
    diag_obs = (~np.isnan(x)).astype(float)
    cnt -= diag_obs.T @ diag_obs
    return num / 2.0, np.rint(cnt / 2.0).astype(np.int64)


def tau_surfaces(data: MixedDataset, c0: int = DEFAULT_C0, times=None) -> dict:
    """All surfaces ``(j, k)`` with ``j <= k`` in one pass.

    Parameters
    ----------
    data : MixedDataset
    c0 : int
        Cells with ``N <= c0`` are excluded.
    times : ndarray, optional
        Grid to snap observations to; defaults to the pooled observation times.

    Returns
    -------
    dict mapping ``(j, k)`` to TauSurface (zero-based indices).
    """
    if c0 < 0:
        raise ValueError("c0 must be nonnegative")
    grid = data.pooled_times if times is None else np.asarray(times, dtype=float)
    dense = data.dense(None if times is None else grid)
    n, J, T = dense.shape
    num, cnt = _pair_sums(dense.reshape(n, J * T))
    out = {}
    for j in range(J):
        for k in range(j, J):
            sj, sk = slice(j * T, (j + 1) * T), slice(k * T, (k + 1) * T)
            N = cnt[sj, sk].copy()
            with np.errstate(invalid="ignore", divide="ignore"):
                tau = num[sj, sk] / N
            tau[N <= c0] = np.nan
            out[(j, k)] = TauSurface(j, k, grid, tau, N, int(c0))
    return out


def tau_surface(data: MixedDataset, j: int, k: int, c0: int = DEFAULT_C0, times=None) -> TauSurface:
    """Weighted pairwise-complete Kendall surface between components ``j`` and ``k`` (zero-based).

    ``tau[s, t]`` averages ``sgn(X_ij(s) - X_i'j(s)) * sgn(X_ik(t) - X_i'k(t))``
    over the ``N[s, t]`` subject pairs observing both; ties contribute zero.
    """
    if not (0 <= j < data.J and 0 <= k < data.J):
        raise IndexError("component index out of range")
    grid = data.pooled_times if times is None else np.asarray(times, dtype=float)
    dense = data.dense(None if times is None else grid)
    n, _, T = dense.shape
    num, cnt = _pair_sums(np.concatenate([dense[:, j, :], dense[:, k, :]], axis=1))
    N = cnt[:T, T:].copy()
    with np.errstate(invalid="ignore", divide="ignore"):
        tau = num[:T, T:] / N
    tau[N <= c0] = np.nan
    surf = TauSurface(j, k, grid, tau, N, int(c0))
    if not np.any(surf.mask):
        raise InsufficientDataError("insufficient pairwise-complete data")
    return surf
