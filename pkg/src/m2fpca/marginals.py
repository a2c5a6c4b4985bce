"""Per-time cutoff and monotone transform estimation, and the observation maps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special

from .bridge import CutoffVector
from .data_model import MixedDataset, VariableType

__all__ = [
    "MonotoneTransform",
    "MarginalModel",
    "estimate_cutoffs",
    "estimate_transform",
    "apply_observation_map",
    "fit_marginals",
]


def estimate_cutoffs(values, vtype: VariableType, component: int = 0, time: float = 0.0) -> CutoffVector:
    """Method-of-moments latent thresholds from the observed level proportions.

    Binary and truncated: ``Phi^{-1}(P(X = 0))``.  Ordinal with ``L`` levels:
    ``Phi^{-1}(P(X <= k - 1))`` for ``k = 1..L-1``.  Proportions of exactly
    0 or 1 give infinite thresholds (degenerate margin).
    """
    x = np.asarray(values, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("cannot estimate cutoffs from an empty sample")
    if vtype.name == "continuous":
        raise ValueError("continuous variables have no cutoffs")
    if vtype.name in ("binary", "truncated"):
        props = np.array([np.mean(x == 0)])
    else:
        props = np.array([np.mean(x <= k - 1) for k in range(1, vtype.levels)])
    return CutoffVector(component, float(time), tuple(special.ndtri(props)))


@dataclass(frozen=True, eq=False)
class MonotoneTransform:
    """Piecewise-linear estimate of the nonparanormal transform at one time.

    ``support`` holds the distinct observed values (positive values only for
    truncated variables) and ``latent`` the normal scores
    ``Phi^{-1}(G(x))`` with ``G(x) = #{X <= x} / (n + 1)``.  Outside the
    support both directions are clamped flat.
    """

    support: np.ndarray
    latent: np.ndarray

    def __call__(self, x):
        return np.interp(np.asarray(x, dtype=float), self.support, self.latent)

    def inverse(self, z):
        return np.interp(np.asarray(z, dtype=float), self.latent, self.support)

    def to_dict(self) -> dict:
        return {"support": self.support.tolist(), "latent": self.latent.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MonotoneTransform":
        return cls(np.asarray(d["support"], float), np.asarray(d["latent"], float))


def estimate_transform(values, vtype: VariableType) -> MonotoneTransform:
    """Empirical normal-score transform ``f(x) = Phi^{-1}{G(x)}``.

    For truncated variables ``G`` counts all ``n`` values (zeros included)
    but the map is supported on the positive values only.
    """
    x = np.asarray(values, dtype=float).ravel()
    if vtype.name not in ("continuous", "truncated"):
        raise ValueError("transforms are defined for continuous and truncated variables")
    n = x.size
    pts = np.unique(x[x > 0] if vtype.name == "truncated" else x)
    if pts.size < 2:
        raise ValueError("transform unidentifiable: fewer than two distinct values")
    counts = np.searchsorted(np.sort(x), pts, side="right")
    return MonotoneTransform(pts, special.ndtri(counts / (n + 1.0)))


def apply_observation_map(latent, vtype: VariableType, cutoffs=None, transform: MonotoneTransform | None = None):
    """Push latent Gaussian values through the type-specific observation map.

    ``transform`` (latent -> observed via its inverse) applies to continuous
    and truncated values; identity when omitted.
    """
    z = np.asarray(latent, dtype=float)
    th = cutoffs.as_array() if isinstance(cutoffs, CutoffVector) else np.asarray(
        () if cutoffs is None else cutoffs, dtype=float).ravel()
    if vtype.n_cutoffs != th.size:
        raise ValueError(f"{vtype.name} variables need {vtype.n_cutoffs} cutoffs, got {th.size}")
    if vtype.name == "continuous":
        out = z if transform is None else transform.inverse(z)
    elif vtype.name == "truncated":
        val = z if transform is None else transform.inverse(z)
        out = np.where(z > th[0], val, 0.0)
    elif vtype.name == "binary":
        out = (z > th[0]).astype(float)
    else:
        out = np.searchsorted(th, z, side="right").astype(float)
    return out if out.ndim else float(out)


class MarginalModel:
    """Cutoffs and transforms per (component, time).

    Parameters
    ----------
    times : ndarray, shape (T,)
    types : sequence of VariableType
    cutoffs : list of ndarray
        ``cutoffs[j]`` has shape ``(T, n_cutoffs_j)``.
    transforms : list of list
        ``transforms[j][r]`` is a MonotoneTransform or None.
    pooled : list of ndarray of bool
        Marks cells that fell back to the time-pooled estimate.
    """

    def __init__(self, times, types: Sequence[VariableType], cutoffs, transforms, pooled=None):
        self.times = np.asarray(times, dtype=float)
        self.types = tuple(types)
        self.cutoffs = [np.asarray(c, dtype=float).reshape(self.times.size, vt.n_cutoffs)
                        for c, vt in zip(cutoffs, self.types)]
        self.transforms = [list(t) for t in transforms]
        T = self.times.size
        self.pooled = [np.zeros(T, bool) for _ in self.types] if pooled is None else [
            np.asarray(p, bool) for p in pooled]

    @property
    def J(self) -> int:
        return len(self.types)

    def index(self, t) -> np.ndarray:
        """Nearest time index for each ``t``."""
        t = np.asarray(t, dtype=float)
        g = self.times
        if g.size == 1:
            return np.zeros(t.shape, dtype=np.int64)
        pos = np.clip(np.searchsorted(g, t), 1, g.size - 1)
        return np.where(t - g[pos - 1] <= g[pos] - t, pos - 1, pos)

    def cutoff(self, j: int, r: int) -> CutoffVector:
        return CutoffVector(j, float(self.times[r]), tuple(self.cutoffs[j][r]))

    def degenerate(self, j: int) -> np.ndarray:
        """Times at which component ``j`` carries no rank information."""
        vt = self.types[j]
        c = self.cutoffs[j]
        if vt.name == "continuous":
            return np.zeros(self.times.size, dtype=bool)
        if vt.name == "truncated":
            return c[:, 0] == np.inf
        return ~np.any(np.isfinite(c), axis=1)

    def to_latent(self, j: int, r, x) -> np.ndarray:
        """Exact latent values for continuous/positive-truncated observations."""
        x = np.asarray(x, dtype=float)
        r = np.broadcast_to(np.asarray(r), x.shape)
        out = np.empty(x.shape)
        for rr in np.unique(r):
            sel = r == rr
            tr = self.transforms[j][rr]
            out[sel] = x[sel] if tr is None else tr(x[sel])
        return out

    def to_observed(self, j: int, r, z) -> np.ndarray:
        """Map latent predictions to the observed scale at time indices ``r``."""
        z = np.asarray(z, dtype=float)
        r = np.broadcast_to(np.asarray(r), z.shape)
        out = np.empty(z.shape)
        for rr in np.unique(r):
            sel = r == rr
            out[sel] = apply_observation_map(z[sel], self.types[j], self.cutoffs[j][rr],
                                             self.transforms[j][rr])
        return out

    def to_dict(self) -> dict:
        return {
            "times": self.times.tolist(),
            "types": [vt.to_dict() for vt in self.types],
            "cutoffs": [_encode(c) for c in self.cutoffs],
            "pooled": [p.tolist() for p in self.pooled],
            "transforms": [[None if tr is None else tr.to_dict() for tr in row] for row in self.transforms],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MarginalModel":
        types = [VariableType.from_dict(t) for t in d["types"]]
        return cls(d["times"], types, [_decode(c) for c in d["cutoffs"]],
                   [[None if tr is None else MonotoneTransform.from_dict(tr) for tr in row]
                    for row in d["transforms"]], d["pooled"])


def _encode(a: np.ndarray):
    return [[x if np.isfinite(x) else ("inf" if x > 0 else "-inf") for x in row] for row in a.tolist()]


def _decode(rows):
    return np.array([[float(x) for x in row] for row in rows], dtype=float).reshape(len(rows), -1)


def fit_marginals(data: MixedDataset, times=None, min_count: int = 10,
                  identity: bool = False) -> MarginalModel:
    """Estimate cutoffs and transforms at every time of ``times``.

    Parameters
    ----------
    data : MixedDataset
    times : ndarray, optional
        Evaluation times; observations snap to the nearest one.  Defaults to
        the pooled observation times.
    min_count : int
        Times with fewer observations of a component use the estimate pooled
        over all times of that component.
    identity : bool
        Use identity transforms instead of the empirical normal scores.
    """
    times = data.pooled_times if times is None else np.asarray(times, dtype=float)
    idx = data.time_index(None if times is data.pooled_times else times)
    cutoffs, transforms, pooled = [], [], []
    for j, vt in enumerate(data.types):
        sel = data.component == j
        xj, rj = data.value[sel], idx[sel]
        if xj.size == 0:
            raise ValueError(f"component {j + 1} has no observations")
        T = times.size
        cut = np.zeros((T, vt.n_cutoffs))
        trs: list = [None] * T
        pool = np.zeros(T, dtype=bool)
        pooled_cut = estimate_cutoffs(xj, vt, j).as_array() if vt.n_cutoffs else None
        pooled_tr = None
        if vt.name in ("continuous", "truncated") and not identity:
            pooled_tr = estimate_transform(xj, vt)
        for r in range(T):
            xr = xj[rj == r]
            small = xr.size < min_count
            if vt.n_cutoffs:
                cut[r] = pooled_cut if small else estimate_cutoffs(xr, vt, j).as_array()
            if pooled_tr is not None:
                if small:
                    trs[r] = pooled_tr
                else:
                    try:
                        trs[r] = estimate_transform(xr, vt)
                    except ValueError:
                        trs[r] = pooled_tr
                        small = True
            pool[r] = small
        cutoffs.append(cut)
        transforms.append(trs)
        pooled.append(pool)
    return MarginalModel(times, data.types, cutoffs, transforms, pooled)
