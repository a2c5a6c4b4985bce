"""Latent Gaussian prediction (BLUP) from mixed-type observations.

Every observed value pins its latent coordinate either to an exact value
(continuous, positive truncated) or to an interval (binary, ordinal, zero
truncated).  The conditional mean of the joint latent vector on the grid is
computed in closed form when a subject has only exact constraints, and by a
Rao-Blackwellized Gibbs sampler otherwise.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, special

from .data_model import MixedDataset, VariableType

__all__ = [
    "SamplerSettings",
    "Constraint",
    "LatentPrediction",
    "CurvePrediction",
    "interval_constraints",
    "grid_constraints",
    "conditional_mean",
    "predict_latent",
    "predict_curves",
    "write_predictions",
]

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class SamplerSettings:
    seed: int = 0
    burn_in: int = 100
    draws: int = 400
    split_tol: float = 0.05


@dataclass(frozen=True)
class Constraint:
    """Latent constraint implied by one observation: ``lo <= z <= hi``; ``exact`` if ``lo == hi``."""

    lo: float
    hi: float

    @property
    def exact(self) -> bool:
        return self.lo == self.hi


def interval_constraints(value: float, vtype: VariableType, cutoffs=(), transform=None) -> Constraint:
    """Latent value or interval consistent with an observed ``value``.

    Boundary inclusion is immaterial for a continuous latent law, so intervals
    are returned closed.
    """
    th = np.asarray(getattr(cutoffs, "thresholds", cutoffs), dtype=float).ravel()
    if not vtype.valid([value])[0]:
        raise ValueError(f"value {value!r} inconsistent with {vtype.name} type")
    if th.size != vtype.n_cutoffs:
        raise ValueError(f"{vtype.name} variables need {vtype.n_cutoffs} cutoffs")
    if vtype.name == "continuous":
        z = float(value if transform is None else transform(value))
        return Constraint(z, z)
    if vtype.name == "truncated":
        if value > 0:
            z = float(value if transform is None else transform(value))
            return Constraint(z, z)
        return Constraint(-np.inf, float(th[0]))
    ext = np.concatenate([[-np.inf], th, [np.inf]])
    k = int(value)
    return Constraint(float(ext[k]), float(ext[k + 1]))


def grid_constraints(data: MixedDataset, marginals, grid) -> tuple[np.ndarray, np.ndarray]:
    """Constraint bounds ``lo, hi`` of shape ``(n, J * m)`` on ``grid``.

    Observations snap to the nearest grid point (closest one kept per cell).
    Unobserved coordinates get ``(-inf, inf)``; exact ones have ``lo == hi``.
    """
    grid = np.asarray(grid, dtype=float)
    dense = data.dense(grid)
    n, J, m = dense.shape
    lo = np.full((n, J, m), -np.inf)
    hi = np.full((n, J, m), np.inf)
    ridx = marginals.index(grid)
    for j, vt in enumerate(data.types):
        for r in range(m):
            x = dense[:, j, r]
            obs = ~np.isnan(x)
            if not obs.any():
                continue
            cut = marginals.cutoffs[j][ridx[r]]
            tr = marginals.transforms[j][ridx[r]]
            xo = x[obs]
            l = np.full(xo.shape, -np.inf)
            h = np.full(xo.shape, np.inf)
            if vt.name == "continuous":
                l = h = xo if tr is None else tr(xo)
            elif vt.name == "truncated":
                pos = xo > 0
                zpos = xo if tr is None else tr(xo)
                l = np.where(pos, zpos, -np.inf)
                h = np.where(pos, zpos, cut[0])
            else:
                ext = np.concatenate([[-np.inf], cut, [np.inf]])
                k = xo.astype(int)
                l, h = ext[k], ext[k + 1]
            lo[obs, j, r] = l
            hi[obs, j, r] = h
    return lo.reshape(n, J * m), hi.reshape(n, J * m)


# --------------------------------------------------------------------------
# truncated standard normal helpers

def _tn_stats(a, b, u):
    """Draw and mean of a standard normal truncated to ``[a, b]``.

    Works in the orientation where the interval leans to the upper tail so
    that survival probabilities keep their relative precision.  ``u`` are
    uniforms.  Unbounded intervals need no special casing.
    """
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        upper = ~(a + b < 0)
        aa = np.where(upper, a, -b)
        bb = np.where(upper, b, -a)
        pa = special.ndtr(-aa)
        pb = special.ndtr(-bb)
        Z = pa - pb
        mean = (np.exp(-0.5 * aa * aa) - np.exp(-0.5 * bb * bb)) * _INV_SQRT_2PI / Z
        x = -special.ndtri(pb + u * Z)
        bad = ~(Z > 1e-300)
        if bad.any():
            # interval deep in the tail: exponential approximation at the near bound
            mean = np.where(bad, aa + 1.0 / np.maximum(aa, 1.0), mean)
            x = np.where(bad, aa - np.log1p(-u) / np.maximum(aa, 1.0), x)
        x = np.minimum(np.maximum(x, aa), bb)
        mean = np.minimum(np.maximum(mean, aa), bb)
    return np.where(upper, x, -x), np.where(upper, mean, -mean)


def _tn_mean(a, b):
    a, b = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
    return _tn_stats(a, b, np.full(a.shape, 0.5))[1]


# --------------------------------------------------------------------------

def _closed_form(C, lo, exact, out):
    """Gaussian conditional mean for rows with only exact or free coordinates."""
    for i in range(lo.shape[0]):
        e = exact[i]
        if not e.any():
            out[i] = 0.0
            continue
        v = lo[i, e]
        out[i, e] = v
        u = ~e
        if u.any():
            cho = linalg.cho_factor(C[np.ix_(e, e)], lower=True)
            out[i, u] = C[np.ix_(u, e)] @ linalg.cho_solve(cho, v)


def conditional_mean(C, lo, hi, settings: SamplerSettings = SamplerSettings()):
    """Conditional mean of ``N(0, C)`` given box constraints, per subject.

    Parameters
    ----------
    C : ndarray, shape (D, D) or (M, D, D)
        Positive definite correlation matrices; a leading axis evaluates
        several models on the same constraints in one sampler run.
    lo, hi : ndarray, shape (n, D)
        Bounds; ``lo == hi`` marks exact coordinates.

    Returns
    -------
    mean : ndarray, shape (n, D) or (M, n, D)
    sampled : ndarray of bool, shape (n,)
        Subjects that required the sampler.
    split : ndarray, shape (n,) or (M, n)
        Largest disagreement between the two halves of the retained sweeps.
    """
    C = np.asarray(C, dtype=float)
    single = C.ndim == 2
    Cs = C[None] if single else C
    M, D, _ = Cs.shape
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    n = lo.shape[0]
    if lo.shape != (n, D) or hi.shape != (n, D):
        raise ValueError("constraint arrays must have shape (n, D)")
    if np.any(lo > hi):
        raise ValueError("empty constraint interval")
    exact = lo == hi
    interval = ~exact & (np.isfinite(lo) | np.isfinite(hi))
    sampled = interval.any(axis=1)

    mean = np.zeros((M, n, D))
    split = np.zeros((M, n))
    for mdl in range(M):
        sub = np.zeros(((~sampled).sum(), D))
        _closed_form(Cs[mdl], lo[~sampled], exact[~sampled], sub)
        mean[mdl, ~sampled] = sub
    if sampled.any():
        Q = np.linalg.inv(Cs)
        Q = 0.5 * (Q + np.swapaxes(Q, 1, 2))
        gm, gs = _gibbs(Q, Cs, lo[sampled], hi[sampled], exact[sampled], settings)
        mean[:, sampled] = gm
        split[:, sampled] = gs
    if single:
        return mean[0], sampled, split[0]
    return mean, sampled, split


def _gibbs(Q, C, lo, hi, exact, settings):
    M, D, _ = Q.shape
    n = lo.shape[0]
    rng = np.random.default_rng(settings.seed)
    # start from the Gaussian conditional mean given exact values, pushed into the box
    z = np.empty((M, n, D))
    for mdl in range(M):
        _closed_form(C[mdl], lo, exact, z[mdl])
    z = np.clip(z, lo, hi)
    z = np.where(np.isfinite(z), z, np.where(np.isfinite(lo), lo, hi))
    # coordinate-major layout keeps the per-coordinate slices contiguous
    zt = np.ascontiguousarray(z.transpose(2, 0, 1))
    rt = np.ascontiguousarray(np.einsum("mnd,mde->emn", z, Q))
    Qt = np.ascontiguousarray(Q.transpose(1, 2, 0))[:, :, :, None]
    qdiag = np.einsum("mdd->dm", Q)[:, :, None]
    sd = 1.0 / np.sqrt(qdiag)
    coords = np.flatnonzero(~exact.all(axis=0))
    act = np.ascontiguousarray((~exact).T)
    lot = np.ascontiguousarray(lo.T)
    hit = np.ascontiguousarray(hi.T)
    half = settings.draws // 2
    acc = np.zeros((2, D, M, n))
    total = settings.burn_in + settings.draws
    for sweep in range(total):
        u = rng.random((coords.size, M, n))
        keep = sweep >= settings.burn_in
        slot = 0 if sweep - settings.burn_in < half else 1
        for c, d in enumerate(coords):
            zd = zt[d]
            s = sd[d]
            mu = zd - rt[d] * (s * s)
            x, xm = _tn_stats((lot[d] - mu) / s, (hit[d] - mu) / s, u[c])
            if keep:
                acc[slot, d] += mu + s * xm
            delta = np.where(act[d], mu + s * x - zd, 0.0)
            zd += delta
            rt += Qt[d] * delta
    acc = np.where(act[:, None, :], acc, 0.0).transpose(0, 2, 3, 1)
    n1 = half
    n2 = settings.draws - half
    m1 = np.where(exact, lo, acc[0] / max(n1, 1))
    m2 = np.where(exact, lo, acc[1] / max(n2, 1))
    mean = np.where(exact, lo, (acc[0] + acc[1]) / settings.draws)
    gap = np.abs(m1 - m2).max(axis=2) if n1 and n2 else np.zeros((M, n))
    return mean, gap


@dataclass(eq=False)
class LatentPrediction:
    """Predicted latent trajectories ``values[i, j, r]`` on ``grid``."""

    subject_ids: tuple
    grid: np.ndarray
    values: np.ndarray
    sampled: np.ndarray
    settings: SamplerSettings
    split: np.ndarray = field(default=None)
    warnings: list = field(default_factory=list)

    @property
    def method(self) -> list:
        return ["sampler" if s else "deterministic" for s in self.sampled]

    def stacked(self) -> np.ndarray:
        return self.values.reshape(self.values.shape[0], -1)


def predict_latent(data: MixedDataset, model, marginals, settings: SamplerSettings = SamplerSettings(),
                   components=None) -> LatentPrediction:
    """Conditional mean of the latent vectors on the model grid.

    Parameters
    ----------
    data : MixedDataset
    model
        Object exposing ``grid`` and the projected matrix ``C_pd`` ordered
        component-major (``j * m + r``).
    marginals : MarginalModel
    settings : SamplerSettings
    components : sequence of int, optional
        Restrict to a subset of components (``C_pd`` must then be the
        matching sub-matrix).
    """
    grid = np.asarray(model.grid, dtype=float)
    m = grid.size
    lo, hi = grid_constraints(data, marginals, grid)
    J = data.J
    comps = list(range(J)) if components is None else list(components)
    cols = np.concatenate([np.arange(j * m, (j + 1) * m) for j in comps])
    lo, hi = lo[:, cols], hi[:, cols]
    keep = np.isfinite(lo).any(axis=1) | np.isfinite(hi).any(axis=1)
    if not keep.any():
        raise ValueError("no observations to condition on")
    C = np.asarray(model.C_pd, dtype=float)
    if C.shape != (cols.size, cols.size):
        raise ValueError("model matrix does not match the requested components")
    mean, sampled, split = conditional_mean(C, lo, hi, settings)
    pred = LatentPrediction(data.subject_ids, grid, mean.reshape(data.n, len(comps), m), sampled,
                            settings, split)
    bad = np.flatnonzero(split > settings.split_tol)
    if bad.size:
        msg = (f"sampler halves disagree by more than {settings.split_tol} for "
               f"{bad.size} of {data.n} subjects (max {split.max():.3g})")
        pred.warnings.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return pred


@dataclass(eq=False)
class CurvePrediction:
    """Predictions at new times for one subject.

    ``latent[j]``, ``sd[j]`` and ``observed[j]`` are arrays aligned with
    ``times[j]``; ``cov`` is the joint conditional covariance of all new
    points in component-major order.
    """

    subject_id: str
    times: list
    latent: list
    sd: list
    observed: list
    cov: np.ndarray


def _nearest_project(A, eps):
    A = 0.5 * (A + A.T)
    w, V = np.linalg.eigh(A)
    return (V * np.maximum(w, eps)) @ V.T


def predict_curves(data: MixedDataset, subject, new_times, model, marginals,
                   prediction: LatentPrediction | None = None,
                   settings: SamplerSettings = SamplerSettings()) -> CurvePrediction:
    """Multivariate BLUP of one subject's latent curves at arbitrary times.

    Uses ``V^N = C^{N,O} (C^{O,O})^{-1} V^O`` with ``V^O`` the latent
    prediction at the subject's observed grid coordinates.  The joint
    correlation of new and observed points is evaluated from the fitted
    surfaces and projected with the model's eigenvalue floor; points that
    coincide with an observed grid coordinate share it.
    """
    sid = str(subject) if not isinstance(subject, (int, np.integer)) else data.subject_ids[subject]
    i = data.subject_ids.index(sid)
    grid = np.asarray(model.grid, dtype=float)
    m = grid.size
    if prediction is None:
        sub = _subset(data, i)
        prediction = predict_latent(sub, model, marginals, settings)
        vhat = prediction.values[0]
    else:
        vhat = prediction.values[i]
    lo, hi = grid_constraints(_subset(data, i), marginals, grid)
    observed = (np.isfinite(lo[0]) | np.isfinite(hi[0])).reshape(data.J, m)
    new = [np.asarray(t, dtype=float) for t in new_times]
    if len(new) != data.J:
        raise ValueError("new_times needs one time list per component")
    for t in new:
        if np.any((t < 0) | (t > 1)):
            raise ValueError("new times must lie in [0, 1]")
    # union of observed grid points and new points, per component
    pts_c, pts_t = [], []
    for j in range(data.J):
        for r in np.flatnonzero(observed[j]):
            pts_c.append(j)
            pts_t.append(grid[r])
    n_obs = len(pts_c)
    new_idx = []
    lookup = {(c, t): k for k, (c, t) in enumerate(zip(pts_c, pts_t))}
    for j, tj in enumerate(new):
        idx = []
        for t in tj:
            key = (j, float(t))
            if key not in lookup:
                lookup[key] = len(pts_c)
                pts_c.append(j)
                pts_t.append(float(t))
            idx.append(lookup[key])
        new_idx.append(np.asarray(idx, dtype=int))
    pc = np.asarray(pts_c)
    pt = np.asarray(pts_t)
    A = np.empty((pc.size, pc.size))
    for a in range(data.J):
        for b in range(data.J):
            ia, ib = np.flatnonzero(pc == a), np.flatnonzero(pc == b)
            if ia.size and ib.size:
                A[np.ix_(ia, ib)] = model.evaluate_pairs(a, b, pt[ia], pt[ib])
    np.fill_diagonal(A, 1.0)
    A = _nearest_project(A, model.eps)
    O = np.arange(n_obs)
    v_obs = np.array([vhat[c, np.searchsorted(grid, t)] for c, t in zip(pts_c[:n_obs], pts_t[:n_obs])])
    all_new = np.concatenate(new_idx) if new_idx else np.zeros(0, int)
    if n_obs:
        cho = linalg.cho_factor(A[np.ix_(O, O)], lower=True)
        CNO = A[np.ix_(all_new, O)]
        mean = CNO @ linalg.cho_solve(cho, v_obs)
        cov = A[np.ix_(all_new, all_new)] - CNO @ linalg.cho_solve(cho, CNO.T)
    else:
        mean = np.zeros(all_new.size)
        cov = A[np.ix_(all_new, all_new)].copy()
    cov = 0.5 * (cov + cov.T)
    sd = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    latent, sds, obs = [], [], []
    start = 0
    for j, tj in enumerate(new):
        sl = slice(start, start + tj.size)
        start += tj.size
        latent.append(mean[sl])
        sds.append(sd[sl])
        obs.append(marginals.to_observed(j, marginals.index(tj), mean[sl]))
    return CurvePrediction(sid, new, latent, sds, obs, cov)


def _subset(data: MixedDataset, i: int) -> MixedDataset:
    sel = data.subject == i
    return MixedDataset((data.subject_ids[i],), data.types, np.zeros(sel.sum(), dtype=np.int64),
                        data.component[sel], data.time[sel], data.value[sel], data.names)


def write_predictions(path, predictions, names=None) -> None:
    """CSV with subject_id, component, time, latent_mean, latent_sd, observed_prediction."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "component", "time", "latent_mean", "latent_sd", "observed_prediction"])
        for p in predictions:
            for j, tj in enumerate(p.times):
                comp = names[j] if names else j + 1
                for t, mu, s, x in zip(tj, p.latent[j], p.sd[j], p.observed[j]):
                    w.writerow([p.subject_id, comp, repr(float(t)), repr(float(mu)), repr(float(s)),
                                repr(float(x))])
