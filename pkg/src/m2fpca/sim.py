"""Simulation scenarios, the ISE metric and the benchmark harness."""

from __future__ import annotations

import csv
import json
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data_model import MixedDataset, VariableType, regular_grid
from .fpca import n_components, trapezoid_weights
from .marginals import apply_observation_map

__all__ = [
    "SimulationConfig",
    "MaternParams",
    "stationary_params",
    "stationary_cov",
    "stationary_grid_cov",
    "fourier_basis",
    "fourier_weights",
    "random_precision",
    "nonstationary_cov",
    "simulate",
    "ise",
    "naive_covariance",
    "BenchmarkResult",
    "benchmark",
    "METHODS",
]

METHODS = ("m2fpca", "ps_m2fpca", "naive_mfpca")

DEFAULT_TYPES = (
    VariableType.binary(),
    VariableType.ordinal(4),
    VariableType.truncated(),
    VariableType.continuous(),
)
DEFAULT_CUTOFFS = ((0.5,), (-0.6, 0.1, 0.6), (0.5,), ())


@dataclass(frozen=True)
class SimulationConfig:
    """Everything needed to regenerate a synthetic mixed-type dataset.

    ``missing`` drops each observation independently with that probability
    (0 reproduces the complete regular design).
    """

    scenario: str = "stationary"
    n: int = 100
    m: int = 16
    types: tuple = DEFAULT_TYPES
    cutoffs: tuple = DEFAULT_CUTOFFS
    seed: int = 0
    reps: int = 20
    R: float = 0.5
    n_basis: int = 101
    missing: float = 0.0

    def __post_init__(self):
        if self.scenario not in ("stationary", "nonstationary"):
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if len(self.types) != len(self.cutoffs):
            raise ValueError("one cutoff tuple per component required")
        for vt, c in zip(self.types, self.cutoffs):
            if len(c) != vt.n_cutoffs:
                raise ValueError(f"{vt.name} component needs {vt.n_cutoffs} cutoffs")
        if self.n < 2 or self.m < 2 or len(self.types) < 2:
            raise ValueError("need n >= 2, m >= 2 and at least two components")
        if not 0 <= self.missing < 1:
            raise ValueError("missing must be in [0, 1)")

    @property
    def p(self) -> int:
        return len(self.types)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["types"] = [vt.to_dict() for vt in self.types]
        d["cutoffs"] = [list(c) for c in self.cutoffs]
        return d


@dataclass(frozen=True, eq=False)
class MaternParams:
    """Exponential (Matern, nu = 1/2) cross-covariance parameters.

    ``phi[i, j]`` are inverse ranges and ``sigma[i, j]`` the sills.
    """

    phi: np.ndarray
    sigma: np.ndarray
    R: np.ndarray
    nu: float = 0.5


def stationary_params(p: int, seed=None, R: float = 0.5) -> MaternParams:
    """Draw marginal scales as a random permutation of ``linspace(1, 5, p)``.

    ``phi_ij = sqrt((phi_ii^2 + phi_jj^2) / 2)`` and
    ``sigma_ij = R_ij sqrt(phi_ii phi_jj) / phi_ij`` with exchangeable ``R``.
    """
    if p < 2:
        raise ValueError("p must be >= 2")
    rng = np.random.default_rng(seed)
    d = rng.permutation(np.linspace(1.0, 5.0, p))
    Rm = np.full((p, p), float(R))
    np.fill_diagonal(Rm, 1.0)
    phi = np.sqrt((d[:, None] ** 2 + d[None, :] ** 2) / 2.0)
    sigma = Rm * np.sqrt(d[:, None] * d[None, :]) / phi
    params = MaternParams(phi, sigma, Rm)
    C = stationary_grid_cov(params, regular_grid(32))
    if np.linalg.eigvalsh(C)[0] <= 0:
        raise RuntimeError("stationary cross-covariance is not positive definite")
    return params


def stationary_cov(s, t, i: int, j: int, params: MaternParams):
    """``sigma_ij exp(-phi_ij |s - t|)``."""
    return params.sigma[i, j] * np.exp(-params.phi[i, j] * np.abs(np.asarray(s, float) - np.asarray(t, float)))


def stationary_grid_cov(params: MaternParams, grid) -> np.ndarray:
    g = np.asarray(grid, dtype=float)
    p = params.phi.shape[0]
    m = g.size
    h = np.abs(g[:, None] - g[None, :])
    C = params.sigma[:, None, :, None] * np.exp(-params.phi[:, None, :, None] * h[None, :, None, :])
    return C.reshape(p * m, p * m)


def fourier_basis(t, M: int = 101) -> np.ndarray:
    """Orthonormal Fourier system on [0, 1]: 1, then sqrt2 sin / sqrt2 cos pairs.  Shape (M, len(t))."""
    t = np.asarray(t, dtype=float)
    out = np.empty((M, t.size))
    out[0] = 1.0
    for l in range(1, M):
        k = (l + 1) // 2
        out[l] = np.sqrt(2.0) * (np.sin if l % 2 == 1 else np.cos)(2.0 * np.pi * k * t)
    return out


def fourier_weights(M: int = 101) -> np.ndarray:
    """``a_l = 3 l^{-1.8}`` for ``l = 1..M``."""
    return 3.0 * np.arange(1, M + 1, dtype=float) ** -1.8


def random_precision(p: int, rng, floor: float = 0.05, max_tries: int = 100) -> np.ndarray:
    """Dense symmetric precision with unit diagonal and uniform off-diagonals in [-0.5, 0.5].

    If the smallest eigenvalue is below ``floor`` a ridge ``(|min| + floor) I``
    is added; badly conditioned draws are resampled.
    """
    for _ in range(max_tries):
        A = rng.uniform(-0.5, 0.5, size=(p, p))
        O = np.triu(A, 1)
        O = O + O.T + np.eye(p)
        lmin = np.linalg.eigvalsh(O)[0]
        if lmin < floor:
            O = O + (abs(lmin) + floor) * np.eye(p)
        if np.linalg.cond(O) < 1e6:
            return O
    raise RuntimeError("could not draw a well-conditioned precision matrix")


def nonstationary_cov(p: int, seed=None, grid=None, M: int = 101, return_parts: bool = False):
    """Grid covariance ``sum_l a_l (Omega_l^{-1})_{jk} phi_l(s) phi_l(t)`` (component-major).

    Not standardized; :func:`simulate` rescales to unit variance.
    """
    if p < 2:
        raise ValueError("p must be >= 2")
    rng = np.random.default_rng(seed)
    g = regular_grid(16) if grid is None else np.asarray(grid, dtype=float)
    a = fourier_weights(M)
    Sig = np.array([a[l] * np.linalg.inv(random_precision(p, rng)) for l in range(M)])
    B = fourier_basis(g, M)
    C = np.einsum("ljk,ls,lt->jskt", Sig, B, B).reshape(p * g.size, p * g.size)
    C = 0.5 * (C + C.T)
    if return_parts:
        return C, Sig, B
    return C


def _to_correlation(C: np.ndarray) -> np.ndarray:
    d = np.sqrt(np.diag(C))
    out = C / np.outer(d, d)
    np.fill_diagonal(out, 1.0)
    return 0.5 * (out + out.T)


def simulate(config: SimulationConfig, seed=None, return_latent: bool = False):
    """Draw one dataset.

    Returns
    -------
    data : MixedDataset
    C_true : ndarray
        Latent correlation on the grid, ``(p m) x (p m)``.
    info : dict
        Scenario draws (marginal scales for the stationary case).
    """
    seed = config.seed if seed is None else seed
    ss = np.random.SeedSequence(seed)
    s_cov, s_lat, s_miss = ss.spawn(3)
    grid = regular_grid(config.m)
    p = config.p
    info: dict = {}
    if config.scenario == "stationary":
        params = stationary_params(p, s_cov, config.R)
        C = stationary_grid_cov(params, grid)
        info["phi_marginal"] = np.diag(params.phi).tolist()
    else:
        C = nonstationary_cov(p, s_cov, grid, config.n_basis)
    C = _to_correlation(C)
    rng = np.random.default_rng(s_lat)
    L = np.linalg.cholesky(C + 1e-12 * np.eye(C.shape[0]))
    Z = (rng.standard_normal((config.n, C.shape[0])) @ L.T).reshape(config.n, p, config.m)
    X = np.empty_like(Z)
    for j, (vt, cut) in enumerate(zip(config.types, config.cutoffs)):
        X[:, j, :] = apply_observation_map(Z[:, j, :], vt, np.asarray(cut, float))
    if config.missing > 0:
        drop = np.random.default_rng(s_miss).random(X.shape) < config.missing
        X[drop] = np.nan
    data = MixedDataset.from_dense(X, grid, config.types, names=[f"X{j + 1}" for j in range(p)])
    if return_latent:
        info["latent"] = Z
    return data, C, info


def ise(C_true, C_hat, grid=None, J: int | None = None) -> dict:
    """Integrated squared error per block by 2D trapezoid rule.

    Returns ``{"blocks": (J, J) array, "total": mean over blocks}``.
    """
    A = np.asarray(C_true, dtype=float)
    B = np.asarray(C_hat, dtype=float)
    if A.shape != B.shape or A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("covariance shapes differ")
    if grid is None:
        if J is None:
            raise ValueError("give the grid or the number of components")
        grid = np.linspace(0.0, 1.0, A.shape[0] // J)
    grid = np.asarray(grid, dtype=float)
    m = grid.size
    if A.shape[0] % m:
        raise ValueError("grid size does not divide the matrix dimension")
    J = A.shape[0] // m
    w = trapezoid_weights(grid)
    D = ((A - B) ** 2).reshape(J, m, J, m)
    blocks = np.einsum("jskt,s,t->jk", D, w, w)
    return {"blocks": blocks, "total": float(blocks.mean())}


def naive_covariance(data: MixedDataset, grid=None, var_threshold: float = 0.95,
                     normalize: bool = False) -> np.ndarray:
    """Gaussian MFPCA covariance of the observed values.

    Pairwise-complete empirical covariance of the observed trajectories
    (discrete levels taken as reals), truncated to the leading
    quadrature-weighted eigenpairs.  ``normalize`` rescales the result to a
    correlation.
    """
    g = data.pooled_times if grid is None else np.asarray(grid, dtype=float)
    X = data.dense(None if grid is None else g).reshape(data.n, -1)
    obs = ~np.isnan(X)
    mu = np.nanmean(X, axis=0)
    Xc = np.where(obs, X - mu, 0.0)
    cnt = obs.T.astype(float) @ obs.astype(float)
    S = (Xc.T @ Xc) / np.maximum(cnt - 1.0, 1.0)
    w = np.tile(trapezoid_weights(g), data.J)
    sw = np.sqrt(w)
    lam, U = np.linalg.eigh(sw[:, None] * S * sw[None, :])
    lam, U = np.clip(lam[::-1], 0.0, None), U[:, ::-1]
    L = n_components(lam, var_threshold)
    Phi = U[:, :L] / sw[:, None]
    C = (Phi * lam[:L]) @ Phi.T
    if not normalize:
        return C
    d = np.sqrt(np.clip(np.diag(C), 1e-12, None))
    return C / np.outer(d, d)


@dataclass(eq=False)
class BenchmarkResult:
    config: SimulationConfig
    methods: tuple
    values: dict
    failures: dict
    seeds: list
    draws: list = field(default_factory=list)
    seconds: float = 0.0

    def summary(self) -> list[dict]:
        rows = []
        for mth in self.methods:
            v = np.asarray([x for x in self.values[mth] if x is not None], dtype=float)
            rows.append({
                "scenario": self.config.scenario,
                "n": self.config.n,
                "method": mth,
                "mean_ise": float(v.mean()) if v.size else float("nan"),
                "sd_ise": float(v.std(ddof=1)) if v.size > 1 else float("nan"),
                "n_fail": int(self.failures[mth]),
            })
        return rows

    def mean(self, method: str) -> float:
        v = [x for x in self.values[method] if x is not None]
        return float(np.mean(v)) if v else float("nan")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["scenario", "n", "method", "mean_ise", "sd_ise", "n_fail"])
            w.writeheader()
            for row in self.summary():
                row = dict(row)
                row["mean_ise"] = repr(row["mean_ise"])
                row["sd_ise"] = repr(row["sd_ise"])
                w.writerow(row)

    def to_json(self, path=None) -> str:
        text = json.dumps({
            "config": self.config.to_dict(),
            "methods": list(self.methods),
            "summary": self.summary(),
            "replications": [
                {"rep": r, "seed": self.seeds[r],
                 **{mth: self.values[mth][r] for mth in self.methods},
                 **({"draw": self.draws[r]} if r < len(self.draws) else {})}
                for r in range(len(self.seeds))
            ],
        }, indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def benchmark(config: SimulationConfig, methods: Sequence[str] = METHODS, settings=None,
              progress=None) -> BenchmarkResult:
    """Monte Carlo comparison of covariance estimators by ISE.

    Each replication draws a fresh dataset (and scenario parameters) from a
    replication-indexed seed.  A method that raises in a replication is
    recorded as failed and excluded from the summary.
    """
    from .pipeline import FitSettings, fit_m2fpca, fit_ps_m2fpca, stage_one

    methods = tuple(methods)
    for mth in methods:
        if mth not in METHODS:
            raise ValueError(f"unknown method {mth!r}")
    if config.reps < 1:
        raise ValueError("reps must be >= 1")
    settings = FitSettings(grid_m=config.m) if settings is None else settings
    root = np.random.SeedSequence(config.seed)
    seeds = [int(s.generate_state(1)[0]) for s in root.spawn(config.reps)]
    values = {mth: [] for mth in methods}
    failures = {mth: 0 for mth in methods}
    draws = []
    t0 = time.perf_counter()
    for r, seed in enumerate(seeds):
        data, C_true, info = simulate(config, seed=seed)
        draws.append(info)
        grid = regular_grid(config.m)
        rep_settings = settings.with_seed(seed)
        stage = None
        for mth in methods:
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    if mth == "naive_mfpca":
                        C_hat = naive_covariance(data, grid, settings.var_threshold)
                    else:
                        if stage is None:
                            stage = stage_one(data, rep_settings)
                        if mth == "m2fpca":
                            C_hat = fit_m2fpca(data, rep_settings, stage=stage).model.C_pd
                        else:
                            C_hat = fit_ps_m2fpca(data, rep_settings, stage=stage).correlation()
                values[mth].append(ise(C_true, C_hat, grid)["total"])
            except Exception as exc:  # recorded, not fatal
                warnings.warn(f"replication {r} method {mth} failed: {exc}", RuntimeWarning)
                values[mth].append(None)
                failures[mth] += 1
        if progress is not None:
            progress(r, {mth: values[mth][-1] for mth in methods})
    return BenchmarkResult(config, methods, values, failures, seeds, draws, time.perf_counter() - t0)
