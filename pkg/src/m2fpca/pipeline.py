"""End-to-end estimation: full multivariate and partially separable pipelines."""

from __future__ import annotations

import warnings
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .bridge import PairKind
from .covfit import (
    EPSILON,
    K_CANDIDATES,
    BlockProblem,
    LatentCorrelationModel,
    assemble_and_project,
    evaluate_block,
    project_pd,
    select_K,
)
from .data_model import MixedDataset, regular_grid
from .fpca import EigenSystem, mfpca_full, ps_decompose, ps_pool
from .kendall import DEFAULT_C0, tau_surfaces
from .latent import LatentPrediction, SamplerSettings, conditional_mean, grid_constraints, predict_latent
from .marginals import MarginalModel, fit_marginals

__all__ = ["FitSettings", "StageOne", "M2Result", "PSResult", "stage_one", "fit_m2fpca", "fit_ps_m2fpca"]


@dataclass(frozen=True)
class FitSettings:
    """Tuning parameters shared by both pipelines."""

    grid_m: int = 16
    c0: int = DEFAULT_C0
    eps: float = EPSILON
    k_candidates: tuple = K_CANDIDATES
    var_threshold: float = 0.95
    seed: int = 0
    burn_in: int = 100
    draws: int = 400
    include_diagonal: bool = False
    min_count: int = 10
    gtol: float = 1e-8
    max_iter: int = 500

    def substream(self, name: str) -> int:
        """Seed of a named random substream derived from the root seed."""
        ss = np.random.SeedSequence([int(self.seed) % (2 ** 63), zlib.crc32(name.encode())])
        return int(ss.generate_state(1)[0])

    def sampler(self, name: str = "sampler") -> SamplerSettings:
        return SamplerSettings(self.substream(name), self.burn_in, self.draws)

    def with_seed(self, seed: int) -> "FitSettings":
        return replace(self, seed=int(seed))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["k_candidates"] = list(self.k_candidates)
        return d

    @property
    def fit_kw(self) -> dict:
        return {"gtol": self.gtol, "max_iter": self.max_iter}


@dataclass(eq=False)
class StageOne:
    """Marginal estimation shared by both pipelines."""

    grid: np.ndarray
    marginals: MarginalModel
    taus: dict
    problems: dict
    surfaces: dict
    blocks: dict
    lo: np.ndarray
    hi: np.ndarray
    bic: dict = field(default_factory=dict)


def _problem(data, taus, marginals, j, k, settings):
    kind = PairKind.of(data.types[j], data.types[k])
    return BlockProblem(taus[(j, k)], kind, marginals, settings.include_diagonal)


def stage_one(data: MixedDataset, settings: FitSettings = FitSettings()) -> StageOne:
    """Marginal cutoffs/transforms, all tau surfaces and the marginal surface fits."""
    grid = regular_grid(settings.grid_m)
    marginals = fit_marginals(data, min_count=settings.min_count)
    taus = tau_surfaces(data, settings.c0)
    lo, hi = grid_constraints(data, marginals, grid)
    m = grid.size
    problems, surfaces, blocks, bic = {}, {}, {}, {}
    for j in range(data.J):
        prob = _problem(data, taus, marginals, j, j, settings)
        cols = slice(j * m, (j + 1) * m)
        K, surf, scores = select_K(prob, settings.k_candidates, grid, lo[:, cols], hi[:, cols], data.n,
                                   eps=settings.eps, settings=settings.sampler(f"bic-{j}-{j}"),
                                   fit_kw=settings.fit_kw)
        problems[(j, j)] = prob
        surfaces[(j, j)] = surf
        blocks[(j, j)] = evaluate_block(surf, grid)
        bic[(j, j)] = scores
    return StageOne(grid, marginals, taus, problems, surfaces, blocks, lo, hi, bic)


@dataclass(eq=False)
class M2Result:
    stage: StageOne
    model: LatentCorrelationModel
    latent: LatentPrediction | None
    eigen: EigenSystem | None
    settings: FitSettings

    @property
    def marginals(self) -> MarginalModel:
        return self.stage.marginals


def fit_m2fpca(data: MixedDataset, settings: FitSettings = FitSettings(), stage: StageOne | None = None,
               decompose: bool = True) -> M2Result:
    """Block-wise latent correlation estimation followed by multivariate FPCA."""
    stage = stage_one(data, settings) if stage is None else stage
    grid = stage.grid
    m = grid.size
    surfaces = dict(stage.surfaces)
    blocks = dict(stage.blocks)
    for j in range(data.J):
        for k in range(j + 1, data.J):
            prob = _problem(data, stage.taus, stage.marginals, j, k, settings)
            cols = np.r_[j * m:(j + 1) * m, k * m:(k + 1) * m]
            K, surf, scores = select_K(prob, settings.k_candidates, grid, stage.lo[:, cols], stage.hi[:, cols],
                                       data.n, (blocks[(j, j)], blocks[(k, k)]), settings.eps,
                                       settings.sampler(f"bic-{j}-{k}"), settings.fit_kw)
            stage.problems[(j, k)] = prob
            stage.bic[(j, k)] = scores
            surfaces[(j, k)] = surf
            blocks[(j, k)] = evaluate_block(surf, grid)
    model = assemble_and_project(blocks, settings.eps, grid, surfaces)
    latent = eigen = None
    if decompose:
        latent = predict_latent(data, model, stage.marginals, settings.sampler("latent"))
        eigen = mfpca_full(latent, settings.var_threshold)
    return M2Result(stage, model, latent, eigen, settings)


@dataclass(eq=False)
class PSResult:
    stage: StageOne
    marginal_pd: list
    latent: LatentPrediction
    eigen: EigenSystem
    settings: FitSettings

    @property
    def H(self) -> np.ndarray:
        return self.eigen.H

    def correlation(self) -> np.ndarray:
        """Covariance implied by the shared eigenfunctions and score covariances, rescaled to correlation."""
        C = self.eigen.covariance()
        d = np.sqrt(np.clip(np.diag(C), 1e-12, None))
        return C / np.outer(d, d)


def fit_ps_m2fpca(data: MixedDataset, settings: FitSettings = FitSettings(),
                  stage: StageOne | None = None, L: int | None = None) -> PSResult:
    """Univariate latent predictions per component, then the partially separable decomposition."""
    stage = stage_one(data, settings) if stage is None else stage
    grid = stage.grid
    m = grid.size
    values = np.zeros((data.n, data.J, m))
    sampled = np.zeros(data.n, dtype=bool)
    marginal_pd = []
    for j in range(data.J):
        Cj = project_pd(stage.blocks[(j, j)], settings.eps)
        marginal_pd.append(Cj)
        cols = slice(j * m, (j + 1) * m)
        mean, smp, _ = conditional_mean(Cj, stage.lo[:, cols], stage.hi[:, cols], settings.sampler(f"ps-{j}"))
        values[:, j] = mean
        sampled |= smp
    latent = LatentPrediction(data.subject_ids, grid, values, sampled, settings.sampler("ps"))
    H = ps_pool([stage.blocks[(j, j)] for j in range(data.J)])
    eigen = ps_decompose(latent, H, L, settings.var_threshold)
    return PSResult(stage, marginal_pd, latent, eigen, settings)
