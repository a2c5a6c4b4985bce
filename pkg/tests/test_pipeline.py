import warnings

import numpy as np
import pytest

from m2fpca.data_model import VariableType
from m2fpca.pipeline import FitSettings, fit_m2fpca, fit_ps_m2fpca, stage_one
from m2fpca.sim import SimulationConfig, ise, simulate

FAST = FitSettings(grid_m=6, k_candidates=(4, 5), burn_in=20, draws=60, seed=7)


@pytest.fixture(scope="module")
def gaussian():
    cfg = SimulationConfig(n=300, m=6, types=(VariableType.continuous(),) * 2, cutoffs=((), ()))
    return simulate(cfg, seed=11)


@pytest.fixture(scope="module")
def mixed():
    return simulate(SimulationConfig(n=40, m=6), seed=2)


def test_gaussian_recovery(gaussian):
    data, C, _ = gaussian
    res = fit_m2fpca(data, FAST)
    assert not res.latent.sampled.any()
    assert ise(C, res.model.C_pd, res.stage.grid)["total"] < 0.01
    assert res.model.min_eigenvalue() >= FAST.eps - 1e-12
    assert np.max(np.abs(res.eigen.gram() - np.eye(res.eigen.L))) <= 1e-8


def test_stage_one_shared(mixed):
    data, _, _ = mixed
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        stage = stage_one(data, FAST)
        full = fit_m2fpca(data, FAST, stage=stage)
        ps = fit_ps_m2fpca(data, FAST, stage=stage)
    J, m = data.J, FAST.grid_m
    assert set(full.model.surfaces) == {(j, k) for j in range(J) for k in range(j, J)}
    for j in range(J):
        np.testing.assert_array_equal(full.model.block(j, j, projected=False), stage.blocks[(j, j)])
    R = ps.correlation()
    assert R.shape == (J * m, J * m)
    np.testing.assert_allclose(np.diag(R), 1.0)
    assert ps.eigen.flavor == "partially_separable"
    np.testing.assert_allclose(ps.H, np.mean([stage.blocks[(j, j)] for j in range(J)], axis=0), atol=1e-15)


def test_fit_is_deterministic(mixed):
    data, _, _ = mixed
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        a = fit_m2fpca(data, FAST)
        b = fit_m2fpca(data, FAST)
    assert a.model.to_json() == b.model.to_json()
    np.testing.assert_array_equal(a.eigen.scores, b.eigen.scores)


def test_settings_substreams_differ():
    s = FitSettings(seed=1)
    assert s.substream("a") != s.substream("b")
    assert s.substream("a") == FitSettings(seed=1).substream("a")
    assert s.with_seed(2).substream("a") != s.substream("a")
