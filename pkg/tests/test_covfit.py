import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from m2fpca.bridge import bridge_tau
from m2fpca.covfit import (
    EPSILON,
    BlockProblem,
    FitConvergenceError,
    LatentCorrelationModel,
    SplineBasis,
    SplineSurface,
    assemble_and_project,
    bic_scores,
    evaluate_block,
    fit_surface,
    link_g,
    link_g_inv,
    project_pd,
    select_K,
)
from m2fpca.data_model import VariableType, regular_grid
from m2fpca.kendall import TauSurface
from m2fpca.latent import SamplerSettings
from m2fpca.marginals import MarginalModel
from oracles import random_correlation

B = VariableType.binary()


def test_link():
    assert link_g(0.0) == 0.0
    assert link_g(50.0) == pytest.approx(1.0)
    assert link_g(1.0) == pytest.approx((np.e - 1) / (np.e + 1), abs=1e-15)
    assert abs(link_g(1.0) - 0.4621) < 1e-4
    with pytest.raises(ValueError):
        link_g_inv(1.0)


@given(st.floats(-30, 30))
def test_link_roundtrip(x):
    # inverting near |y| = 1 amplifies the rounding of y by about cosh(x)
    assert abs(link_g_inv(link_g(x)) - x) <= 1e-12 * max(1.0, abs(x)) + 4e-16 * np.cosh(x)


def test_basis_partition_of_unity():
    x = np.linspace(0, 1, 37)
    for K in (3, 4, 7, 10):
        np.testing.assert_allclose(SplineBasis(K).design(x).sum(axis=1), 1.0, atol=1e-14)


def _tau_surface(values, times, j=0, k=1, N=4950):
    T = times.size
    return TauSurface(j, k, times, np.asarray(values, float), np.full((T, T), N), 10)


def test_constant_surface_recovered():
    times = regular_grid(8)
    tau = np.full((8, 8), 2 / np.pi * np.arcsin(0.4))
    surf = fit_surface(_tau_surface(tau, times), "cc", K=5)
    vals = surf.grid(np.linspace(0, 1, 21))
    assert np.max(np.abs(vals - 0.4)) < 1e-3


def test_zero_surface():
    times = regular_grid(6)
    surf = fit_surface(_tau_surface(np.zeros((6, 6)), times, 0, 0), "cc", K=4)
    assert np.linalg.norm(surf.U) <= 1e-4
    np.testing.assert_array_equal(surf.U, surf.U.T)


def test_noiseless_bridged_recovery_and_monotone_objective():
    rng = np.random.default_rng(8)
    times = regular_grid(10)
    K = 4
    U_true = rng.uniform(-0.8, 0.8, (K, K))
    truth = SplineSurface(0, 1, U_true)
    rho = truth.grid(times)
    cuts = rng.uniform(-0.7, 0.7, (2, 10, 1))
    a, b = np.meshgrid(np.arange(10), np.arange(10), indexing="ij")
    tau = bridge_tau("bb", rho.ravel(), cuts[0][a.ravel()], cuts[1][b.ravel()]).reshape(10, 10)
    mm = MarginalModel(times, (B, B), [cuts[0], cuts[1]], [[None] * 10, [None] * 10])
    surf = fit_surface(_tau_surface(tau, times), "bb", mm, K=K)
    assert np.max(np.abs(surf.grid(times) - rho)) <= 1e-3
    assert np.all(np.diff(surf.history) <= 0)


def test_nonconvergence_carries_best_iterate():
    rng = np.random.default_rng(2)
    times = regular_grid(8)
    tau = np.clip(rng.normal(0, 0.3, (8, 8)), -0.9, 0.9)
    with pytest.raises(FitConvergenceError) as err:
        fit_surface(_tau_surface(tau, times), "cc", K=6, max_iter=1)
    assert isinstance(err.value.best, SplineSurface)
    assert err.value.best.objective <= err.value.best.history[0]


def test_symmetric_block_parametrization():
    times = regular_grid(7)
    rho = 0.6 * np.exp(-np.abs(times[:, None] - times[None, :]))
    surf = fit_surface(_tau_surface(2 / np.pi * np.arcsin(rho), times, 0, 0), "cc", K=5)
    np.testing.assert_array_equal(surf.U, surf.U.T)


def test_evaluate_block_constant():
    U = np.full((4, 4), float(link_g_inv(0.4)))
    blk = evaluate_block(SplineSurface(0, 0, U), regular_grid(3))
    np.testing.assert_allclose(blk, [[1, 0.4, 0.4], [0.4, 1, 0.4], [0.4, 0.4, 1]], atol=1e-14)


def test_cross_block_transpose_and_pointwise():
    rng = np.random.default_rng(1)
    s = SplineSurface(0, 1, rng.normal(0, 0.5, (5, 5)))
    g = regular_grid(16)
    blk = evaluate_block(s, g)
    S, T = np.meshgrid(g, g, indexing="ij")
    np.testing.assert_allclose(blk, s.evaluate(S, T), atol=1e-15)
    swapped = SplineSurface(1, 0, s.U.T)
    np.testing.assert_allclose(evaluate_block(swapped, g), blk.T, atol=1e-15)
    assert np.all(np.abs(blk) < 1)


def test_project_pd_rules():
    rng = np.random.default_rng(3)
    A = random_correlation(6, rng)
    A = A + (0.2 - np.linalg.eigvalsh(A)[0]) * np.eye(6)
    np.testing.assert_allclose(project_pd(A, 1e-3), A, atol=1e-10)
    Q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    lam = np.array([-0.1, 0.5, 1.0, 1.5, 2.0])
    out = project_pd((Q * lam) @ Q.T, 1e-3)
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(out)), np.sort(np.r_[1e-3, lam[1:]]), atol=1e-12)


def test_assemble_and_project():
    rng = np.random.default_rng(4)
    m = 5
    blocks = {(j, k): rng.uniform(-0.9, 0.9, (m, m)) for j in range(3) for k in range(j, 3)}
    model = assemble_and_project(blocks)
    assert model.eps == EPSILON
    assert model.min_eigenvalue() >= EPSILON - 1e-12
    np.testing.assert_array_equal(model.block(1, 0, projected=False), model.block(0, 1, projected=False).T)
    blocks[(1, 2)] = np.zeros((4, 4))
    with pytest.raises(ValueError, match="dimension mismatch"):
        assemble_and_project(blocks)


def test_model_json_roundtrip():
    rng = np.random.default_rng(5)
    surfaces = {(0, 0): SplineSurface(0, 0, np.eye(4) * 0.3), (0, 1): SplineSurface(0, 1, rng.normal(size=(4, 4)))}
    g = regular_grid(6)
    blocks = {(0, 0): evaluate_block(surfaces[(0, 0)], g), (1, 1): np.eye(6), (0, 1): evaluate_block(surfaces[(0, 1)], g)}
    model = assemble_and_project(blocks, 1e-3, g, surfaces)
    back = LatentCorrelationModel.from_json(model.to_json())
    np.testing.assert_array_equal(back.C_pd, model.C_pd)
    np.testing.assert_array_equal(back.surfaces[(0, 1)].U, surfaces[(0, 1)].U)
    assert back.to_json() == model.to_json()
    assert back.K == {(0, 0): 4, (0, 1): 4}


def test_bic_formula_on_exact_data():
    rng = np.random.default_rng(6)
    D, n = 5, 100
    C = random_correlation(D, rng)
    V = rng.multivariate_normal(np.zeros(D), C, size=n)
    scores = bic_scores(np.array([C, C]), V, V, [4, 5], n, SamplerSettings())
    _, logdet = np.linalg.slogdet(C)
    quad = np.einsum("id,de,ie->", V, np.linalg.inv(C), V)
    assert scores[1] == pytest.approx(n * logdet + quad + 15 * np.log(100), rel=1e-10)
    assert 15 * np.log(100) == pytest.approx(69.078, abs=1e-3)
    assert scores[1] - scores[0] == pytest.approx(5 * np.log(100), rel=1e-9)


def test_select_K_prefers_smaller_on_ties():
    times = regular_grid(6)
    tau = np.full((6, 6), 2 / np.pi * np.arcsin(0.3))
    np.fill_diagonal(tau, 1.0)
    prob = BlockProblem(_tau_surface(tau, times, 0, 0), "cc", include_diagonal=False)
    V = np.random.default_rng(0).normal(size=(50, 6))
    K, surf, scores = select_K(prob, [4, 5, 6], times, V, V, 50)
    assert K == 4
    assert scores[4] < scores[5] < scores[6]
