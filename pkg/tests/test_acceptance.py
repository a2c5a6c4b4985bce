"""Acceptance criteria at their stated tolerances.

Each test prints one ``criterion N: PASS|FAIL`` line; the lines are repeated
in the terminal summary.  Criteria 1, 2 and 9 run full simulation studies and
take most of the suite's runtime.
"""

import json
import warnings

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from m2fpca.bridge import KINDS, PairKind, bridge_forward, bridge_inverse
from m2fpca.cli import EXIT_OK, main
from m2fpca.covfit import assemble_and_project
from m2fpca.data_model import MixedDataset, VariableType, regular_grid
from m2fpca.fpca import mfpca_full, trapezoid_weights
from m2fpca.latent import predict_latent
from m2fpca.marginals import MarginalModel
from m2fpca.mvn import bvn_cdf, mvn_cdf
from m2fpca.pipeline import FitSettings, fit_m2fpca, fit_ps_m2fpca, stage_one
from m2fpca.sim import SimulationConfig, benchmark, simulate
from oracles import conditional_mean, mc_orthant, mc_tau, random_correlation, random_cuts

RESULTS = []


def _report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def _run_benchmark(scenario):
    cfg = SimulationConfig(scenario=scenario, n=100, m=16, reps=20, seed=2024)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = benchmark(cfg, settings=FitSettings(grid_m=16))
    print(res.to_json())
    return res


@pytest.fixture(scope="module")
def stationary_bench():
    return _run_benchmark("stationary")


@pytest.fixture(scope="module")
def nonstationary_bench():
    return _run_benchmark("nonstationary")


def _means(res):
    return {m: res.mean(m) for m in res.methods}


@pytest.mark.slow
def test_criterion_1_stationary(stationary_bench):
    mu = _means(stationary_bench)
    m2, naive = mu["m2fpca"], mu["naive_mfpca"]
    ok = 0.005 <= m2 <= 0.025 and naive / m2 >= 2
    _report(1, ok, f"ISE m2fpca={m2:.5f} naive={naive:.5f} ratio={naive / m2:.2f} "
                   f"(ps={mu['ps_m2fpca']:.5f}; need m2 in [0.005, 0.025], ratio >= 2)")


@pytest.mark.slow
def test_criterion_2_nonstationary(nonstationary_bench):
    mu = _means(nonstationary_bench)
    m2, ps, naive = mu["m2fpca"], mu["ps_m2fpca"], mu["naive_mfpca"]
    close = abs(m2 - ps) <= 0.5 * max(m2, ps)
    small = max(m2, ps) <= naive / 5
    _report(2, close and small, f"ISE m2fpca={m2:.5f} ps={ps:.5f} naive={naive:.5f} "
                                f"|diff|/max={abs(m2 - ps) / max(m2, ps):.2f} naive/max={naive / max(m2, ps):.2f} "
                                f"(need |diff|/max <= 0.5, naive/max >= 5)")


def test_criterion_3_bridge_monte_carlo():
    rng = np.random.default_rng(20240301)
    worst, fails, recheck = 0.0, [], []
    for kind in KINDS:
        roles = PairKind(kind).roles
        for _ in range(25):
            rho = rng.uniform(-0.9, 0.9)
            cj, ck = random_cuts(roles[0], rng), random_cuts(roles[1], rng)
            tau, se = mc_tau(roles, rho, cj, ck, 1_000_000, rng)
            z = abs(bridge_forward(rho, kind, cj, ck) - tau) / se
            worst = max(worst, z)
            if z > 3:
                fails.append(f"{kind}:{z:.2f}")
                # informational only: a 40x larger oracle run separates noise from bias
                tau, se = mc_tau(roles, rho, cj, ck, 40_000_000, np.random.default_rng(len(fails)))
                recheck.append(f"{kind}:{abs(bridge_forward(rho, kind, cj, ck) - tau) / se:.2f}")
    _report(3, not fails, f"250 settings, worst |F - tau_mc| / se = {worst:.2f}, over 3: {fails or 'none'}"
                          + (f"; same settings at 4e7 pairs: {recheck}" if recheck else ""))


def test_criterion_4_bridge_roundtrip():
    rng = np.random.default_rng(4)
    worst = 0.0
    for kind in KINDS:
        roles = PairKind(kind).roles
        for _ in range(50):
            rho = rng.uniform(-0.95, 0.95)
            cj, ck = random_cuts(roles[0], rng), random_cuts(roles[1], rng)
            worst = max(worst, abs(bridge_inverse(bridge_forward(rho, kind, cj, ck), kind, cj, ck) - rho))
    _report(4, worst <= 1e-6, f"500 settings, max |rho - F^-1(F(rho))| = {worst:.2e} (need <= 1e-6)")


def test_criterion_5_mvn():
    rhos = np.linspace(-0.95, 0.95, 20)
    err2 = max(abs(bvn_cdf(0.0, 0.0, r) - (0.25 + np.arcsin(r) / (2 * np.pi))) for r in rhos)
    rng = np.random.default_rng(5)
    worst = 0.0
    for i in range(20):
        d = 3 if i < 10 else 4
        C = random_correlation(d, rng)
        b = rng.uniform(-1.5, 1.5, d)
        p, _ = mc_orthant(b, C, 10_000_000, rng)
        p0 = mvn_cdf(b, C)
        # binomial standard error at the kernel value; the plug-in one is 0 when no draw lands
        se = np.sqrt(p0 * (1 - p0) / 10_000_000)
        worst = max(worst, abs(p0 - p) / se)
    _report(5, err2 <= 1e-9 and worst <= 3,
            f"bivariate max err={err2:.1e} (need <= 1e-9); 3/4-variate worst |diff|/se={worst:.2f} (need <= 3)")


def test_criterion_6_blup():
    rng = np.random.default_rng(6)
    C = VariableType.continuous()
    worst = 0.0
    for _ in range(10):
        m, J = int(rng.integers(4, 8)), int(rng.integers(2, 4))
        Cfull = random_correlation(J * m, rng, rank=int(rng.integers(2, J * m)))
        blocks = {(j, k): Cfull[j * m:(j + 1) * m, k * m:(k + 1) * m] for j in range(J) for k in range(j, J)}
        model = assemble_and_project(blocks, 1e-3, regular_grid(m))
        X = rng.normal(size=(6, J, m))
        X[rng.random(X.shape) < 0.4] = np.nan
        X[:, 0, 0] = 0.1
        data = MixedDataset.from_dense(X, regular_grid(m), (C,) * J)
        mm = MarginalModel(regular_grid(m), (C,) * J, [np.zeros((m, 0))] * J, [[None] * m for _ in range(J)])
        pred = predict_latent(data, model, mm)
        for i in range(6):
            v = X[i].ravel()
            obs = np.flatnonzero(~np.isnan(v))
            ref = conditional_mean(model.C_pd, obs, v[obs])
            worst = max(worst, np.max(np.abs(pred.values[i].ravel() - ref)))
    _report(6, worst <= 1e-8, f"10 models, max |BLUP - closed form| = {worst:.2e} (need <= 1e-8)")


def test_criterion_7_pd_projection():
    rng = np.random.default_rng(7)
    worst, indefinite = np.inf, 0
    for _ in range(50):
        J, m = int(rng.integers(2, 5)), int(rng.integers(3, 9))
        blocks = {}
        for j in range(J):
            for k in range(j, J):
                B = rng.uniform(-0.95, 0.95, (m, m))
                if j == k:
                    B = 0.5 * (B + B.T)
                    np.fill_diagonal(B, 1.0)
                blocks[(j, k)] = B
        model = assemble_and_project(blocks, 1e-3)
        indefinite += np.linalg.eigvalsh(model.C)[0] < 0
        worst = min(worst, model.min_eigenvalue())
    _report(7, worst >= 1e-3 - 1e-12 and indefinite > 0,
            f"50 matrices ({indefinite} indefinite), min eigenvalue = {worst:.12f} (need >= 1e-3 - 1e-12)")


def test_criterion_8_fpca_invariants():
    rng = np.random.default_rng(8)
    grid = regular_grid(16)
    w = trapezoid_weights(grid)
    V = np.einsum("ijk,km->ijm", rng.normal(size=(60, 3, 5)) * np.array([3, 2, 1, 0.5, 0.2]),
                  np.stack([np.cos(k * np.pi * grid) for k in range(5)]))
    es = mfpca_full((V, grid), L=5)
    gram = np.max(np.abs(es.gram() - np.eye(5)))
    X = (V - V.mean(0)).reshape(60, -1)
    trace = abs(es.all_eigenvalues.sum() - np.sum(np.diag(X.T @ X / 59) * np.tile(w, 3)))
    phi = np.stack([np.sin(np.pi * grid), grid, np.ones(16)])
    phi /= np.sqrt(np.sum(phi ** 2 * w))
    r1 = mfpca_full((rng.normal(size=(40, 1, 1)) * phi[None], grid), L=1)
    rank1 = abs(abs(np.sum(r1.eigenfunctions[0] * phi * w)) - 1)
    ok = gram <= 1e-8 and trace <= 1e-8 and rank1 <= 1e-8
    _report(8, ok, f"gram dev={gram:.1e} trace dev={trace:.1e} rank-1 dev={rank1:.1e} (need <= 1e-8)")


@pytest.mark.slow
def test_criterion_9_ps_diagnostic():
    data, _, _ = simulate(SimulationConfig("nonstationary", n=500, m=16), seed=9)
    settings = FitSettings(grid_m=16, seed=9)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        stage = stage_one(data, settings)
        full = fit_m2fpca(data, settings, stage=stage)
        ps = fit_ps_m2fpca(data, settings, stage=stage, L=3)
    w = ps.eigen.weights
    shared = ps.eigen.eigenfunctions[:3]
    worst, per = 1.0, []
    for j in range(data.J):
        # marginal eigenfunctions of the full flavor's latent predictions for component j
        comp = mfpca_full((full.latent.values[:, j:j + 1], full.latent.grid), L=3)
        ef = comp.eigenfunctions[:, 0, :]
        G = np.abs((shared * w) @ ef.T)
        r, c = linear_sum_assignment(-G)
        per.append(float(G[r, c].min()))
        worst = min(worst, per[-1])
    _report(9, worst >= 0.9, f"min matched |<phi_ps, phi_full>| per component = "
                             f"{[round(x, 3) for x in per]} (need >= 0.9)")


def test_criterion_10_determinism(tmp_path):
    bench = ["benchmark", "--n", "40", "--reps", "2", "--grid", "8", "--seed", "10"]
    sim = ["simulate", "--n", "40", "--grid", "8", "--seed", "10", "--out", str(tmp_path / "sim")]
    assert main(sim) == EXIT_OK
    fit = ["fit", str(tmp_path / "sim" / "data.csv"), "--grid", "8", "--seed", "10"]
    for k in range(2):
        assert main([*bench, "--out", str(tmp_path / f"b{k}")]) == EXIT_OK
        assert main([*fit, "--out", str(tmp_path / f"f{k}")]) == EXIT_OK
    same_csv = (tmp_path / "b0" / "benchmark.csv").read_bytes() == (tmp_path / "b1" / "benchmark.csv").read_bytes()
    same_model = (tmp_path / "f0" / "model.json").read_bytes() == (tmp_path / "f1" / "model.json").read_bytes()
    json.loads((tmp_path / "f0" / "model.json").read_text())
    _report(10, same_csv and same_model, f"benchmark.csv identical={same_csv} model.json identical={same_model}")
