import json

import numpy as np
import pytest

import m2fpca.sim as sim
from m2fpca.data_model import VariableType, regular_grid
from m2fpca.fpca import trapezoid_weights
from m2fpca.sim import (
    SimulationConfig,
    benchmark,
    fourier_basis,
    ise,
    naive_covariance,
    nonstationary_cov,
    random_precision,
    simulate,
    stationary_grid_cov,
    stationary_params,
)


def test_config_validation():
    with pytest.raises(ValueError):
        SimulationConfig(scenario="other")
    with pytest.raises(ValueError):
        SimulationConfig(cutoffs=((0.5,), (0.1,), (0.5,), ()))
    with pytest.raises(ValueError):
        SimulationConfig(n=1)
    with pytest.raises(ValueError):
        SimulationConfig(missing=1.0)
    d = SimulationConfig().to_dict()
    assert d["types"][1] == VariableType.ordinal(4).to_dict()
    json.dumps(d)


def test_stationary_construction():
    params = stationary_params(4, seed=3)
    np.testing.assert_allclose(sorted(np.diag(params.phi)), np.linspace(1, 5, 4))
    np.testing.assert_allclose(np.diag(params.sigma), 1.0)
    C = stationary_grid_cov(params, regular_grid(10))
    np.testing.assert_allclose(C, C.T)
    assert np.linalg.eigvalsh(C)[0] > 0
    # a cross-block entry by the closed form
    s, t = regular_grid(10)[2], regular_grid(10)[7]
    ref = params.sigma[0, 1] * np.exp(-params.phi[0, 1] * abs(s - t))
    assert C[2, 10 + 7] == pytest.approx(ref, rel=1e-12)


def test_fourier_basis_orthonormal():
    t = np.linspace(0, 1, 2001)
    B = fourier_basis(t, 7)
    G = (B * trapezoid_weights(t)) @ B.T
    np.testing.assert_allclose(G, np.eye(7), atol=1e-5)


def test_random_precision_unit_diagonal_pd():
    P = random_precision(4, np.random.default_rng(0))
    np.testing.assert_array_equal(P, P.T)
    assert np.linalg.eigvalsh(P)[0] >= 0.05 - 1e-12
    assert np.all(np.abs(P[np.triu_indices(4, 1)]) <= 0.5)


def test_nonstationary_is_valid_covariance():
    C = nonstationary_cov(3, seed=1, grid=regular_grid(8), M=21)
    np.testing.assert_allclose(C, C.T, atol=1e-14)
    assert np.linalg.eigvalsh(C)[0] > -1e-10


def test_simulate_deterministic_and_unit_diagonal():
    cfg = SimulationConfig("nonstationary", n=20, m=6, missing=0.2)
    d1, C1, _ = simulate(cfg, seed=5)
    d2, C2, _ = simulate(cfg, seed=5)
    np.testing.assert_array_equal(d1.dense(), d2.dense())
    np.testing.assert_array_equal(C1, C2)
    np.testing.assert_allclose(np.diag(C1), 1.0)
    d3, _, _ = simulate(cfg, seed=6)
    assert not np.array_equal(np.nan_to_num(d1.dense()), np.nan_to_num(d3.dense()))
    frac = np.isnan(d1.dense()).mean()
    assert 0.1 < frac < 0.3


def test_simulated_types_respect_observation_maps():
    cfg = SimulationConfig(n=200, m=5)
    data, _, info = simulate(cfg, seed=0, return_latent=True)
    X, Z = data.dense(), info["latent"]
    np.testing.assert_array_equal(X[:, 0], (Z[:, 0] > 0.5).astype(float))
    np.testing.assert_array_equal(X[:, 1], np.searchsorted([-0.6, 0.1, 0.6], Z[:, 1]))
    np.testing.assert_array_equal(X[:, 2], np.where(Z[:, 2] > 0.5, Z[:, 2], 0.0))
    np.testing.assert_array_equal(X[:, 3], Z[:, 3])


def test_ise_properties():
    rng = np.random.default_rng(2)
    A = rng.normal(size=(12, 12))
    assert ise(A, A, regular_grid(4))["total"] == 0.0
    grid = regular_grid(4)
    B = A + 0.1
    out = ise(A, B, grid)
    # constant error c over the unit square integrates to c^2
    np.testing.assert_allclose(out["blocks"], 0.01, rtol=1e-12)
    assert out["total"] == pytest.approx(0.01)
    assert ise(A, B, J=3)["total"] == pytest.approx(0.01)
    with pytest.raises(ValueError):
        ise(A, B[:-1, :-1], grid)


def test_naive_covariance_on_gaussian_data():
    cfg = SimulationConfig(n=400, m=6, types=(VariableType.continuous(),) * 2, cutoffs=((), ()))
    data, C, _ = simulate(cfg, seed=1)
    S = naive_covariance(data, regular_grid(6), var_threshold=1.0)
    X = data.dense().reshape(400, -1)
    np.testing.assert_allclose(S, np.cov(X.T), atol=1e-10)
    R = naive_covariance(data, regular_grid(6), normalize=True)
    np.testing.assert_allclose(np.diag(R), 1.0)


def test_benchmark_records_failures(monkeypatch):
    def boom(*args, **kwargs):
        raise RuntimeError("forced")

    monkeypatch.setattr(sim, "naive_covariance", boom)
    cfg = SimulationConfig(n=10, m=4, reps=2)
    with pytest.warns(RuntimeWarning, match="forced"):
        res = benchmark(cfg, methods=("naive_mfpca",))
    assert res.failures["naive_mfpca"] == 2
    assert np.isnan(res.mean("naive_mfpca"))
    assert res.summary()[0]["n_fail"] == 2


def test_benchmark_validation_and_outputs(tmp_path):
    with pytest.raises(ValueError):
        benchmark(SimulationConfig(reps=0, n=10, m=4), methods=("naive_mfpca",))
    with pytest.raises(ValueError):
        benchmark(SimulationConfig(reps=1, n=10, m=4), methods=("pca",))
    res = benchmark(SimulationConfig(n=30, m=5, reps=2, seed=4), methods=("naive_mfpca",))
    res.to_csv(tmp_path / "b.csv")
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "scenario,n,method,mean_ise,sd_ise,n_fail"
    assert len(lines) == 2
    j = json.loads(res.to_json())
    assert len(j["replications"]) == 2
    again = benchmark(SimulationConfig(n=30, m=5, reps=2, seed=4), methods=("naive_mfpca",))
    assert again.values == res.values
