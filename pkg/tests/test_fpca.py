import numpy as np
import pytest

from m2fpca.data_model import regular_grid
from m2fpca.fpca import (
    EigenSystem,
    explained_variance,
    mfpca_full,
    n_components,
    ps_decompose,
    ps_pool,
    trapezoid_weights,
)


def _curves(rng, n=40, J=3, m=12):
    grid = regular_grid(m)
    basis = np.stack([np.sin((k + 1) * np.pi * grid) for k in range(4)])
    coef = rng.normal(size=(n, J, 4)) * np.array([2.0, 1.0, 0.5, 0.25])
    return np.einsum("ijk,km->ijm", coef, basis) + 0.05 * rng.normal(size=(n, J, m)), grid


def test_trapezoid_weights():
    w = trapezoid_weights([0.0, 0.5, 1.0])
    np.testing.assert_allclose(w, [0.25, 0.5, 0.25])
    assert trapezoid_weights(np.linspace(0, 2, 9)).sum() == pytest.approx(2.0)
    with pytest.raises(ValueError):
        trapezoid_weights([0.0, 0.0, 1.0])


def test_full_gram_and_trace():
    V, grid = _curves(np.random.default_rng(0))
    es = mfpca_full((V, grid), L=5)
    assert np.max(np.abs(es.gram() - np.eye(5))) <= 1e-8
    n, J, m = V.shape
    X = (V - V.mean(0)).reshape(n, -1)
    cov = X.T @ X / (n - 1)
    assert es.all_eigenvalues.sum() == pytest.approx(np.sum(np.diag(cov) * np.tile(es.weights, J)), rel=1e-10)
    assert np.all(np.diff(es.all_eigenvalues) <= 1e-12)


def test_centered_scores_and_score_variance():
    V, grid = _curves(np.random.default_rng(1))
    es = mfpca_full((V, grid), L=4)
    assert np.max(np.abs(es.scores.mean(axis=0))) <= 1e-10
    np.testing.assert_allclose(es.scores.var(axis=0, ddof=1), es.eigenvalues, rtol=1e-8)


def test_rank_one_recovery():
    grid = regular_grid(15)
    w = trapezoid_weights(grid)
    phi = np.stack([np.sin(np.pi * grid), np.cos(np.pi * grid)])
    phi /= np.sqrt(np.sum(phi ** 2 * w))
    xi = np.random.default_rng(2).normal(size=30)
    V = xi[:, None, None] * phi[None]
    es = mfpca_full((V, grid), L=1)
    assert abs(abs(np.sum(es.eigenfunctions[0] * phi * w)) - 1) <= 1e-8
    assert es.all_eigenvalues[1] <= 1e-10 * es.all_eigenvalues[0]
    assert es.eigenvalues[0] == pytest.approx(np.var(xi, ddof=1), rel=1e-8)


def test_exact_representation_recovers_scores():
    rng = np.random.default_rng(3)
    grid = regular_grid(10)
    wf = np.tile(trapezoid_weights(grid), 2)
    Q, _ = np.linalg.qr(rng.normal(size=(20, 3)) * np.sqrt(wf)[:, None])
    Phi = Q / np.sqrt(wf)[:, None]
    # centered scores with an exactly diagonal sample covariance
    Z = rng.normal(size=(200, 3))
    Z, _ = np.linalg.qr(Z - Z.mean(0))
    xi = Z * np.array([30.0, 20.0, 10.0])
    V = (xi @ Phi.T).reshape(200, 2, 10)
    es = mfpca_full((V, grid), L=3)
    for l in range(3):
        s = np.sign(np.dot(es.scores[:, l], xi[:, l]))
        assert np.max(np.abs(s * es.scores[:, l] - xi[:, l])) <= 1e-6
        np.testing.assert_allclose(s * es.eigenfunctions[l].ravel(), Phi[:, l], atol=1e-6)
    np.testing.assert_allclose(es.reconstruct(), V, atol=1e-6)


def test_n_components():
    assert n_components([5, 3, 2], 0.5) == 1
    assert n_components([5, 3, 2], 0.8) == 2
    assert n_components([5, 3, 2], 1.0) == 3
    assert n_components([0, 0], 0.9) == 1
    with pytest.raises(ValueError):
        n_components([1.0], 1.5)


def test_explained_variance():
    frac, cum = explained_variance(np.array([3.0, 1.0]))
    np.testing.assert_allclose(frac, [0.75, 0.25])
    assert cum[-1] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        explained_variance(np.zeros(2))


def test_ps_gram_and_centering():
    V, grid = _curves(np.random.default_rng(4))
    n, J, m = V.shape
    Xc = V - V.mean(0)
    H = ps_pool([Xc[:, j].T @ Xc[:, j] / (n - 1) for j in range(J)])
    es = ps_decompose((V, grid), H, L=3)
    assert np.max(np.abs(es.gram() - np.eye(3))) <= 1e-8
    assert np.max(np.abs(es.scores.mean(axis=0))) <= 1e-10
    for l in range(3):
        np.testing.assert_allclose(es.score_cov[l], np.cov(es.scores[:, l].T), atol=1e-12)


def test_ps_single_component_matches_full():
    V, grid = _curves(np.random.default_rng(5), J=1)
    n = V.shape[0]
    Xc = V[:, 0] - V[:, 0].mean(0)
    full = mfpca_full((V, grid), L=4)
    ps = ps_decompose((V, grid), ps_pool([Xc.T @ Xc / (n - 1)]), L=4)
    np.testing.assert_allclose(ps.scores[:, :, 0], full.scores, atol=1e-8)
    np.testing.assert_allclose(ps.eigenvalues, full.eigenvalues, rtol=1e-8)


def test_ps_recovers_separable_structure():
    rng = np.random.default_rng(9)
    n, J, m, L = 1000, 3, 20, 3
    grid = regular_grid(m)
    w = trapezoid_weights(grid)
    phi = np.stack([np.sqrt(2) * np.sin((l + 1) * np.pi * grid) for l in range(L)])
    Q, _ = np.linalg.qr((phi * np.sqrt(w)).T)
    phi = (Q / np.sqrt(w)[:, None]).T
    Sig = np.array([a * (0.5 * np.eye(J) + 0.5) for a in (4.0, 2.0, 1.0)])
    xi = np.stack([rng.multivariate_normal(np.zeros(J), Sig[l], size=n) for l in range(L)], axis=1)
    V = np.einsum("ilj,lm->ijm", xi, phi)
    H = np.einsum("l,lm,lt->mt", np.trace(Sig, axis1=1, axis2=2) / J, phi, phi)
    es = ps_decompose((V, grid), H, L=L)
    flat = es.scores.reshape(n, L * J)
    R = np.corrcoef(flat.T)
    for l in range(L):
        for l2 in range(L):
            if l != l2:
                assert np.max(np.abs(R[l * J:(l + 1) * J, l2 * J:(l2 + 1) * J])) < 0.1
        np.testing.assert_allclose(es.score_cov[l], Sig[l], atol=0.2 * Sig[l][0, 0])


def test_ps_rejects_bad_inputs():
    V, grid = _curves(np.random.default_rng(6), m=8)
    with pytest.raises(ValueError):
        ps_decompose((V, grid), np.eye(5))
    with pytest.raises(ValueError):
        ps_decompose((V, grid), np.eye(8), L=9)


def test_json_roundtrip(tmp_path):
    V, grid = _curves(np.random.default_rng(7))
    for es in (mfpca_full((V, grid), L=2), ps_decompose((V, grid), np.eye(grid.size), L=2)):
        es.to_json(tmp_path / "e.json")
        back = EigenSystem.from_json(tmp_path / "e.json")
        for key in ("eigenvalues", "eigenfunctions", "scores", "mean", "grid", "weights"):
            np.testing.assert_array_equal(getattr(back, key), getattr(es, key))
        assert back.subject_ids == es.subject_ids
        np.testing.assert_allclose(back.covariance(), es.covariance(), atol=1e-14)


def test_scores_csv(tmp_path):
    V, grid = _curves(np.random.default_rng(8), n=3, J=2)
    ps = ps_decompose((V, grid), np.eye(grid.size), L=2)
    ps.scores_csv(tmp_path / "s.csv", names=["a", "b"])
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "subject_id,l,component,score"
    assert len(lines) == 1 + 3 * 2 * 2
