import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from m2fpca.data_model import MixedDataset, Observation, VariableType, regular_grid
from m2fpca.kendall import InsufficientDataError, tau_surface, tau_surfaces

C = VariableType.continuous()


def brute_tau(X, j, k, a, b):
    """Direct enumeration of subject pairs observing (j, a) and (k, b)."""
    s, N = 0.0, 0
    for i, i2 in itertools.combinations(range(X.shape[0]), 2):
        x1, x2, y1, y2 = X[i, j, a], X[i2, j, a], X[i, k, b], X[i2, k, b]
        if np.isnan([x1, x2, y1, y2]).any():
            continue
        s += np.sign(x1 - x2) * np.sign(y1 - y2)
        N += 1
    return (s / N if N else np.nan), N


def _three(xj, xk):
    obs = []
    for sid, a, b in zip("ABC", xj, xk):
        obs += [Observation(sid, 1, 0.0, a), Observation(sid, 2, 1.0, b)]
    return MixedDataset.from_observations(obs, (C, C))


def test_perfect_concordance():
    surf = tau_surface(_three([1, 2, 3], [4, 5, 9]), 0, 1, c0=0)
    assert surf.tau[0, 1] == 1.0
    assert surf.N[0, 1] == 3


def test_hand_enumeration_one_third():
    surf = tau_surface(_three([1, 2, 3], [2, 1, 3]), 0, 1, c0=0)
    assert surf.tau[0, 1] == pytest.approx(1 / 3, abs=1e-15)


def test_threshold_excludes_cells():
    obs = [Observation("A", 1, 0.0, 1.0), Observation("B", 1, 0.0, 2.0), Observation("A", 2, 1.0, 0.5),
           Observation("B", 2, 1.0, 0.1), Observation("C", 1, 0.0, 3.0), Observation("C", 2, 0.0, 1.0),
           Observation("A", 2, 0.0, 2.0), Observation("D", 1, 0.0, 0.5), Observation("D", 2, 0.0, 0.7)]
    d = MixedDataset.from_observations(obs, (C, C))
    surf = tau_surface(d, 0, 1, c0=1)
    t = list(d.pooled_times).index(1.0)
    assert surf.N[0, t] == 1
    assert np.isnan(surf.tau[0, t])
    assert not surf.mask[0, t]


def test_insufficient_data():
    with pytest.raises(InsufficientDataError, match="insufficient pairwise-complete data"):
        tau_surface(_three([1, 2, 3], [2, 1, 3]), 0, 1, c0=5)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_matches_brute_force_with_missing_and_ties(seed):
    rng = np.random.default_rng(seed)
    n, T = 9, 4
    X = rng.integers(0, 3, (n, 2, T)).astype(float)
    X[rng.random(X.shape) < 0.25] = np.nan
    X[0, 0, 0] = 1.0
    d = MixedDataset.from_dense(X, regular_grid(T), (VariableType.ordinal(3), VariableType.ordinal(3)))
    surfs = tau_surfaces(d, c0=0, times=regular_grid(T))
    for (j, k), surf in surfs.items():
        for a in range(T):
            for b in range(T):
                tau, N = brute_tau(X, j, k, a, b)
                assert surf.N[a, b] == N
                if N > 0:
                    assert surf.tau[a, b] == pytest.approx(tau, abs=1e-12)


def test_monotone_invariance_and_symmetry():
    rng = np.random.default_rng(5)
    X = rng.standard_normal((30, 2, 5))
    d1 = MixedDataset.from_dense(X, regular_grid(5), (C, C))
    Y = X.copy()
    Y[:, 0] = np.exp(3 * Y[:, 0]) + 7
    d2 = MixedDataset.from_dense(Y, regular_grid(5), (C, C))
    s1, s2 = tau_surfaces(d1, 0), tau_surfaces(d2, 0)
    for key in s1:
        np.testing.assert_array_equal(s1[key].tau, s2[key].tau)
    m = s1[(0, 0)].tau
    np.testing.assert_array_equal(m, m.T)
    s10 = tau_surface(d1, 1, 0, 0)
    np.testing.assert_array_equal(s10.tau, s1[(0, 1)].tau.T)


def test_complete_data_counts():
    X = np.random.default_rng(6).standard_normal((12, 2, 3))
    d = MixedDataset.from_dense(X, regular_grid(3), (C, C))
    for surf in tau_surfaces(d, 0).values():
        assert np.all(surf.N == 12 * 11 // 2)
        assert np.all(np.abs(surf.tau) <= 1)


def test_surface_csv(tmp_path):
    surf = tau_surface(_three([1, 2, 3], [2, 1, 3]), 0, 1, c0=0)
    surf.to_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "s,t,tau_hat,N"
    assert len(lines) == 1 + int(surf.mask.sum())
