"""Multivariate FPCA of predicted latent curves, full and partially separable."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "EigenSystem",
    "trapezoid_weights",
    "mfpca_full",
    "ps_pool",
    "ps_decompose",
    "explained_variance",
    "n_components",
]


def trapezoid_weights(grid) -> np.ndarray:
    """Trapezoidal quadrature weights on a sorted grid."""
    g = np.asarray(grid, dtype=float)
    if g.ndim != 1 or g.size < 2 or np.any(np.diff(g) <= 0):
        raise ValueError("grid must be strictly increasing with at least two points")
    h = np.diff(g)
    w = np.zeros(g.size)
    w[:-1] += h / 2.0
    w[1:] += h / 2.0
    return w


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    """Make the largest-magnitude entry of each column positive."""
    idx = np.argmax(np.abs(vecs), axis=0)
    s = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    s[s == 0] = 1.0
    return vecs * s


def _weighted_eigh(cov: np.ndarray, w: np.ndarray):
    """Eigenpairs of the covariance operator under the diagonal quadrature metric ``w``.

    Returns descending eigenvalues (clipped at zero) and eigenfunctions with
    ``Phi^T diag(w) Phi = I``.
    """
    sw = np.sqrt(w)
    A = sw[:, None] * cov * sw[None, :]
    A = 0.5 * (A + A.T)
    lam, U = np.linalg.eigh(A)
    lam, U = lam[::-1], U[:, ::-1]
    U = _fix_signs(U)
    return np.clip(lam, 0.0, None), U / sw[:, None]


def n_components(eigenvalues, threshold: float) -> int:
    """Smallest ``L`` whose cumulative variance fraction reaches ``threshold``."""
    lam = np.asarray(eigenvalues, dtype=float)
    if not 0 < threshold <= 1:
        raise ValueError("variance threshold must be in (0, 1]")
    total = lam.sum()
    if total <= 0:
        return 1
    cum = np.cumsum(lam) / total
    return int(min(np.searchsorted(cum, threshold - 1e-12) + 1, lam.size))


@dataclass(eq=False)
class EigenSystem:
    """Eigen-decomposition of predicted latent curves.

    Attributes
    ----------
    flavor : {"full", "partially_separable"}
    eigenvalues : ndarray, shape (L,)
    eigenfunctions : ndarray
        ``(L, J, m)`` for the full flavor, ``(L, m)`` shared functions for the
        partially separable one.
    scores : ndarray
        ``(n, L)`` or ``(n, L, J)``.
    grid, weights : ndarray, shape (m,)
    mean : ndarray, shape (J, m)
    H : ndarray, optional
        Pooled marginal covariance (partially separable only).
    score_cov : ndarray, optional
        ``(L, J, J)`` score covariances (partially separable only).
    """

    flavor: str
    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray
    scores: np.ndarray
    grid: np.ndarray
    weights: np.ndarray
    mean: np.ndarray
    subject_ids: tuple = ()
    H: np.ndarray | None = None
    score_cov: np.ndarray | None = None
    all_eigenvalues: np.ndarray | None = field(default=None, repr=False)

    @property
    def L(self) -> int:
        return self.eigenvalues.size

    def gram(self) -> np.ndarray:
        w = self.weights
        if self.flavor == "full":
            F = self.eigenfunctions.reshape(self.L, -1)
            wf = np.tile(w, F.shape[1] // w.size)
        else:
            F, wf = self.eigenfunctions, w
        return (F * wf) @ F.T

    def reconstruct(self, L: int | None = None) -> np.ndarray:
        """Mean plus truncated expansion of each subject, shape (n, J, m)."""
        L = self.L if L is None else L
        if self.flavor == "full":
            out = np.einsum("il,ljm->ijm", self.scores[:, :L], self.eigenfunctions[:L])
        else:
            out = np.einsum("ilj,lm->ijm", self.scores[:, :L], self.eigenfunctions[:L])
        return out + self.mean[None]

    def covariance(self) -> np.ndarray:
        """Implied covariance on the grid, ``(J m) x (J m)`` component-major."""
        if self.flavor == "full":
            F = self.eigenfunctions.reshape(self.L, -1)
            return (F.T * self.eigenvalues) @ F
        J = self.mean.shape[0]
        m = self.grid.size
        out = np.zeros((J, m, J, m))
        for l in range(self.L):
            phi = self.eigenfunctions[l]
            out += self.score_cov[l][:, None, :, None] * phi[None, :, None, None] * phi[None, None, None, :]
        return out.reshape(J * m, J * m)

    def to_dict(self) -> dict:
        d = {
            "flavor": self.flavor,
            "grid": self.grid.tolist(),
            "weights": self.weights.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "eigenfunctions": self.eigenfunctions.tolist(),
            "scores": self.scores.tolist(),
            "mean": self.mean.tolist(),
            "subject_ids": list(self.subject_ids),
        }
        if self.H is not None:
            d["H"] = self.H.tolist()
        if self.score_cov is not None:
            d["score_cov"] = self.score_cov.tolist()
        return d

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict())
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "EigenSystem":
        arr = lambda key: None if key not in d else np.asarray(d[key], dtype=float)
        return cls(d["flavor"], arr("eigenvalues"), arr("eigenfunctions"), arr("scores"), arr("grid"),
                   arr("weights"), arr("mean"), tuple(d.get("subject_ids", ())), arr("H"), arr("score_cov"))

    @classmethod
    def from_json(cls, path) -> "EigenSystem":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def scores_csv(self, path, names=None) -> None:
        """Long-form score table (subject_id, l, component, score); full scores use component ``all``."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["subject_id", "l", "component", "score"])
            for i, sid in enumerate(self.subject_ids):
                for l in range(self.L):
                    if self.flavor == "full":
                        w.writerow([sid, l + 1, "all", repr(float(self.scores[i, l]))])
                    else:
                        for j in range(self.scores.shape[2]):
                            comp = names[j] if names else j + 1
                            w.writerow([sid, l + 1, comp, repr(float(self.scores[i, l, j]))])


def _as_curves(latents) -> tuple[np.ndarray, np.ndarray, tuple]:
    if hasattr(latents, "values"):
        return np.asarray(latents.values, float), np.asarray(latents.grid, float), tuple(latents.subject_ids)
    V, grid = latents
    V = np.asarray(V, dtype=float)
    return V, np.asarray(grid, float), tuple(f"s{i:05d}" for i in range(V.shape[0]))


def mfpca_full(latents, var_threshold: float = 0.95, L: int | None = None) -> EigenSystem:
    """Multivariate FPCA of latent curves on a common grid.

    Parameters
    ----------
    latents : LatentPrediction or tuple ``(values, grid)``
        Curves of shape ``(n, J, m)``.
    var_threshold : float
        Retain the fewest components reaching this variance fraction.
    L : int, optional
        Fixed number of components (overrides ``var_threshold``).
    """
    V, grid, ids = _as_curves(latents)
    n, J, m = V.shape
    if n < 2:
        raise ValueError("need at least two subjects")
    w = trapezoid_weights(grid)
    mean = V.mean(axis=0)
    X = (V - mean).reshape(n, J * m)
    cov = X.T @ X / (n - 1)
    lam, Phi = _weighted_eigh(cov, np.tile(w, J))
    Lk = n_components(lam, var_threshold) if L is None else int(L)
    if not 1 <= Lk <= lam.size:
        raise ValueError("invalid number of components")
    scores = (X * np.tile(w, J)) @ Phi[:, :Lk]
    return EigenSystem("full", lam[:Lk], Phi[:, :Lk].T.reshape(Lk, J, m), scores, grid, w, mean, ids,
                       all_eigenvalues=lam)


def ps_pool(model_or_blocks) -> np.ndarray:
    """Pooled marginal covariance ``H = J^{-1} sum_j C_jj``.

    Accepts a LatentCorrelationModel (unprojected marginal blocks) or a
    sequence of ``m x m`` blocks.
    """
    if hasattr(model_or_blocks, "block"):
        blocks = [model_or_blocks.block(j, j, projected=False) for j in range(model_or_blocks.J)]
    else:
        blocks = [np.asarray(b, dtype=float) for b in model_or_blocks]
    H = np.mean(blocks, axis=0)
    return 0.5 * (H + H.T)


def ps_decompose(latents, H: np.ndarray, L: int | None = None, var_threshold: float = 0.95) -> EigenSystem:
    """Partially separable decomposition with temporal eigenfunctions shared across components.

    Eigenfunctions are the leading ones of ``H``; score vectors are the
    quadrature projections of each centered component curve, and each
    ``Sigma_l`` is the empirical covariance of the ``l``-th score vectors.
    """
    V, grid, ids = _as_curves(latents)
    n, J, m = V.shape
    H = np.asarray(H, dtype=float)
    if H.shape != (m, m):
        raise ValueError("H must be m x m on the latent grid")
    w = trapezoid_weights(grid)
    lam, Phi = _weighted_eigh(H, w)
    Lk = n_components(lam, var_threshold) if L is None else int(L)
    if Lk > m:
        raise ValueError("L cannot exceed the grid size")
    if Lk < 1:
        raise ValueError("L must be positive")
    mean = V.mean(axis=0)
    Xc = V - mean
    scores = np.einsum("ijm,m,ml->ilj", Xc, w, Phi[:, :Lk])
    if n > 1:
        score_cov = np.einsum("ilj,ilk->ljk", scores, scores) / (n - 1)
    else:
        score_cov = np.zeros((Lk, J, J))
    return EigenSystem("partially_separable", lam[:Lk], Phi[:, :Lk].T.copy(), scores, grid, w, mean, ids,
                       H, score_cov, all_eigenvalues=lam)


def explained_variance(system) -> tuple[np.ndarray, np.ndarray]:
    """Per-component variance fractions and their cumulative sums."""
    lam = np.asarray(getattr(system, "eigenvalues", system), dtype=float)
    total = lam.sum()
    if not total > 0:
        raise ValueError("total variance is zero")
    frac = lam / total
    return frac, np.cumsum(frac)
