"""Latent correlation surfaces: B-spline fits through the bridges, BIC, assembly and projection."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.interpolate import BSpline

from .bridge import BridgeTable, PairKind, is_degenerate
from .kendall import TauSurface
from .latent import SamplerSettings, conditional_mean

__all__ = [
    "EPSILON",
    "K_CANDIDATES",
    "link_g",
    "link_g_inv",
    "SplineBasis",
    "SplineSurface",
    "FitConvergenceError",
    "BlockProblem",
    "fit_surface",
    "evaluate_block",
    "project_pd",
    "assemble_and_project",
    "LatentCorrelationModel",
    "bic_scores",
    "select_K",
]

EPSILON = 1e-3
K_CANDIDATES = tuple(range(4, 11))


def link_g(x):
    """``g(x) = (e^x - 1) / (e^x + 1)``, computed as ``tanh(x / 2)``."""
    return np.tanh(np.asarray(x, dtype=float) / 2.0)


def link_g_inv(y):
    y = np.asarray(y, dtype=float)
    if np.any(np.abs(y) >= 1.0):
        raise ValueError("link inverse requires |y| < 1")
    return 2.0 * np.arctanh(y)


@dataclass(frozen=True, eq=False)
class SplineBasis:
    """B-spline basis of size ``K`` on [0, 1] with equally spaced knots.

    Degree is ``min(3, K - 1)``; the knot vector is clamped at both ends.
    """

    K: int

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 2:
            raise ValueError("basis size K must be an integer >= 2")

    @property
    def degree(self) -> int:
        return min(3, self.K - 1)

    @property
    def knots(self) -> np.ndarray:
        k = self.degree
        inner = np.linspace(0.0, 1.0, self.K - k + 1)
        return np.concatenate([np.zeros(k), inner, np.ones(k)])

    def design(self, x) -> np.ndarray:
        x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
        return BSpline.design_matrix(x, self.knots, self.degree).toarray()


@dataclass(eq=False)
class SplineSurface:
    """Fitted surface ``C(s, t) = g(sum_ab U_ab B_a(s) B_b(t))`` for components (j, k)."""

    j: int
    k: int
    U: np.ndarray
    objective: float = float("nan")
    grad_norm: float = float("nan")
    n_iter: int = 0
    history: list = field(default_factory=list)

    @property
    def K(self) -> int:
        return self.U.shape[0]

    @property
    def basis(self) -> SplineBasis:
        return SplineBasis(self.K)

    @property
    def knots(self) -> np.ndarray:
        return self.basis.knots

    def evaluate(self, s, t) -> np.ndarray:
        """Pointwise values at paired arrays ``s`` and ``t``."""
        b = self.basis
        Bs, Bt = b.design(np.ravel(s)), b.design(np.ravel(t))
        eta = np.einsum("ca,ab,cb->c", Bs, self.U, Bt)
        return link_g(eta).reshape(np.shape(s))

    def grid(self, s, t=None) -> np.ndarray:
        """Matrix of values on ``s x t`` (``t`` defaults to ``s``)."""
        b = self.basis
        Bs = b.design(s)
        Bt = Bs if t is None else b.design(t)
        return link_g(Bs @ self.U @ Bt.T)

    def to_dict(self) -> dict:
        return {"j": self.j, "k": self.k, "K": self.K, "degree": self.basis.degree,
                "knots": self.knots.tolist(), "U": self.U.tolist(),
                "objective": self.objective, "grad_norm": self.grad_norm, "n_iter": self.n_iter}

    @classmethod
    def from_dict(cls, d: dict) -> "SplineSurface":
        return cls(int(d["j"]), int(d["k"]), np.asarray(d["U"], dtype=float), d.get("objective", np.nan),
                   d.get("grad_norm", np.nan), int(d.get("n_iter", 0)))


class FitConvergenceError(RuntimeError):
    """Optimizer stopped before reaching the gradient tolerance.

    ``best`` is the surface at the best accepted iterate.
    """

    def __init__(self, message, best: SplineSurface):
        super().__init__(message)
        self.best = best
        self.objective = best.objective
        self.grad_norm = best.grad_norm


class BlockProblem:
    """Retained cells of one tau surface with their bridge interpolants.

    Built once per block and reused across basis sizes.

    Parameters
    ----------
    tau : TauSurface
    kind : PairKind or str
        Bridge kind for (component j, component k); ``swapped`` means the
        kind's first role is played by component k.
    marginals : MarginalModel, optional
        Needed for every kind except ``cc``.
    include_diagonal : bool
        Keep the ``s == t`` cells of marginal surfaces.
    """

    def __init__(self, tau: TauSurface, kind, marginals=None, include_diagonal: bool = True,
                 n_nodes: int = 32):
        pk = kind if isinstance(kind, PairKind) else PairKind(str(kind))
        self.kind = pk
        self.j, self.k = tau.j, tau.k
        self.times = np.asarray(tau.times, dtype=float)
        a, b, y, N = tau.cells()
        keep = np.ones(a.size, dtype=bool)
        if self.j == self.k and not include_diagonal:
            keep &= a != b
        role_j, role_k = pk.roles
        if pk.kind == "cc":
            cj = np.zeros((a.size, 0))
            ck = np.zeros((a.size, 0))
        else:
            if marginals is None:
                raise ValueError(f"bridge kind {pk.kind!r} needs marginal cutoffs")
            ridx = marginals.index(self.times)
            cut_j = marginals.cutoffs[self.j][ridx[a]]
            cut_k = marginals.cutoffs[self.k][ridx[b]]
            cj, ck = (cut_k, cut_j) if pk.swapped else (cut_j, cut_k)
            keep &= ~is_degenerate(role_j, cj) & ~is_degenerate(role_k, ck)
        self.a, self.b = a[keep], b[keep]
        self.y = y[keep]
        self.N = N[keep].astype(float)
        if self.a.size == 0:
            raise ValueError(f"no usable cells for block ({self.j}, {self.k})")
        self.w = self.N / self.N.sum()
        self.table = BridgeTable(pk.kind, cj[keep], ck[keep], n_nodes=n_nodes)
        self._designs: dict = {}

    @property
    def symmetric(self) -> bool:
        return self.j == self.k

    def design(self, K: int) -> np.ndarray:
        """Cell-by-parameter matrix mapping coefficients to the linear predictor."""
        if K not in self._designs:
            B = SplineBasis(K).design(self.times)
            X = np.einsum("ca,cb->cab", B[self.a], B[self.b]).reshape(self.a.size, K * K)
            if self.symmetric:
                iu = np.triu_indices(K)
                Xf = X.reshape(-1, K, K)
                X = Xf[:, iu[0], iu[1]] + np.where(iu[0] != iu[1], Xf[:, iu[1], iu[0]], 0.0)
            self._designs[K] = X
        return self._designs[K]

    def unpack(self, p: np.ndarray, K: int) -> np.ndarray:
        if not self.symmetric:
            return p.reshape(K, K).copy()
        U = np.zeros((K, K))
        iu = np.triu_indices(K)
        U[iu] = p
        U[(iu[1], iu[0])] = p
        return U

    def pack(self, U: np.ndarray) -> np.ndarray:
        if not self.symmetric:
            return U.ravel().copy()
        return U[np.triu_indices(U.shape[0])].copy()

    def evaluate(self, p, X):
        eta = X @ p
        rho = link_g(eta)
        F, dtheta = self.table.value_and_slope(rho)
        dF = dtheta * np.sqrt(np.clip(1.0 - rho * rho, 0.0, None)) / 2.0
        res = self.y - F
        obj = float(np.sum(self.w * res * res))
        grad = -2.0 * X.T @ (self.w * res * dF)
        return obj, grad, res, dF


def fit_surface(tau: TauSurface | BlockProblem, kind=None, marginals=None, K: int = 6, *,
                max_iter: int = 500, gtol: float = 1e-8, include_diagonal: bool = True,
                U0: np.ndarray | None = None) -> SplineSurface:
    """Weighted nonlinear least-squares fit of a latent correlation surface.

    Minimizes ``sum_c w_c {tau_c - F(g(eta_c))}^2`` with weights ``N_c / sum N``
    by Levenberg-Marquardt, starting from the zero surface.  Marginal
    surfaces are parametrized by the upper triangle of a symmetric ``U``.

    Raises
    ------
    FitConvergenceError
        If the gradient norm is still above ``gtol`` after ``max_iter``
        iterations or when no further decrease is possible.
    """
    if K < 3:
        raise ValueError("basis size K must be >= 3")
    prob = tau if isinstance(tau, BlockProblem) else BlockProblem(tau, kind, marginals, include_diagonal)
    X = prob.design(K)
    p = np.zeros(X.shape[1]) if U0 is None else prob.pack(np.asarray(U0, float))
    obj, grad, res, dF = prob.evaluate(p, X)
    history = [obj]
    lam = 1e-3
    sw = np.sqrt(prob.w)
    it = 0
    converged = np.linalg.norm(grad) <= gtol
    while not converged and it < max_iter:
        it += 1
        Jm = (sw * dF)[:, None] * X
        A = Jm.T @ Jm
        rhs = Jm.T @ (sw * res)
        dA = np.diag(A).copy()
        floor = 1e-12 * max(dA.max(), 1e-300)
        improved = False
        while lam < 1e16:
            step = np.linalg.solve(A + lam * np.diag(np.maximum(dA, floor)), rhs)
            cand = p + step
            c_obj, c_grad, c_res, c_dF = prob.evaluate(cand, X)
            if c_obj < obj:
                p, obj, grad, res, dF = cand, c_obj, c_grad, c_res, c_dF
                lam = max(lam / 3.0, 1e-12)
                improved = True
                break
            lam *= 4.0
        history.append(obj)
        if np.linalg.norm(grad) <= gtol:
            converged = True
            break
        if not improved:
            break
    surf = SplineSurface(prob.j, prob.k, prob.unpack(p, K), obj, float(np.linalg.norm(grad)), it, history)
    if not converged:
        raise FitConvergenceError(
            f"surface ({prob.j}, {prob.k}) K={K}: gradient norm {surf.grad_norm:.3g} > {gtol:g} "
            f"after {it} iterations (objective {obj:.6g})", surf)
    return surf


def fit_surface_or_best(prob: BlockProblem, K: int, **kw) -> tuple[SplineSurface, bool]:
    """Like :func:`fit_surface` but returns the best iterate on non-convergence."""
    try:
        return fit_surface(prob, K=K, **kw), True
    except FitConvergenceError as exc:
        return exc.best, False


def evaluate_block(surface: SplineSurface, grid, grid_t=None) -> np.ndarray:
    """Evaluate a surface on the grid; marginal blocks are symmetrized with unit diagonal."""
    B = surface.grid(grid, grid_t)
    if surface.j == surface.k and grid_t is None:
        B = 0.5 * (B + B.T)
        np.fill_diagonal(B, 1.0)
    return B


def project_pd(C: np.ndarray, eps: float = EPSILON) -> np.ndarray:
    """Eigenvalue thresholding ``P max(Lambda, eps) P^T`` of the symmetrized matrix."""
    C = 0.5 * (np.asarray(C, dtype=float) + np.asarray(C, dtype=float).T)
    w, P = np.linalg.eigh(C)
    if w[0] >= eps:
        return C
    out = (P * np.maximum(w, eps)) @ P.T
    return 0.5 * (out + out.T)


@dataclass(eq=False)
class LatentCorrelationModel:
    """Assembled latent correlation on a common grid.

    ``C`` and ``C_pd`` are ``(J m) x (J m)`` and ordered component-major.
    ``surfaces`` maps ``(j, k)`` with ``j <= k`` to fitted surfaces when the
    model came from data.
    """

    grid: np.ndarray
    C: np.ndarray
    C_pd: np.ndarray
    eps: float = EPSILON
    surfaces: dict = field(default_factory=dict)

    @property
    def J(self) -> int:
        return self.C.shape[0] // self.grid.size

    @property
    def m(self) -> int:
        return self.grid.size

    @property
    def K(self) -> dict:
        return {key: s.K for key, s in self.surfaces.items()}

    def block(self, j: int, k: int, projected: bool = True) -> np.ndarray:
        m = self.m
        M = self.C_pd if projected else self.C
        return M[j * m:(j + 1) * m, k * m:(k + 1) * m]

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.C_pd)[0])

    def evaluate_pairs(self, j: int, k: int, s, t) -> np.ndarray:
        """Correlation between component j at each of ``s`` and k at each of ``t`` (matrix)."""
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        if (min(j, k), max(j, k)) in self.surfaces:
            if j <= k:
                out = self.surfaces[(j, k)].grid(s, t)
            else:
                out = self.surfaces[(k, j)].grid(t, s).T
            if j == k:
                out = np.where(s[:, None] == t[None, :], 1.0, out)
            return out
        # fall back to interpolating the assembled matrix on the grid
        B = self.block(j, k, projected=False)
        g = self.grid
        rows = np.array([np.interp(s, g, B[:, c]) for c in range(g.size)]).T
        return np.array([np.interp(t, g, rows[r]) for r in range(s.size)])

    def subset(self, components: Sequence[int]) -> "LatentCorrelationModel":
        """Sub-model for some components (re-projected)."""
        m = self.m
        idx = np.concatenate([np.arange(j * m, (j + 1) * m) for j in components])
        C = self.C[np.ix_(idx, idx)]
        return LatentCorrelationModel(self.grid, C, project_pd(C, self.eps), self.eps, {})

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.tolist(),
            "eps": self.eps,
            "blocks": [dict(s.to_dict()) for _, s in sorted(self.surfaces.items())],
            "C": self.C.tolist(),
            "C_pd": self.C_pd.tolist(),
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict())
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "LatentCorrelationModel":
        surfaces = {}
        for b in d.get("blocks", []):
            s = SplineSurface.from_dict(b)
            surfaces[(s.j, s.k)] = s
        return cls(np.asarray(d["grid"], float), np.asarray(d["C"], float), np.asarray(d["C_pd"], float),
                   float(d["eps"]), surfaces)

    @classmethod
    def from_json(cls, text_or_path) -> "LatentCorrelationModel":
        text = str(text_or_path)
        if not text.lstrip().startswith("{"):
            with open(text_or_path) as fh:
                text = fh.read()
        return cls.from_dict(json.loads(text))


def assemble_and_project(blocks, eps: float = EPSILON, grid=None, surfaces=None) -> LatentCorrelationModel:
    """Assemble the block matrix and threshold its eigenvalues at ``eps``.

    Parameters
    ----------
    blocks : dict or ndarray
        ``{(j, k): m x m}`` for ``j <= k`` (lower blocks are transposes), or a
        ``(J, J, m, m)`` array.
    eps : float
    grid : ndarray, optional
        Defaults to ``m`` equidistant points.
    """
    if isinstance(blocks, dict):
        J = 1 + max(max(key) for key in blocks)
        shapes = {np.shape(b) for b in blocks.values()}
        if len(shapes) != 1:
            raise ValueError(f"block dimension mismatch: {sorted(shapes)}")
        (m, m2), = shapes
        if m != m2:
            raise ValueError("blocks must be square")
        arr = np.empty((J, J, m, m))
        for j in range(J):
            for k in range(j, J):
                if (j, k) in blocks:
                    B = np.asarray(blocks[(j, k)], float)
                elif (k, j) in blocks:
                    B = np.asarray(blocks[(k, j)], float).T
                else:
                    raise ValueError(f"missing block ({j}, {k})")
                arr[j, k] = B
                arr[k, j] = B.T
    else:
        arr = np.asarray(blocks, dtype=float)
        if arr.ndim != 4 or arr.shape[0] != arr.shape[1] or arr.shape[2] != arr.shape[3]:
            raise ValueError("blocks must have shape (J, J, m, m)")
        J, _, m, _ = arr.shape
    C = arr.transpose(0, 2, 1, 3).reshape(J * m, J * m)
    C = 0.5 * (C + C.T)
    grid = np.linspace(0.0, 1.0, m) if grid is None else np.asarray(grid, dtype=float)
    if grid.size != m:
        raise ValueError("grid size does not match the blocks")
    return LatentCorrelationModel(grid, C, project_pd(C, eps), float(eps), dict(surfaces or {}))


# --------------------------------------------------------------------------
# BIC tuning

def bic_scores(Cs: np.ndarray, lo: np.ndarray, hi: np.ndarray, Ks: Sequence[int], n: int,
               settings: SamplerSettings = SamplerSettings()) -> np.ndarray:
    """``n log|C| + sum_i V_i^T C^{-1} V_i + {K(K+1)/2} log n`` per candidate.

    ``V_i`` is the latent prediction under each candidate matrix; all
    candidates share one sampler run.  Candidates with a singular matrix get
    ``inf``.
    """
    Cs = np.asarray(Cs, dtype=float)
    out = np.full(len(Ks), np.inf)
    ok = []
    for c in range(len(Ks)):
        sign, _ = np.linalg.slogdet(Cs[c])
        try:
            np.linalg.cholesky(Cs[c])
            ok.append(c)
        except np.linalg.LinAlgError:
            warnings.warn(f"singular correlation for K={Ks[c]}; candidate skipped", RuntimeWarning)
    if not ok:
        return out
    V, _, _ = conditional_mean(Cs[ok], lo, hi, settings)
    for pos, c in enumerate(ok):
        _, logdet = np.linalg.slogdet(Cs[c])
        quad = np.einsum("nd,nd->", V[pos], np.linalg.solve(Cs[c], V[pos].T).T)
        out[c] = n * logdet + quad + Ks[c] * (Ks[c] + 1) / 2.0 * np.log(n)
    return out


def select_K(problem: BlockProblem, candidates: Sequence[int], grid, lo, hi, n: int,
             marginal_blocks: tuple | None = None, eps: float = EPSILON,
             settings: SamplerSettings = SamplerSettings(), fit_kw: dict | None = None):
    """Choose the basis size of one block by BIC.

    For a marginal block the candidate matrix is the projected block
    itself; for a cross block (j, k) it is the projected 2 x 2 block matrix
    built with the already selected marginal blocks ``marginal_blocks``.
    ``lo``/``hi`` are the latent constraints of the corresponding coordinates.

    Returns
    -------
    K : int
    surface : SplineSurface
    scores : dict
        BIC per candidate (``inf`` for skipped ones).
    """
    candidates = list(candidates)
    if not candidates:
        raise ValueError("candidate list is empty")
    fit_kw = dict(fit_kw or {})
    fits, mats, used = {}, [], []
    for K in candidates:
        try:
            surf, conv = fit_surface_or_best(problem, K, **fit_kw)
        except (ValueError, np.linalg.LinAlgError) as exc:
            warnings.warn(f"K={K} skipped: {exc}", RuntimeWarning)
            continue
        if not conv:
            warnings.warn(f"block ({problem.j}, {problem.k}) K={K}: optimizer stopped at gradient norm "
                          f"{surf.grad_norm:.3g}; best iterate used", RuntimeWarning)
        B = evaluate_block(surf, grid)
        if problem.symmetric:
            M = B
        else:
            Mjj, Mkk = marginal_blocks
            M = np.block([[Mjj, B], [B.T, Mkk]])
        fits[K] = surf
        mats.append(project_pd(M, eps))
        used.append(K)
    if not used:
        raise RuntimeError(f"all K candidates failed for block ({problem.j}, {problem.k})")
    bic = bic_scores(np.array(mats), lo, hi, used, n, settings)
    scores = {K: float(b) for K, b in zip(used, bic)}
    finite = [K for K in used if np.isfinite(scores[K])]
    if not finite:
        raise RuntimeError(f"all K candidates singular for block ({problem.j}, {problem.k})")
    best = min(finite, key=lambda K: (scores[K], K))
    return best, fits[best], scores
