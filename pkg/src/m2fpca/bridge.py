"""Kendall's tau bridging functions for mixed continuous/truncated/ordinal/binary pairs.

Each bridge maps the latent Gaussian correlation ``rho`` of a pair of
variables to the population Kendall's tau-a of the observed pair.  Cutoffs
enter for every non-continuous slot.  The ten pair kinds and their role
order (the first role plays the ``j`` part of the formula) are::

    cc  (continuous, continuous)     tt  (truncated, truncated)
    bb  (binary, binary)             co  (ordinal, continuous)
    cb  (binary, continuous)         oo  (ordinal, ordinal)
    tb  (truncated, binary)          ob  (ordinal, binary)
    ct  (truncated, continuous)      to  (truncated, ordinal)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import optimize, special

from .data_model import VariableType
from .mvn import (
    CorrelationMatrix,
    bvn_cdf,
    orthant_on_path,
    orthant_on_path_grid,
)

__all__ = [
    "KINDS",
    "PairKind",
    "CutoffVector",
    "BridgeError",
    "special_corr",
    "bridge_forward",
    "bridge_inverse",
    "bridge_tau",
    "BridgeTable",
    "is_degenerate",
]

KINDS = ("cc", "bb", "cb", "tb", "ct", "tt", "co", "oo", "ob", "to")
RHO_DELTA = 1e-6
_ROLES = {
    "cc": ("c", "c"), "bb": ("b", "b"), "cb": ("b", "c"), "tb": ("t", "b"),
    "ct": ("t", "c"), "tt": ("t", "t"), "co": ("o", "c"), "oo": ("o", "o"),
    "ob": ("o", "b"), "to": ("t", "o"),
}
_LOOKUP = {}
for _k, (_a, _b) in _ROLES.items():
    _LOOKUP[(_a, _b)] = (_k, False)
    _LOOKUP.setdefault((_b, _a), (_k, True))

_R2 = np.sqrt(2.0)
_INV_R2 = 1.0 / _R2


class BridgeError(RuntimeError):
    pass


@dataclass(frozen=True)
class PairKind:
    """Canonical bridge kind for an ordered pair of variable types.

    ``swapped`` is True when the ordered pair ``(a, b)`` must be reversed to
    match the kind's role order.  The latent correlation is symmetric, so a
    swap only exchanges which cutoffs go into which slot.
    """

    kind: str
    swapped: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown pair kind {self.kind!r}")

    @classmethod
    def of(cls, type_a: VariableType, type_b: VariableType) -> "PairKind":
        kind, swapped = _LOOKUP[(type_a.code, type_b.code)]
        return cls(kind, swapped)

    @property
    def roles(self) -> tuple[str, str]:
        return _ROLES[self.kind]


@dataclass(frozen=True)
class CutoffVector:
    """Ordered latent thresholds for one component at one time.

    Length 1 for binary/truncated, ``levels - 1`` for ordinal, empty for
    continuous.  The implicit boundary thresholds are -inf and +inf.
    """

    component: int
    time: float
    thresholds: tuple = ()

    def __post_init__(self):
        th = np.asarray(self.thresholds, dtype=float)
        if th.ndim != 1:
            raise ValueError("thresholds must be one-dimensional")
        if np.any(np.isnan(th)) or np.any(np.diff(th) < 0):
            raise ValueError("thresholds must be nondecreasing")
        object.__setattr__(self, "thresholds", tuple(float(x) for x in th))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.thresholds, dtype=float)


# --------------------------------------------------------------------------
# special correlation matrices

def _mat_s3a(r):
    return [[1, 0, r * _INV_R2], [0, 1, _INV_R2], [r * _INV_R2, _INV_R2, 1]]


def _mat_s3b(r):
    return [[1, 0, -_INV_R2], [0, 1, -r * _INV_R2], [-_INV_R2, -r * _INV_R2, 1]]


def _mat_s3(r):
    return [[1, -r, -r * _INV_R2], [-r, 1, _INV_R2], [-r * _INV_R2, _INV_R2, 1]]


def _mat_s4a(r):
    return [
        [1, 0, _INV_R2, -r * _INV_R2],
        [0, 1, -r * _INV_R2, _INV_R2],
        [_INV_R2, -r * _INV_R2, 1, -r],
        [-r * _INV_R2, _INV_R2, -r, 1],
    ]


def _mat_s4b(r):
    return [
        [1, r, _INV_R2, r * _INV_R2],
        [r, 1, r * _INV_R2, _INV_R2],
        [_INV_R2, r * _INV_R2, 1, r],
        [r * _INV_R2, _INV_R2, r, 1],
    ]


def _mat_s5(r):
    return [
        [1, 0, 0, r * _INV_R2],
        [0, 1, -r, -r * _INV_R2],
        [0, -r, 1, _INV_R2],
        [r * _INV_R2, -r * _INV_R2, _INV_R2, 1],
    ]


# corrected matrices used by the truncated/binary, truncated/continuous and
# ordinal/continuous bridges
def _mat_s3a_tb(r):
    return [[1, -r, _INV_R2], [-r, 1, -r * _INV_R2], [_INV_R2, -r * _INV_R2, 1]]


def _mat_s3_ct(r):
    return [[1, _INV_R2, r * _INV_R2], [_INV_R2, 1, r], [r * _INV_R2, r, 1]]


def _mat_s3_co(r):
    return [[1, 0, r * _INV_R2], [0, 1, -r * _INV_R2], [r * _INV_R2, -r * _INV_R2, 1]]


_MATRICES = {
    "S3a": _mat_s3a, "S3b": _mat_s3b, "S3": _mat_s3, "S4a": _mat_s4a,
    "S4b": _mat_s4b, "S5": _mat_s5, "S3a_tb": _mat_s3a_tb, "S3_ct": _mat_s3_ct,
    "S3_co": _mat_s3_co,
}
# affine decomposition base + rho * slope
_AFFINE = {
    name: (np.asarray(fn(0.0), float), np.asarray(fn(1.0), float) - np.asarray(fn(0.0), float))
    for name, fn in _MATRICES.items()
}


def special_corr(kind: str, rho: float) -> CorrelationMatrix:
    """Structured correlation matrix ``kind`` evaluated at ``rho``."""
    if kind not in _MATRICES:
        raise ValueError(f"unknown special correlation kind {kind!r}")
    if not abs(rho) <= 1.0:
        raise ValueError("rho must lie in [-1, 1]")
    return CorrelationMatrix(_MATRICES[kind](float(rho)))


# --------------------------------------------------------------------------
# evaluation back ends
#
# Bridge formulas are written against an evaluator returning arrays of shape
# (rows, cols): the direct evaluator has one rho per row (cols == 1); the grid
# evaluator shares a theta grid across all rows (cols == n_nodes).

class _DirectEval:
    def __init__(self, rho):
        self.rho = np.asarray(rho, dtype=float)
        self.rows = self.rho.size

    def const(self, x):
        return np.asarray(x, dtype=float).reshape(self.rows, 1)

    def rho_cols(self):
        return self.rho.reshape(self.rows, 1)

    def phi2(self, a, b, c0, c1):
        r = np.clip(c0 + c1 * self.rho, -1.0, 1.0)
        return np.asarray(bvn_cdf(a, b, r), dtype=float).reshape(self.rows, 1)

    def phid(self, upper, name):
        base, slope = _AFFINE[name]
        return orthant_on_path(np.column_stack(upper), base, slope, self.rho).reshape(self.rows, 1)


class _GridEval:
    def __init__(self, rows, theta):
        self.rows = rows
        self.theta = np.asarray(theta, dtype=float)
        self.rho = np.sin(self.theta)

    def const(self, x):
        return np.broadcast_to(np.asarray(x, dtype=float).reshape(self.rows, 1),
                               (self.rows, self.theta.size))

    def rho_cols(self):
        return np.broadcast_to(self.rho[None, :], (self.rows, self.theta.size))

    def phi2(self, a, b, c0, c1):
        n = self.theta.size
        a = np.broadcast_to(np.asarray(a, float).reshape(-1, 1), (self.rows, n))
        b = np.broadcast_to(np.asarray(b, float).reshape(-1, 1), (self.rows, n))
        r = np.broadcast_to(np.clip(c0 + c1 * self.rho, -1.0, 1.0)[None, :], (self.rows, n))
        return np.asarray(bvn_cdf(a, b, r), dtype=float)

    def phid(self, upper, name):
        base, slope = _AFFINE[name]
        up = np.column_stack([np.broadcast_to(np.asarray(u, float), (self.rows,)) for u in upper])
        return orthant_on_path_grid(up, base, slope, self.theta)


def _ndtr(x):
    return special.ndtr(np.asarray(x, dtype=float))


def _extend(cuts):
    """Pad ordinal thresholds with the -inf / +inf boundaries (column-wise)."""
    rows = cuts.shape[0]
    return np.column_stack([np.full(rows, -np.inf), cuts, np.full(rows, np.inf)])


# --------------------------------------------------------------------------
# the ten bridges; dj, dk are (rows, L) arrays of thresholds

def _f_cc(ev, dj, dk):
    return (2.0 / np.pi) * np.arcsin(ev.rho_cols())


def _f_bb(ev, dj, dk):
    a, b = dj[:, 0], dk[:, 0]
    return 2.0 * (ev.phi2(a, b, 0.0, 1.0) - ev.const(_ndtr(a) * _ndtr(b)))


def _f_cb(ev, dj, dk):
    a = dj[:, 0]
    return 4.0 * ev.phi2(a, np.zeros_like(a), 0.0, _INV_R2) - ev.const(2.0 * _ndtr(a))


def _f_tb(ev, dj, dk):
    a, b = dj[:, 0], dk[:, 0]
    z = np.zeros_like(a)
    return (ev.const(2.0 * (1.0 - _ndtr(a)) * _ndtr(b))
            - 2.0 * ev.phid((-a, b, z), "S3a_tb")
            - 2.0 * ev.phid((-a, b, z), "S3b"))


def _f_ct(ev, dj, dk):
    a = dj[:, 0]
    z = np.zeros_like(a)
    const = bvn_cdf(-a, z, _INV_R2)
    return -2.0 * ev.const(const) + 4.0 * ev.phid((-a, z, z), "S3_ct")


def _f_tt(ev, dj, dk):
    a, b = dj[:, 0], dk[:, 0]
    z = np.zeros_like(a)
    return (-2.0 * ev.phid((-a, -b, z, z), "S4a")
            + 2.0 * ev.phid((-a, -b, z, z), "S4b"))


def _f_co(ev, dj, dk):
    d = _extend(dj)
    levels = d.shape[1] - 1
    z = np.zeros(d.shape[0])
    out = 0.0
    for r in range(1, levels):
        out = out + 4.0 * ev.phid((d[:, r], d[:, r + 1], z), "S3_co") \
            - ev.const(2.0 * _ndtr(d[:, r]) * _ndtr(d[:, r + 1]))
    return out


def _f_oo(ev, dj, dk):
    dj_, dk_ = _extend(dj), _extend(dk)
    lj, lk = dj_.shape[1] - 1, dk_.shape[1] - 1
    first = 0.0
    for r in range(1, lj):
        for s in range(1, lk):
            first = first + ev.phi2(dj_[:, r], dk_[:, s], 0.0, 1.0) * (
                ev.phi2(dj_[:, r + 1], dk_[:, s + 1], 0.0, 1.0)
                - ev.phi2(dj_[:, r + 1], dk_[:, s - 1], 0.0, 1.0))
    second = 0.0
    for r in range(1, lj):
        second = second + ev.const(_ndtr(dj_[:, r])) * ev.phi2(dj_[:, r + 1], dk_[:, lk - 1], 0.0, 1.0)
    return 2.0 * first - 2.0 * second


def _f_ob(ev, dj, dk):
    d = _extend(dj)
    b = dk[:, 0]
    levels = d.shape[1] - 1
    out = 0.0
    for r in range(1, levels):
        out = out + ev.phi2(d[:, r], b, 0.0, 1.0) * ev.const(_ndtr(d[:, r + 1])) \
            - ev.const(_ndtr(d[:, r])) * ev.phi2(d[:, r + 1], b, 0.0, 1.0)
    return 2.0 * out


def _f_to(ev, dj, dk):
    a = dj[:, 0]
    d = _extend(dk)
    levels = d.shape[1] - 1
    z = np.zeros_like(a)
    out = 2.0 * ev.phid((d[:, levels - 1], -a, z), "S3a")
    for r in range(1, levels):
        out = out - 2.0 * (ev.phid((d[:, r + 1], d[:, r], -a, z), "S5")
                           - ev.phid((d[:, r - 1], d[:, r], -a, z), "S5"))
    return out


_FORMS = {
    "cc": _f_cc, "bb": _f_bb, "cb": _f_cb, "tb": _f_tb, "ct": _f_ct,
    "tt": _f_tt, "co": _f_co, "oo": _f_oo, "ob": _f_ob, "to": _f_to,
}


def _as_kind(kind) -> str:
    k = kind.kind if isinstance(kind, PairKind) else str(kind)
    if k not in KINDS:
        raise ValueError(f"unknown pair kind {k!r}")
    return k


def _cut_array(cut, rows=None) -> np.ndarray:
    if cut is None:
        arr = np.zeros((0,))
    elif isinstance(cut, CutoffVector):
        arr = cut.as_array()
    else:
        arr = np.asarray(cut, dtype=float)
    if arr.ndim <= 1:
        arr = arr.reshape(1, -1)
        if rows is not None:
            arr = np.repeat(arr, rows, axis=0)
    return arr


def _check_cuts(kind: str, dj: np.ndarray, dk: np.ndarray):
    for role, cuts in zip(_ROLES[kind], (dj, dk)):
        width = cuts.shape[1]
        if role == "c" and width != 0:
            raise ValueError(f"continuous slot of kind {kind!r} takes no cutoffs")
        if role in ("b", "t") and width != 1:
            raise ValueError(f"{role!r} slot of kind {kind!r} takes exactly one cutoff")
        if role == "o" and width < 1:
            raise ValueError(f"ordinal slot of kind {kind!r} needs at least one cutoff")
        if role == "o" and np.any(np.diff(cuts, axis=1) < 0):
            raise ValueError("ordinal cutoffs must be nondecreasing")
        if np.any(np.isnan(cuts)):
            raise ValueError("cutoffs must not be NaN")


def is_degenerate(role: str, cuts) -> np.ndarray:
    """True where a margin carries no rank information (single observed level)."""
    c = np.atleast_2d(np.asarray(cuts, dtype=float))
    if role == "c":
        return np.zeros(c.shape[0], dtype=bool)
    if role == "t":
        return c[:, 0] == np.inf
    return ~np.any(np.isfinite(c), axis=1)


def bridge_tau(kind, rho, cut_j=None, cut_k=None) -> np.ndarray:
    """Vectorized bridge: population tau for arrays of ``rho`` and per-row cutoffs.

    Parameters
    ----------
    kind : str or PairKind
        Canonical kind; cutoffs are given in the kind's role order.
    rho : array_like, shape (B,)
    cut_j, cut_k : array_like, shape (B, L) or (L,)
    """
    k = _as_kind(kind)
    r = np.atleast_1d(np.asarray(rho, dtype=float))
    if np.any(np.abs(r) > 1.0):
        raise ValueError("rho must lie in [-1, 1]")
    dj = _cut_array(cut_j, r.size)
    dk = _cut_array(cut_k, r.size)
    if dj.shape[0] != r.size or dk.shape[0] != r.size:
        raise ValueError("cutoff rows must match rho")
    _check_cuts(k, dj, dk)
    if k == "cc":
        return (2.0 / np.pi) * np.arcsin(r)
    return np.asarray(_FORMS[k](_DirectEval(r), dj, dk), dtype=float).reshape(r.size)


def bridge_forward(rho: float, kind, cut_j=None, cut_k=None) -> float:
    """Population Kendall's tau of the observed pair at latent correlation ``rho``."""
    if not abs(rho) <= 1.0:
        raise ValueError("rho must lie in [-1, 1]")
    return float(bridge_tau(kind, [rho], cut_j, cut_k)[0])


def bridge_inverse(tau: float, kind, cut_j=None, cut_k=None, delta: float = RHO_DELTA) -> float:
    """Latent correlation whose bridged tau equals ``tau``.

    ``tau`` outside the attainable range ``[F(-1+delta), F(1-delta)]`` is
    clamped to the nearest endpoint.  Root finding is bracketed (Brent).
    """
    k = _as_kind(kind)
    lo, hi = -1.0 + delta, 1.0 - delta

    def f(r):
        return float(bridge_tau(k, [r], cut_j, cut_k)[0])

    f_lo, f_hi = f(lo), f(hi)
    if not f_lo < f_hi:
        raise BridgeError(
            f"bridge {k!r} is not increasing on [{lo}, {hi}]: F(lo)={f_lo!r}, F(hi)={f_hi!r}")
    t = float(np.clip(tau, f_lo, f_hi))
    if t == f_lo:
        return lo
    if t == f_hi:
        return hi
    root = optimize.brentq(lambda r: f(r) - t, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps,
                           maxiter=200)
    if abs(f(root) - t) > 1e-8:
        raise BridgeError(f"bridge inversion for {k!r} missed target: |F(rho)-tau|={abs(f(root) - t):.3g}")
    return float(root)


class BridgeTable:
    """Per-cell Chebyshev interpolants of a bridge in ``theta = asin(rho)``.

    Built once for a set of cells sharing a pair kind, then evaluated many
    times during surface fitting.  Values at the Chebyshev nodes come from the
    path-quadrature back end.

    Parameters
    ----------
    kind : str
    cut_j, cut_k : ndarray, shape (C, Lj) and (C, Lk)
        Per-cell cutoffs in the kind's role order.
    n_nodes : int
        Number of Chebyshev nodes.
    """

    RHO_MAX = 1.0 - 1e-9

    def __init__(self, kind, cut_j, cut_k, n_nodes: int = 32):
        self.kind = _as_kind(kind)
        dj = _cut_array(cut_j)
        dk = _cut_array(cut_k)
        rows = max(dj.shape[0], dk.shape[0])
        if dj.shape[0] == 1 and rows > 1:
            dj = np.repeat(dj, rows, axis=0)
        if dk.shape[0] == 1 and rows > 1:
            dk = np.repeat(dk, rows, axis=0)
        _check_cuts(self.kind, dj, dk)
        self.rows = rows
        self.theta_max = float(np.arcsin(self.RHO_MAX))
        x = np.cos(np.pi * (np.arange(n_nodes) + 0.5) / n_nodes)[::-1]
        self._x = x
        if self.kind == "cc":
            self.coef = None
            return
        ev = _GridEval(rows, self.theta_max * x)
        values = np.asarray(_FORMS[self.kind](ev, dj, dk), dtype=float)
        vander = np.polynomial.chebyshev.chebvander(x, n_nodes - 1)
        self.coef = np.linalg.solve(vander, values.T).T  # (C, n)
        self.dcoef = np.polynomial.chebyshev.chebder(self.coef.T).T / self.theta_max

    def _basis(self, theta):
        x = np.clip(theta / self.theta_max, -1.0, 1.0)
        n = self.coef.shape[1]
        t = np.empty((x.size, n))
        t[:, 0] = 1.0
        if n > 1:
            t[:, 1] = x
        for i in range(2, n):
            t[:, i] = 2.0 * x * t[:, i - 1] - t[:, i - 2]
        return t

    def value_and_slope(self, rho):
        """Return ``F(rho)`` and ``dF/dtheta`` per cell (``rho`` shape (C,))."""
        r = np.clip(np.asarray(rho, dtype=float), -self.RHO_MAX, self.RHO_MAX)
        theta = np.arcsin(r)
        if self.kind == "cc":
            return 2.0 * theta / np.pi, np.full_like(theta, 2.0 / np.pi)
        t = self._basis(theta)
        val = np.einsum("cn,cn->c", t, self.coef)
        slope = np.einsum("cn,cn->c", t[:, :-1], self.dcoef)
        return val, slope

    def __call__(self, rho):
        return self.value_and_slope(rho)[0]
