"""Core data types and ingestion of irregular mixed-type functional observations."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "VariableType",
    "Observation",
    "MixedDataset",
    "DataError",
    "ParseError",
    "ValidationError",
    "regular_grid",
    "load_dataset",
    "save_dataset",
]


class DataError(ValueError):
    """Base class for dataset ingestion errors."""


class ParseError(DataError):
    pass


class ValidationError(DataError):
    def __init__(self, message, offending=()):
        super().__init__(message)
        self.offending = list(offending)


_TYPE_CODES = {"continuous": "c", "truncated": "t", "ordinal": "o", "binary": "b"}


@dataclass(frozen=True)
class VariableType:
    """Observed variable type of one component.

    Parameters
    ----------
    name : {"continuous", "truncated", "ordinal", "binary"}
    levels : int, optional
        Number of ordinal levels (>= 2).  Binary variables have 2 levels
        implicitly and are kept distinct from ``ordinal(2)``.
    """

    name: str
    levels: int | None = None

    def __post_init__(self):
        if self.name not in _TYPE_CODES:
            raise ValueError(f"unknown variable type {self.name!r}")
        if self.name == "ordinal":
            if self.levels is None or int(self.levels) != self.levels or self.levels < 2:
                raise ValueError("ordinal variables need an integer number of levels >= 2")
            object.__setattr__(self, "levels", int(self.levels))
        elif self.name == "binary":
            object.__setattr__(self, "levels", 2)
        elif self.levels is not None:
            raise ValueError(f"{self.name} variables take no levels")

    @classmethod
    def continuous(cls):
        return cls("continuous")

    @classmethod
    def truncated(cls):
        return cls("truncated")

    @classmethod
    def ordinal(cls, levels: int):
        return cls("ordinal", levels)

    @classmethod
    def binary(cls):
        return cls("binary")

    @property
    def code(self) -> str:
        return _TYPE_CODES[self.name]

    @property
    def n_cutoffs(self) -> int:
        if self.name == "continuous":
            return 0
        if self.name == "ordinal":
            return self.levels - 1
        return 1

    def valid(self, values) -> np.ndarray:
        """Boolean mask of type-consistent values."""
        v = np.asarray(values, dtype=float)
        ok = np.isfinite(v)
        if self.name == "truncated":
            ok &= v >= 0
        elif self.name in ("ordinal", "binary"):
            ok &= (v == np.round(v)) & (v >= 0) & (v <= self.levels - 1)
        return ok

    def to_dict(self) -> dict:
        d = {"type": self.name}
        if self.name == "ordinal":
            d["levels"] = self.levels
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VariableType":
        name = d["type"]
        return cls(name, d.get("levels") if name == "ordinal" else None)


@dataclass(frozen=True)
class Observation:
    subject_id: str
    component: int
    time: float
    value: float


@dataclass(frozen=True, eq=False)
class MixedDataset:
    """Immutable long-form container of mixed-type functional observations.

    Observations are stored column-wise.  ``subject`` indexes ``subject_ids``
    and ``component`` is zero-based.

    Attributes
    ----------
    subject_ids : tuple of str
    types : tuple of VariableType
    names : tuple of str
    subject, component : ndarray of int
    time, value : ndarray of float
    pooled_times : ndarray
        Sorted unique observation times.
    """

    subject_ids: tuple
    types: tuple
    subject: np.ndarray
    component: np.ndarray
    time: np.ndarray
    value: np.ndarray
    names: tuple = ()
    time_range: tuple = (0.0, 1.0)
    pooled_times: np.ndarray = field(init=False)

    def __post_init__(self):
        subj = np.asarray(self.subject, dtype=np.int64)
        comp = np.asarray(self.component, dtype=np.int64)
        time = np.asarray(self.time, dtype=float)
        value = np.asarray(self.value, dtype=float)
        if not (subj.shape == comp.shape == time.shape == value.shape) or subj.ndim != 1:
            raise ValidationError("observation columns must be 1-d and equally long")
        if subj.size == 0:
            raise ValidationError("no observations")
        J = len(self.types)
        if np.any((comp < 0) | (comp >= J)):
            raise ValidationError("component index out of range")
        if np.any((subj < 0) | (subj >= len(self.subject_ids))):
            raise ValidationError("subject index out of range")
        if np.any(~np.isfinite(time)) or np.any((time < 0) | (time > 1)):
            raise ValidationError("times must lie in [0, 1] after normalization")
        bad = []
        for j, vt in enumerate(self.types):
            sel = np.flatnonzero(comp == j)
            for i in sel[~vt.valid(value[sel])]:
                bad.append((self.subject_ids[subj[i]], j + 1, float(time[i]), float(value[i])))
        if bad:
            listed = "; ".join(f"(subject={s}, component={c}, time={t:g}): value {v:g}"
                               for s, c, t, v in bad[:20])
            more = f" and {len(bad) - 20} more" if len(bad) > 20 else ""
            raise ValidationError(f"type violation at {listed}{more}", bad)
        order = np.lexsort((time, comp, subj))
        subj, comp, time, value = subj[order], comp[order], time[order], value[order]
        dup = (np.diff(subj) == 0) & (np.diff(comp) == 0) & (np.diff(time) == 0)
        if np.any(dup):
            idx = np.flatnonzero(dup)
            trip = [(self.subject_ids[subj[i]], int(comp[i]) + 1, float(time[i])) for i in idx]
            raise ValidationError(
                "duplicate (subject, component, time) triples: "
                + "; ".join(f"({s}, {c}, {t:g})" for s, c, t in trip[:20]), trip)
        for name, arr in (("subject", subj), ("component", comp), ("time", time), ("value", value)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        names = tuple(self.names) if self.names else tuple(f"X{j + 1}" for j in range(J))
        if len(names) != J:
            raise ValidationError("one name per component required")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "types", tuple(self.types))
        object.__setattr__(self, "subject_ids", tuple(str(s) for s in self.subject_ids))
        pooled = np.unique(time)
        pooled.setflags(write=False)
        object.__setattr__(self, "pooled_times", pooled)

    @property
    def n(self) -> int:
        return len(self.subject_ids)

    @property
    def J(self) -> int:
        return len(self.types)

    def __len__(self) -> int:
        return self.value.size

    def __eq__(self, other):
        if not isinstance(other, MixedDataset):
            return NotImplemented
        return (self.subject_ids == other.subject_ids and self.types == other.types
                and self.names == other.names
                and all(np.array_equal(getattr(self, a), getattr(other, a))
                        for a in ("subject", "component", "time", "value")))

    def observations(self) -> Iterable[Observation]:
        for s, c, t, v in zip(self.subject, self.component, self.time, self.value):
            yield Observation(self.subject_ids[s], int(c) + 1, float(t), float(v))

    @classmethod
    def from_observations(cls, observations: Iterable[Observation], types: Sequence[VariableType],
                          names: Sequence[str] = ()) -> "MixedDataset":
        obs = list(observations)
        ids = sorted({o.subject_id for o in obs}, key=str)
        lookup = {s: i for i, s in enumerate(ids)}
        return cls(
            subject_ids=tuple(ids),
            types=tuple(types),
            subject=np.array([lookup[o.subject_id] for o in obs], dtype=np.int64),
            component=np.array([o.component - 1 for o in obs], dtype=np.int64),
            time=np.array([o.time for o in obs], dtype=float),
            value=np.array([o.value for o in obs], dtype=float),
            names=tuple(names),
        )

    @classmethod
    def from_dense(cls, values: np.ndarray, times: np.ndarray, types: Sequence[VariableType],
                   names: Sequence[str] = (), subject_ids: Sequence[str] | None = None) -> "MixedDataset":
        """Build from an ``(n, J, T)`` array where NaN marks a missing observation."""
        values = np.asarray(values, dtype=float)
        n, J, T = values.shape
        i, j, r = np.nonzero(~np.isnan(values))
        ids = tuple(subject_ids) if subject_ids is not None else tuple(f"s{k:05d}" for k in range(n))
        return cls(ids, tuple(types), i, j, np.asarray(times, float)[r], values[i, j, r], tuple(names))

    def time_index(self, grid: np.ndarray | None = None) -> np.ndarray:
        """Index of each observation time in ``grid`` (default ``pooled_times``).

        Times are snapped to the nearest grid point.
        """
        g = self.pooled_times if grid is None else np.asarray(grid, dtype=float)
        if grid is None:
            return np.searchsorted(g, self.time)
        pos = np.clip(np.searchsorted(g, self.time), 1, max(g.size - 1, 1))
        if g.size == 1:
            return np.zeros(self.time.size, dtype=np.int64)
        left = g[pos - 1]
        right = g[pos]
        return np.where(self.time - left <= right - self.time, pos - 1, pos)

    def dense(self, grid: np.ndarray | None = None) -> np.ndarray:
        """Return an ``(n, J, T)`` array with NaN for unobserved cells.

        With an explicit ``grid`` observations snap to the nearest grid point;
        if several land in one cell the one closest in time is kept.
        """
        g = self.pooled_times if grid is None else np.asarray(grid, dtype=float)
        idx = self.time_index(grid)
        out = np.full((self.n, self.J, g.size), np.nan)
        if grid is None:
            out[self.subject, self.component, idx] = self.value
            return out
        dist = np.abs(self.time - g[idx])
        # write farthest first so the closest observation wins
        order = np.argsort(-dist, kind="stable")
        out[self.subject[order], self.component[order], idx[order]] = self.value[order]
        return out


def regular_grid(m: int) -> np.ndarray:
    """``m`` equidistant points spanning [0, 1] inclusive."""
    if int(m) != m or m < 2:
        raise ValueError("grid size m must be an integer >= 2")
    return np.linspace(0.0, 1.0, int(m))


def _read_sidecar(path) -> tuple[list[str], list[VariableType], tuple[float, float]]:
    with open(path) as fh:
        meta = json.load(fh)
    comps = meta.get("components")
    if not comps:
        raise ParseError(f"{path}: sidecar declares no components")
    names, types = [], []
    for c in comps:
        names.append(str(c["name"]))
        types.append(VariableType.from_dict(c))
    if len(set(names)) != len(names):
        raise ParseError(f"{path}: component names must be unique")
    a, b = (float(x) for x in meta.get("time_range", (0.0, 1.0)))
    if not b > a:
        raise ParseError(f"{path}: time_range must be increasing")
    return names, types, (a, b)


def load_dataset(path, sidecar=None, schema: dict | None = None,
                 types: Sequence[VariableType] | None = None) -> MixedDataset:
    """Load a long-form CSV of observations.

    Parameters
    ----------
    path : path-like
        CSV file with a header row.
    sidecar : path-like, optional
        JSON declaring component names/types and ``time_range``.  Defaults to
        ``<path>.json`` next to the CSV, falling back to ``<stem>.json``.
    schema : dict, optional
        Column mapping for ``subject_id``, ``component``, ``time``, ``value``.
    types : sequence of VariableType, optional
        Overrides the sidecar types (names become ``X1..XJ``).

    The component column holds either a declared component name or a 1-based
    index.  Times are mapped affinely from ``time_range`` to [0, 1].
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    cols = {"subject_id": "subject_id", "component": "component", "time": "time", "value": "value"}
    if schema:
        cols.update(schema)
    time_range = (0.0, 1.0)
    names: list[str] = []
    if sidecar is None:
        for cand in (path.with_name(path.name + ".json"), path.with_suffix(".json")):
            if cand.exists():
                sidecar = cand
                break
    if sidecar is not None:
        names, sc_types, time_range = _read_sidecar(sidecar)
        if types is None:
            types = sc_types
    if types is None:
        raise ValidationError("component types must be declared (sidecar JSON or types=)")
    types = list(types)
    if not names:
        names = [f"X{j + 1}" for j in range(len(types))]
    if len(names) != len(types):
        raise ValidationError("number of names and types differ")
    name_index = {nm: j for j, nm in enumerate(names)}

    subj_raw, comp, time, value = [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValidationError("no observations")
        missing = [c for c in cols.values() if c not in reader.fieldnames]
        if missing:
            raise ParseError(f"{path}: missing columns {missing}")
        for row_no, row in enumerate(reader, start=2):
            try:
                sid = row[cols["subject_id"]]
                cname = row[cols["component"]]
                if sid is None or cname is None:
                    raise ValueError("too few fields")
                sid = sid.strip()
                if not sid:
                    raise ValueError("empty subject id")
                cname = cname.strip()
                if cname in name_index:
                    j = name_index[cname]
                else:
                    j = int(cname) - 1
                    if not 0 <= j < len(types):
                        raise ValueError(f"unknown component {cname!r}")
                t = float(row[cols["time"]])
                v = float(row[cols["value"]])
                if not np.isfinite(t):
                    raise ValueError("non-finite time")
            except (TypeError, ValueError) as exc:
                raise ParseError(f"{path}: row {row_no}: {exc}") from None
            subj_raw.append(sid)
            comp.append(j)
            time.append(t)
            value.append(v)
    if not value:
        raise ValidationError("no observations")
    a, b = time_range
    t = (np.asarray(time) - a) / (b - a)
    t = np.where(np.abs(t) < 1e-12, 0.0, np.where(np.abs(t - 1) < 1e-12, 1.0, t))
    ids = sorted(set(subj_raw))
    lookup = {s: i for i, s in enumerate(ids)}
    return MixedDataset(
        subject_ids=tuple(ids),
        types=tuple(types),
        subject=np.array([lookup[s] for s in subj_raw], dtype=np.int64),
        component=np.asarray(comp, dtype=np.int64),
        time=t,
        value=np.asarray(value, dtype=float),
        names=tuple(names),
        time_range=(a, b),
    )


def save_dataset(data: MixedDataset, path, sidecar=None) -> tuple[Path, Path]:
    """Write ``data`` as CSV plus JSON sidecar; times are written on [0, 1].

    Values and times use ``repr`` so reloading is exact.
    """
    path = Path(path)
    sidecar = Path(sidecar) if sidecar is not None else path.with_name(path.name + ".json")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "component", "time", "value"])
        for s, c, t, v in zip(data.subject, data.component, data.time, data.value):
            w.writerow([data.subject_ids[s], data.names[c], repr(float(t)), repr(float(v))])
    meta = {
        "components": [dict(name=nm, **vt.to_dict()) for nm, vt in zip(data.names, data.types)],
        "time_range": [0.0, 1.0],
    }
    with open(sidecar, "w") as fh:
        json.dump(meta, fh, indent=2)
    return path, sidecar
