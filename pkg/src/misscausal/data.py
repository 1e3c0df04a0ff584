"""Observed-data representation, CSV ingestion and missingness transformations."""

from __future__ import annotations

import csv
import hashlib
import os
import tempfile
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class DataError(ValueError):
    """Base class for problems with an input dataset."""


class MissingOutcome(DataError):
    pass


class NonBinary(DataError):
    pass


class UnknownColumn(DataError):
    pass


SCHEMES = ("simultaneous_block", "separate_block", "sequential_covariates")


def _readonly(arr, dtype):
    arr = np.array(arr, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class ObservedDataset:
    """Units of ``(Y, R_A, R_A*A, L_O, R_L, R_L*L_M)``.

    Missing values of ``a`` and ``l_m`` are stored as NaN. ``lm_groups`` maps
    every ``l_m`` column to the index of its observation indicator in ``r_l``,
    so indicator columns of one categorical covariate share one indicator.
    Arrays are read-only after construction.
    """

    y: np.ndarray
    a: np.ndarray
    l_o: np.ndarray
    l_m: np.ndarray
    r_a: np.ndarray
    r_l: np.ndarray
    lo_names: tuple[str, ...] = ()
    lm_names: tuple[str, ...] = ()
    lm_groups: tuple[int, ...] | None = None
    group_names: tuple[str, ...] | None = None
    _key: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        n = len(np.asarray(self.y))
        y = _readonly(self.y, float)
        a = _readonly(self.a, float)
        l_o = _readonly(np.asarray(self.l_o, dtype=float).reshape(n, -1), float)
        l_m = _readonly(np.asarray(self.l_m, dtype=float).reshape(n, -1), float)
        r_a = _readonly(self.r_a, np.int8)
        groups = tuple(range(l_m.shape[1])) if self.lm_groups is None else tuple(int(g) for g in self.lm_groups)
        q = (max(groups) + 1) if groups else 0
        r_l = _readonly(np.asarray(self.r_l, dtype=np.int8).reshape(n, q), np.int8)
        lo_names = tuple(self.lo_names) or tuple(f"lo{j + 1}" for j in range(l_o.shape[1]))
        lm_names = tuple(self.lm_names) or tuple(f"lm{j + 1}" for j in range(l_m.shape[1]))
        if self.group_names is None:
            gnames = tuple("+".join(lm_names[j] for j in range(len(groups)) if groups[j] == g) for g in range(q))
        else:
            gnames = tuple(self.group_names)
        for attr, val in (("y", y), ("a", a), ("l_o", l_o), ("l_m", l_m), ("r_a", r_a), ("r_l", r_l),
                          ("lm_groups", groups), ("lo_names", lo_names), ("lm_names", lm_names),
                          ("group_names", gnames)):
            object.__setattr__(self, attr, val)
        self._validate()

    def _validate(self):
        n = self.n
        if self.a.shape != (n,) or self.r_a.shape != (n,) or self.l_o.shape[0] != n or self.l_m.shape[0] != n:
            raise DataError("inconsistent array lengths")
        if len(self.lo_names) != self.l_o.shape[1] or len(self.lm_names) != self.l_m.shape[1]:
            raise DataError("column names do not match covariate arrays")
        if len(self.lm_groups) != self.l_m.shape[1] or sorted(set(self.lm_groups)) != list(range(self.q)):
            raise DataError("lm_groups must label every l_m column with a group 0..q-1")
        if np.any(np.isnan(self.y)):
            raise MissingOutcome("outcome has missing entries")
        if np.any(np.isnan(self.l_o)):
            raise DataError("fully observed covariates contain missing entries")
        for name, arr in (("r_a", self.r_a), ("r_l", self.r_l)):
            if not np.all((arr == 0) | (arr == 1)):
                raise NonBinary(f"{name} must be 0/1")
        if not np.all(np.isin(self.y, (0.0, 1.0))):
            raise NonBinary("outcome must be binary")
        obs_a = self.r_a == 1
        if np.any(np.isnan(self.a[obs_a])) or np.any(~np.isnan(self.a[~obs_a])):
            raise DataError("a must be present exactly when r_a = 1")
        if not np.all(np.isin(self.a[obs_a], (0.0, 1.0))):
            raise NonBinary("exposure must be binary")
        present = self.r_l[:, list(self.lm_groups)] == 1 if self.q else np.ones((n, 0), dtype=bool)
        if np.any(np.isnan(self.l_m) & present) or np.any(~np.isnan(self.l_m) & ~present):
            raise DataError("l_m entries must be present exactly when their indicator is 1")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def q(self) -> int:
        return self.r_l.shape[1]

    @property
    def column_names(self) -> tuple[str, ...]:
        return self.lo_names + self.lm_names

    def group_columns(self, g: int) -> list[int]:
        return [j for j, gg in enumerate(self.lm_groups) if gg == g]

    def complete_mask(self) -> np.ndarray:
        return (self.r_a == 1) & np.all(self.r_l == 1, axis=1)

    def is_complete(self) -> bool:
        return bool(np.all(self.complete_mask()))

    def fingerprint(self) -> str:
        """Content hash identifying the dataset (used to match estimates)."""
        if not self._key:
            h = hashlib.sha1()
            for arr in (self.y, np.nan_to_num(self.a, nan=-1), self.l_o, np.nan_to_num(self.l_m, nan=-1),
                        self.r_a, self.r_l):
                h.update(np.ascontiguousarray(arr).tobytes())
            self._key.append(h.hexdigest())
        return self._key[0]

    def replace(self, **kw) -> "ObservedDataset":
        fields = dict(y=self.y, a=self.a, l_o=self.l_o, l_m=self.l_m, r_a=self.r_a, r_l=self.r_l,
                      lo_names=self.lo_names, lm_names=self.lm_names, lm_groups=self.lm_groups,
                      group_names=self.group_names)
        fields.update(kw)
        return ObservedDataset(**fields)

    def take(self, idx) -> "ObservedDataset":
        idx = np.asarray(idx)
        return self.replace(y=self.y[idx], a=self.a[idx], l_o=self.l_o[idx], l_m=self.l_m[idx],
                            r_a=self.r_a[idx], r_l=self.r_l[idx])

    def row_matrix(self) -> np.ndarray:
        """All fields as one float matrix with NaN replaced by a sentinel (for grouping rows)."""
        mat = np.column_stack([self.y, self.a, self.l_o, self.l_m, self.r_a, self.r_l])
        return np.where(np.isnan(mat), -1e300, mat)

    def compress(self):
        """Collapse identical units.

        Returns ``(unique, counts, inverse)`` such that ``unique.take(inverse)``
        reproduces the dataset and ``counts`` are the multiplicities.
        """
        _, first, inverse, counts = np.unique(self.row_matrix(), axis=0, return_index=True,
                                              return_inverse=True, return_counts=True)
        return self.take(first), counts.astype(float), inverse.reshape(-1)


def fully_observed(y, a, l_o, l_m=None, lo_names=(), lm_names=()) -> ObservedDataset:
    """Convenience constructor for complete data."""
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    l_m = np.zeros((n, 0)) if l_m is None else np.asarray(l_m, dtype=float).reshape(n, -1)
    return ObservedDataset(y=y, a=a, l_o=np.asarray(l_o, dtype=float).reshape(n, -1), l_m=l_m,
                           r_a=np.ones(n), r_l=np.ones((n, l_m.shape[1])), lo_names=lo_names, lm_names=lm_names)


def from_arrays(y, a, l_o, l_m, *, lo_names=(), lm_names=(), lm_groups=None) -> ObservedDataset:
    """Build a dataset from arrays where NaN marks a missing exposure or covariate."""
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    a = np.asarray(a, dtype=float)
    l_m = np.asarray(l_m, dtype=float).reshape(n, -1)
    groups = list(range(l_m.shape[1])) if lm_groups is None else list(lm_groups)
    q = max(groups) + 1 if groups else 0
    r_l = np.ones((n, q), dtype=np.int8)
    for j, g in enumerate(groups):
        r_l[:, g] &= (~np.isnan(l_m[:, j])).astype(np.int8)
    lm = l_m.copy()
    for j, g in enumerate(groups):
        lm[r_l[:, g] == 0, j] = np.nan
    return ObservedDataset(y=y, a=a, l_o=np.asarray(l_o, dtype=float).reshape(n, -1), l_m=lm,
                           r_a=(~np.isnan(a)).astype(np.int8), r_l=r_l, lo_names=lo_names,
                           lm_names=lm_names, lm_groups=groups)


def _mask_values(data: ObservedDataset, r_a, r_l) -> ObservedDataset:
    a = np.where(r_a == 1, data.a, np.nan)
    l_m = data.l_m.copy()
    for j, g in enumerate(data.lm_groups):
        l_m[r_l[:, g] == 0, j] = np.nan
    return data.replace(a=a, l_m=l_m, r_a=r_a, r_l=r_l)


def resolve_ordering(data: ObservedDataset, ordering: Sequence | None) -> list[int]:
    """Validate an ordering of the covariate groups; names or 0-based indices are accepted."""
    if ordering is None:
        return list(range(data.q))
    out = []
    for item in ordering:
        if isinstance(item, str):
            if item in data.group_names:
                out.append(data.group_names.index(item))
            elif item in data.lm_names:
                out.append(data.lm_groups[data.lm_names.index(item)])
            else:
                raise UnknownColumn(f"ordering references unknown covariate {item!r}")
        else:
            out.append(int(item))
    if sorted(out) != list(range(data.q)):
        raise ValueError(f"ordering {list(ordering)} is not a permutation of the {data.q} covariate groups")
    return out


def coarsen_monotone(data: ObservedDataset, ordering: Sequence | None = None) -> ObservedDataset:
    """Treat a covariate as missing whenever any covariate earlier in ``ordering`` is missing."""
    order = resolve_ordering(data, ordering)
    if data.q == 0:
        return data
    r_l = np.array(data.r_l)
    running = np.ones(data.n, dtype=np.int8)
    for g in order:
        running = running & r_l[:, g]
        r_l[:, g] = running
    return _mask_values(data, np.array(data.r_a), r_l)


def collapse_block(data: ObservedDataset) -> ObservedDataset:
    """Single indicator R = r_a * prod(r_l) governing the exposure and all of l_m."""
    R = (data.r_a * np.prod(data.r_l, axis=1, dtype=np.int8)).astype(np.int8)
    r_l = np.repeat(R[:, None], data.q, axis=1)
    return _mask_values(data, R, r_l)


def apply_scheme(data: ObservedDataset, scheme: str, ordering=None) -> ObservedDataset:
    if scheme == "simultaneous_block":
        return collapse_block(data)
    if scheme == "separate_block":
        return data
    if scheme == "sequential_covariates":
        return coarsen_monotone(data, ordering)
    raise ValueError(f"unknown missingness scheme {scheme!r}; expected one of {SCHEMES}")


# ---------------------------------------------------------------- CSV


@dataclass(frozen=True)
class ColumnRoles:
    """Maps CSV columns to roles.

    ``missing`` entries are column names, or lists of names forming one
    categorical covariate that shares an observation indicator.
    """

    outcome: str
    exposure: str
    observed: tuple[str, ...] = ()
    missing: tuple = ()
    missing_token: str = ""

    def missing_groups(self) -> list[list[str]]:
        return [[m] if isinstance(m, str) else list(m) for m in self.missing]


def _parse_cell(raw, token, col, row):
    s = raw.strip()
    if s == "" or s == token:
        return np.nan
    try:
        return float(s)
    except ValueError:
        raise DataError(f"row {row}: column {col!r} has non-numeric value {raw!r}") from None


def load_csv(path, roles: ColumnRoles) -> ObservedDataset:
    """Read a header-first CSV; empty cells (or ``roles.missing_token``) are missing."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    groups = roles.missing_groups()
    lm_cols = [c for grp in groups for c in grp]
    wanted = [roles.outcome, roles.exposure, *roles.observed, *lm_cols]
    for col in wanted:
        if col not in header:
            raise UnknownColumn(f"column {col!r} not found in {path}")
    if len(set(wanted)) != len(wanted):
        raise DataError("a column is assigned to more than one role")
    pos = {c: header.index(c) for c in wanted}
    tok = roles.missing_token
    values = {c: np.empty(len(rows)) for c in wanted}
    for i, r in enumerate(rows, start=2):
        if len(r) != len(header):
            raise DataError(f"row {i}: expected {len(header)} cells, found {len(r)}")
        for c in wanted:
            values[c][i - 2] = _parse_cell(r[pos[c]], tok, c, i)
    y = values[roles.outcome]
    if np.any(np.isnan(y)):
        bad = int(np.flatnonzero(np.isnan(y))[0]) + 2
        raise MissingOutcome(f"row {bad}: outcome {roles.outcome!r} is missing")
    for c in (roles.outcome, roles.exposure):
        v = values[c]
        if not np.all(np.isin(v[~np.isnan(v)], (0.0, 1.0))):
            raise NonBinary(f"column {c!r} must be 0/1")
    for c in roles.observed:
        if np.any(np.isnan(values[c])):
            raise DataError(f"fully observed covariate {c!r} has missing cells")
    n = len(rows)
    lm = np.column_stack([values[c] for c in lm_cols]) if lm_cols else np.zeros((n, 0))
    lm_groups = [g for g, grp in enumerate(groups) for _ in grp]
    lo = np.column_stack([values[c] for c in roles.observed]) if roles.observed else np.zeros((n, 0))
    r_l = np.ones((n, len(groups)), dtype=np.int8)
    for j, g in enumerate(lm_groups):
        r_l[:, g] &= (~np.isnan(lm[:, j])).astype(np.int8)
    for j, g in enumerate(lm_groups):
        partial = np.isnan(lm[:, j]) != (r_l[:, g] == 0)
        if np.any(partial):
            raise DataError(f"categorical covariate {groups[g]} is only partly missing in some rows")
    a = values[roles.exposure]
    return ObservedDataset(y=y, a=a, l_o=lo, l_m=lm, r_a=(~np.isnan(a)).astype(np.int8), r_l=r_l,
                           lo_names=tuple(roles.observed), lm_names=tuple(lm_cols), lm_groups=lm_groups,
                           group_names=tuple("+".join(g) for g in groups))


def format_value(v: float) -> str:
    if np.isnan(v):
        return ""
    if float(v).is_integer():
        return str(int(v))
    return repr(float(v))


def atomic_write_text(path, text: str):
    """Write via a temporary file in the same directory, then rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(data: ObservedDataset, path, roles: ColumnRoles):
    """Write ``data`` with the column names of ``roles`` (missing cells use the sentinel)."""
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    lm_cols = [c for grp in roles.missing_groups() for c in grp]
    writer.writerow([roles.outcome, roles.exposure, *roles.observed, *lm_cols])
    tok = roles.missing_token
    for i in range(data.n):
        cells = [data.y[i], data.a[i], *data.l_o[i], *data.l_m[i]]
        writer.writerow([format_value(v) if not np.isnan(v) else tok for v in cells])
    atomic_write_text(path, buf.getvalue())
