"""Balanced panel time-series data: loading, validation, normalization, lag windows.

A panel holds C units (e.g. countries) observed over the same T consecutive
integer time labels for N variables. All downstream estimation assumes this
balanced layout; anything else is rejected at load time with an error that
names the offending unit/row/column. Lag windows are always built within a
single unit's history and never cross unit boundaries.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np


class PanelError(ValueError):
    """Raised for malformed or inconsistent panel data."""


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class PanelDataset:
    """Balanced multi-unit multivariate time series.

    Attributes
    ----------
    units : tuple of str
        Unit identifiers, in a fixed order.
    variables : tuple of str
        Variable names (N >= 2).
    times : tuple of int
        Shared time labels, consecutive integers. Balance means every unit
        carries exactly these labels, so one list serves all units.
    values : np.ndarray
        Array of shape (C, T, N), float64, read-only, no missing entries.
    """

    units: tuple[str, ...]
    variables: tuple[str, ...]
    times: tuple[int, ...]
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "units", tuple(str(u) for u in self.units))
        object.__setattr__(self, "variables", tuple(str(v) for v in self.variables))
        object.__setattr__(self, "times", tuple(int(t) for t in self.times))
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3:
            raise PanelError(f"values must be 3-dimensional (unit, time, variable), got shape {values.shape}")
        C, T, N = values.shape
        if len(self.units) != C or len(self.times) != T or len(self.variables) != N:
            raise PanelError(
                f"axis labels do not match values shape {values.shape}: "
                f"{len(self.units)} units, {len(self.times)} times, {len(self.variables)} variables"
            )
        if N < 2:
            raise PanelError(f"panel needs at least 2 variables, got {N}")
        if len(set(self.units)) != C:
            raise PanelError("duplicate unit identifiers")
        if len(set(self.variables)) != N:
            raise PanelError("duplicate variable names")
        for a, b in zip(self.times, self.times[1:]):
            if b != a + 1:
                raise PanelError(f"time labels must be consecutive integers, found gap {a} -> {b}")
        if not np.isfinite(values).all():
            c, t, n = np.argwhere(~np.isfinite(values))[0]
            raise PanelError(
                f"non-finite value for unit {self.units[c]!r}, time {self.times[t]}, variable {self.variables[n]!r}"
            )
        object.__setattr__(self, "values", _readonly(values))

    @property
    def n_units(self) -> int:
        return len(self.units)

    @property
    def n_periods(self) -> int:
        return len(self.times)

    @property
    def n_variables(self) -> int:
        return len(self.variables)

    def time_index(self, label: int) -> int:
        """Position of a time label on the shared time axis."""
        i = int(label) - self.times[0]
        if i < 0 or i >= len(self.times):
            raise PanelError(f"time label {label} outside panel range {self.times[0]}..{self.times[-1]}")
        return i

    def variable_index(self, name: str) -> int:
        try:
            return self.variables.index(name)
        except ValueError:
            raise PanelError(f"unknown variable {name!r}; panel has {list(self.variables)}") from None


@dataclass(frozen=True)
class NormalizationStats:
    """Per-variable mean/std (population convention, divide-by-n)."""

    variables: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray
    convention: str = "population"

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != (len(self.variables),) or std.shape != (len(self.variables),):
            raise PanelError("normalization stats must have one mean/std per variable")
        if not (np.isfinite(mean).all() and np.isfinite(std).all()):
            raise PanelError("normalization stats must be finite")
        if (std <= 0).any():
            bad = self.variables[int(np.argmax(std <= 0))]
            raise PanelError(f"non-positive std for variable {bad!r}")
        object.__setattr__(self, "mean", _readonly(mean))
        object.__setattr__(self, "std", _readonly(std))

    def to_json_dict(self) -> dict:
        return {
            v: {"mean": float(m), "std": float(s)}
            for v, m, s in zip(self.variables, self.mean, self.std)
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "NormalizationStats":
        variables = tuple(doc)
        mean = np.array([doc[v]["mean"] for v in variables])
        std = np.array([doc[v]["std"] for v in variables])
        return cls(variables=variables, mean=mean, std=std)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "NormalizationStats":
        return cls.from_json_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class SplitSpec:
    """Inclusive train/validation time-label ranges; validation follows training."""

    train_range: tuple[int, int]
    validation_range: tuple[int, int]

    def __post_init__(self):
        tr = (int(self.train_range[0]), int(self.train_range[1]))
        va = (int(self.validation_range[0]), int(self.validation_range[1]))
        object.__setattr__(self, "train_range", tr)
        object.__setattr__(self, "validation_range", va)
        if tr[0] > tr[1]:
            raise PanelError(f"empty train range {tr}")
        if va[0] > va[1]:
            raise PanelError(f"empty validation range {va}")
        if va[0] <= tr[1]:
            raise PanelError(f"validation range {va} must start after train range {tr} ends")


@dataclass(frozen=True)
class LagWindow:
    """One forecasting target: p lagged input rows plus the target row, one unit.

    ``inputs[l - 1, j]`` is variable j at time ``target_time - l``; all p+1
    time points belong to the same unit.
    """

    unit: int
    target_time: int
    inputs: np.ndarray  # (p, N)
    target: np.ndarray  # (N,)


@dataclass(frozen=True)
class WindowSet:
    """Materialized lag windows in deterministic unit-major, time-ascending order.

    ``skipped`` counts requested targets whose lag window would reach before
    the unit's first observation.
    """

    lags: int
    unit_indices: np.ndarray  # (W,) int
    time_labels: np.ndarray   # (W,) int
    inputs: np.ndarray        # (W, p, N)
    targets: np.ndarray       # (W, N)
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.unit_indices)

    def __getitem__(self, w: int) -> LagWindow:
        return LagWindow(
            unit=int(self.unit_indices[w]),
            target_time=int(self.time_labels[w]),
            inputs=self.inputs[w],
            target=self.targets[w],
        )

    def __iter__(self) -> Iterator[LagWindow]:
        for w in range(len(self)):
            yield self[w]


def enumerate_windows(
    data: PanelDataset,
    lags: int,
    time_range: Optional[tuple[int, int]] = None,
) -> WindowSet:
    """Enumerate every lag window with target time inside ``time_range``.

    Parameters
    ----------
    data : PanelDataset
    lags : int
        Lag order p >= 1. Each window needs p observations immediately
        preceding the target within the same unit; targets whose window
        would precede the unit's first observation are skipped and counted.
    time_range : (int, int), optional
        Inclusive target-time interval; defaults to the full panel. Targets
        may draw lagged inputs from before the range (history is continuous
        within a unit), so a validation range uses training-year inputs.

    Returns
    -------
    WindowSet
        Unit-major, time-ascending; ``skipped`` reports unsatisfiable targets.
    """
    p = int(lags)
    if p < 1:
        raise PanelError(f"lag order must be >= 1, got {lags}")
    lo, hi = time_range if time_range is not None else (data.times[0], data.times[-1])
    lo, hi = max(int(lo), data.times[0]), min(int(hi), data.times[-1])
    C, T, N = data.values.shape
    first = data.times[0]
    # Valid target positions: inside the range and with p predecessors in the unit.
    requested = [t for t in range(lo, hi + 1)]
    valid = [t for t in requested if t - p >= first]
    skipped_per_unit = len(requested) - len(valid)
    if not valid:
        return WindowSet(
            lags=p,
            unit_indices=np.empty(0, dtype=np.intp),
            time_labels=np.empty(0, dtype=np.intp),
            inputs=np.empty((0, p, N)),
            targets=np.empty((0, N)),
            skipped=skipped_per_unit * C,
        )
    pos = np.array([t - first for t in valid], dtype=np.intp)  # (Wu,)
    lag_offsets = np.arange(1, p + 1, dtype=np.intp)
    unit_idx = np.repeat(np.arange(C, dtype=np.intp), len(pos))
    pos_rep = np.tile(pos, C)
    inputs = data.values[unit_idx[:, None], pos_rep[:, None] - lag_offsets[None, :], :]
    targets = data.values[unit_idx, pos_rep, :]
    labels = pos_rep + first
    return WindowSet(
        lags=p,
        unit_indices=unit_idx,
        time_labels=labels,
        inputs=np.ascontiguousarray(inputs),
        targets=np.ascontiguousarray(targets),
        skipped=skipped_per_unit * C,
    )


def fit_normalization(data: PanelDataset, split: SplitSpec) -> NormalizationStats:
    """Per-variable mean/std over all (unit, time) cells in the train range only.

    Population (divide-by-n) convention. A zero-variance variable on the
    training range is an error: it cannot be z-scored.
    """
    lo, hi = split.train_range
    i0, i1 = data.time_index(max(lo, data.times[0])), data.time_index(min(hi, data.times[-1]))
    if i1 < i0:
        raise PanelError(f"train range {split.train_range} does not intersect panel times")
    block = data.values[:, i0 : i1 + 1, :]  # (C, Ttrain, N)
    mean = block.mean(axis=(0, 1))
    std = block.std(axis=(0, 1))  # population: ddof=0
    if (std == 0).any():
        bad = data.variables[int(np.argmax(std == 0))]
        raise PanelError(f"variable {bad!r} is constant on the training range; cannot z-score")
    return NormalizationStats(variables=data.variables, mean=mean, std=std)


def apply_normalization(data: PanelDataset, stats: NormalizationStats) -> PanelDataset:
    """Z-score every cell with the given stats: (value - mean) / std.

    Applied uniformly to all ranges; validation cells normalized with
    training stats may legitimately exceed |z| > 3 and are never clipped.
    """
    if stats.variables != data.variables:
        raise PanelError(
            f"normalization stats are for {list(stats.variables)} but panel has {list(data.variables)}"
        )
    z = (data.values - stats.mean) / stats.std
    return PanelDataset(units=data.units, variables=data.variables, times=data.times, values=z)


def invert_normalization(data: PanelDataset, stats: NormalizationStats) -> PanelDataset:
    """Undo :func:`apply_normalization` with the same stats."""
    if stats.variables != data.variables:
        raise PanelError("normalization stats do not match panel variables")
    raw = data.values * stats.std + stats.mean
    return PanelDataset(units=data.units, variables=data.variables, times=data.times, values=raw)


@dataclass(frozen=True)
class PanelSchema:
    """Column mapping for the panel CSV format.

    When ``variables`` is None, every column other than the unit and time
    columns is taken as a variable, in file order.
    """

    unit_column: str = "unit"
    time_column: str = "time"
    variables: Optional[tuple[str, ...]] = None


def load_panel_csv(path, schema: PanelSchema = PanelSchema()) -> PanelDataset:
    """Load and validate a balanced panel from CSV.

    The file must contain a header with the unit column, the time column and
    one column per variable; rows may appear in any order but must cover the
    full unit x time grid exactly once. Errors name the offending row (1-based,
    header = row 1), column, unit or time label.
    """
    path = Path(path)
    if not path.exists():
        raise PanelError(f"panel CSV not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PanelError(f"empty CSV: {path}") from None
        header = [h.strip() for h in header]
        for col in (schema.unit_column, schema.time_column):
            if col not in header:
                raise PanelError(f"missing required column {col!r} in {path} (header: {header})")
        if schema.variables is None:
            variables = tuple(h for h in header if h not in (schema.unit_column, schema.time_column))
        else:
            variables = tuple(schema.variables)
            for v in variables:
                if v not in header:
                    raise PanelError(f"variable column {v!r} not found in {path}")
        if len(variables) < 2:
            raise PanelError(f"need at least 2 variable columns, found {list(variables)}")
        u_col = header.index(schema.unit_column)
        t_col = header.index(schema.time_column)
        v_cols = [header.index(v) for v in variables]

        cells: dict[tuple[str, int], list[float]] = {}
        units_order: list[str] = []
        seen_units: set[str] = set()
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise PanelError(f"{path}:{row_no}: expected {len(header)} fields, got {len(row)}")
            unit = row[u_col].strip()
            if not unit:
                raise PanelError(f"{path}:{row_no}: empty unit identifier")
            t_raw = row[t_col].strip()
            try:
                t_float = float(t_raw)
            except ValueError:
                raise PanelError(f"{path}:{row_no}: non-numeric time label {t_raw!r}") from None
            if not t_float.is_integer():
                raise PanelError(f"{path}:{row_no}: fractional time label {t_raw!r}; integer labels required")
            t = int(t_float)
            key = (unit, t)
            if key in cells:
                raise PanelError(f"{path}:{row_no}: duplicate (unit, time) pair ({unit!r}, {t})")
            vals = []
            for v_name, c in zip(variables, v_cols):
                raw = row[c].strip()
                if raw == "":
                    raise PanelError(f"{path}:{row_no}: missing value in column {v_name!r}")
                try:
                    x = float(raw)
                except ValueError:
                    raise PanelError(f"{path}:{row_no}: non-numeric value {raw!r} in column {v_name!r}") from None
                if not math.isfinite(x):
                    raise PanelError(f"{path}:{row_no}: non-finite value {raw!r} in column {v_name!r}")
                vals.append(x)
            cells[key] = vals
            if unit not in seen_units:
                seen_units.add(unit)
                units_order.append(unit)

    if not cells:
        raise PanelError(f"no data rows in {path}")
    times_by_unit = {u: sorted(t for (uu, t) in cells if uu == u) for u in units_order}
    ref_unit = units_order[0]
    ref_times = times_by_unit[ref_unit]
    for u in units_order:
        if times_by_unit[u] != ref_times:
            missing = sorted(set(ref_times) - set(times_by_unit[u]))
            extra = sorted(set(times_by_unit[u]) - set(ref_times))
            detail = []
            if missing:
                detail.append(f"missing times {missing}")
            if extra:
                detail.append(f"extra times {extra}")
            raise PanelError(
                f"unbalanced panel: unit {u!r} has {', '.join(detail)} relative to unit {ref_unit!r}"
            )
    values = np.empty((len(units_order), len(ref_times), len(variables)))
    for ci, u in enumerate(units_order):
        for ti, t in enumerate(ref_times):
            values[ci, ti, :] = cells[(u, t)]
    return PanelDataset(units=tuple(units_order), variables=variables, times=tuple(ref_times), values=values)


def write_panel_csv(
    data: PanelDataset,
    path,
    schema: PanelSchema = PanelSchema(),
) -> None:
    """Write a panel in the CSV format accepted by :func:`load_panel_csv`.

    Rows are unit-major, time-ascending; floats use shortest round-trip
    decimal form, so load -> write -> load is bit-identical.
    """
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([schema.unit_column, schema.time_column, *data.variables])
        for ci, unit in enumerate(data.units):
            for ti, t in enumerate(data.times):
                writer.writerow([unit, t, *(repr(float(x)) for x in data.values[ci, ti, :])])
