"""Multivariate longitudinal functional datasets: containers, CSV I/O and partitioning.

Curves are stored densely as a ``(N_total, P, G)`` array on a grid shared by every
dimension and observation.  Each observation carries a key
``(subject_id, side, stride_index, long_time)`` and the subject-side covariates are
looked up in a :class:`CovariateTable`.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

SIDES = ("left", "right")
CURVE_COLUMNS = ["subject_id", "side", "stride", "T_raw", "dimension", "t", "value"]
FLOAT_FORMAT = "%.17g"


class DataError(ValueError):
    """Raised when input data violate the dataset invariants."""


def _frozen(a, dtype=None) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class MvCurve:
    """One multivariate curve, ``values[p, g]`` observed at ``grid[g]``."""

    values: np.ndarray
    grid: np.ndarray

    def __post_init__(self):
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        grid = np.asarray(self.grid, dtype=float)
        if values.shape[1] != grid.size:
            raise DataError("curve values and grid disagree in length")
        if not np.all(np.isfinite(values)):
            raise DataError("non-finite curve values")
        if grid.size > 1 and np.any(np.diff(grid) <= 0):
            raise DataError("grid must be strictly increasing")
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "grid", _frozen(grid))

    @property
    def n_dims(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class ObservationKey:
    subject_id: str
    side: str
    stride_index: int
    long_time: float


@dataclass(frozen=True, eq=False)
class CovariateTable:
    """Scalar covariates keyed by ``(subject_id, side)``."""

    names: tuple
    rows: Mapping

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        rows = {}
        for (sid, side), vec in self.rows.items():
            vec = _frozen(vec, dtype=float).reshape(-1)
            if vec.size != len(names):
                raise DataError(f"covariate row for {sid}/{side} has {vec.size} entries, expected {len(names)}")
            if not np.all(np.isfinite(vec)):
                raise DataError(f"non-finite covariates for {sid}/{side}")
            rows[(str(sid), str(side))] = vec
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "rows", rows)

    def row(self, subject_id: str, side: str) -> np.ndarray:
        try:
            return self.rows[(subject_id, side)]
        except KeyError:
            raise DataError(f"unresolved covariates for {subject_id}/{side}") from None

    def matrix(self, subject_ids: Sequence[str], sides: Sequence[str], names: Sequence[str] | None = None) -> np.ndarray:
        """Stack covariate rows for parallel key arrays, optionally selecting columns by name."""
        cols = self.indices(names)
        out = np.empty((len(subject_ids), len(cols)))
        cache = {}
        for n, key in enumerate(zip(subject_ids, sides)):
            if key not in cache:
                cache[key] = self.row(*key)[cols]
            out[n] = cache[key]
        return out

    def indices(self, names: Sequence[str] | None) -> list:
        if names is None:
            return list(range(len(self.names)))
        missing = [n for n in names if n not in self.names]
        if missing:
            raise DataError(f"unknown covariate names: {missing}")
        return [self.names.index(n) for n in names]


@dataclass(frozen=True, eq=False)
class MvLongDataset:
    """Immutable multivariate longitudinal functional dataset.

    Parameters
    ----------
    values : ndarray, shape (N_total, P, G)
        Curve values per observation, dimension and grid point.
    grid : ndarray, shape (G,)
        Common functional grid (strictly increasing, typically ``0..100``).
    subject_ids, sides, strides, long_time : array-like, shape (N_total,)
        Observation keys.  ``(subject_id, side, stride)`` must be unique and the
        longitudinal time must increase with the stride index within a subject-side.
    covariates : CovariateTable
        Must resolve every ``(subject_id, side)`` present.
    dim_names : sequence of str
        Names of the ``P`` dimensions.
    exclusions : tuple of dict
        Subjects dropped upstream, as ``{"subject_id", "reason"}`` records.
    """

    values: np.ndarray
    grid: np.ndarray
    subject_ids: np.ndarray
    sides: np.ndarray
    strides: np.ndarray
    long_time: np.ndarray
    covariates: CovariateTable
    dim_names: tuple
    exclusions: tuple = field(default=())

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 3:
            raise DataError("values must have shape (N_total, P, G)")
        n, p, g = values.shape
        grid = np.asarray(self.grid, dtype=float).reshape(-1)
        if grid.size != g:
            raise DataError("ragged grid: values and grid disagree")
        if g > 1 and np.any(np.diff(grid) <= 0):
            raise DataError("grid must be strictly increasing")
        if not np.all(np.isfinite(values)):
            raise DataError("non-finite curve values")
        sids = np.array([str(s) for s in self.subject_ids], dtype=object)
        sides = np.array([str(s) for s in self.sides], dtype=object)
        strides = np.asarray(self.strides, dtype=np.int64).reshape(-1)
        ltime = np.asarray(self.long_time, dtype=float).reshape(-1)
        if not (sids.size == sides.size == strides.size == ltime.size == n):
            raise DataError("observation keys must be parallel to the curves")
        if not np.all(np.isfinite(ltime)):
            raise DataError("non-finite longitudinal time")
        bad_side = set(sides.tolist()) - set(SIDES)
        if bad_side:
            raise DataError(f"side must be one of {SIDES}, got {sorted(bad_side)}")
        if np.any(strides < 1):
            raise DataError("stride indices must be positive")
        dim_names = tuple(str(d) for d in self.dim_names)
        if len(dim_names) != p:
            raise DataError("dim_names must name every dimension")
        if n:
            frame = pd.DataFrame({"s": sids, "j": sides, "l": strides, "T": ltime})
            if frame.duplicated(["s", "j", "l"]).any():
                raise DataError("duplicate (subject, side, stride) keys")
            frame = frame.sort_values(["s", "j", "l"], kind="stable")
            same = (frame["s"].values[1:] == frame["s"].values[:-1]) & (frame["j"].values[1:] == frame["j"].values[:-1])
            if np.any(np.diff(frame["T"].values)[same] <= 0):
                raise DataError("longitudinal time must strictly increase with stride index within subject-side")
            for key in set(zip(sids.tolist(), sides.tolist())):
                self.covariates.row(*key)
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "grid", _frozen(grid))
        object.__setattr__(self, "subject_ids", _frozen(sids))
        object.__setattr__(self, "sides", _frozen(sides))
        object.__setattr__(self, "strides", _frozen(strides))
        object.__setattr__(self, "long_time", _frozen(ltime))
        object.__setattr__(self, "dim_names", dim_names)
        object.__setattr__(self, "exclusions", tuple(dict(e) for e in self.exclusions))

    # -- bookkeeping ------------------------------------------------------------
    @property
    def n_total(self) -> int:
        return self.values.shape[0]

    @property
    def n_dims(self) -> int:
        return self.values.shape[1]

    @property
    def n_grid(self) -> int:
        return self.values.shape[2]

    @property
    def keys(self) -> list:
        return [
            ObservationKey(s, j, int(l), float(T))
            for s, j, l, T in zip(self.subject_ids, self.sides, self.strides, self.long_time)
        ]

    @property
    def curves(self) -> list:
        return [MvCurve(v, self.grid) for v in self.values]

    @property
    def subjects(self) -> list:
        """Distinct subject ids in order of first appearance."""
        return list(dict.fromkeys(self.subject_ids.tolist()))

    @property
    def groups(self) -> list:
        """Distinct ``(subject_id, side)`` pairs in order of first appearance."""
        return list(dict.fromkeys(zip(self.subject_ids.tolist(), self.sides.tolist())))

    def group_sizes(self) -> dict:
        """Stride count ``n_ij`` per subject-side."""
        sizes = {}
        for key in zip(self.subject_ids.tolist(), self.sides.tolist()):
            sizes[key] = sizes.get(key, 0) + 1
        return sizes

    def covariate_matrix(self, names: Sequence[str] | None = None) -> np.ndarray:
        return self.covariates.matrix(self.subject_ids, self.sides, names)

    def take(self, index) -> "MvLongDataset":
        """Sub-dataset of the selected observations (boolean mask or integer index)."""
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return replace(
            self,
            values=self.values[index],
            subject_ids=self.subject_ids[index],
            sides=self.sides[index],
            strides=self.strides[index],
            long_time=self.long_time[index],
        )

    def with_values(self, values: np.ndarray) -> "MvLongDataset":
        return replace(self, values=values)

    def sorted(self) -> "MvLongDataset":
        """Canonical order: subject, side, stride."""
        order = np.lexsort((self.strides, self.sides.astype(str), self.subject_ids.astype(str)))
        return self.take(order)


# -- ingestion ------------------------------------------------------------------
def load_dataset(curve_file, covariate_file, dim_names: Sequence[str] | None = None) -> MvLongDataset:
    """Read the long-format curve CSV and the covariate CSV into a validated dataset."""
    curves = pd.read_csv(curve_file, dtype={"subject_id": str, "side": str, "dimension": str}, float_precision="round_trip")
    missing = [c for c in CURVE_COLUMNS if c not in curves.columns]
    if missing:
        raise DataError(f"curve file lacks columns {missing}")
    covs = pd.read_csv(covariate_file, dtype={"subject_id": str, "side": str}, float_precision="round_trip")
    if list(covs.columns[:2]) != ["subject_id", "side"]:
        raise DataError("covariate file must start with subject_id,side")
    names = [str(c) for c in covs.columns[2:]]
    if covs.duplicated(["subject_id", "side"]).any():
        raise DataError("duplicate covariate rows")
    table = CovariateTable(
        names,
        {(r[0], r[1]): np.asarray(r[2:], dtype=float) for r in covs.itertuples(index=False, name=None)},
    )
    return _curves_from_frame(curves, table, dim_names)


def _curves_from_frame(curves: pd.DataFrame, table: CovariateTable, dim_names) -> MvLongDataset:
    for col in ("T_raw", "t", "value"):
        if not np.all(np.isfinite(curves[col].to_numpy(dtype=float))):
            raise DataError(f"non-finite values in column {col}")
    if curves.duplicated(["subject_id", "side", "stride", "dimension", "t"]).any():
        raise DataError("duplicate (subject, side, stride, dimension, t) rows")
    if dim_names is None:
        dim_names = list(dict.fromkeys(curves["dimension"].tolist()))
    unknown = set(curves["dimension"]) - set(dim_names)
    if unknown:
        raise DataError(f"undeclared dimensions {sorted(unknown)}")
    if curves.empty:
        raise DataError("empty curve file")
    frame = curves.assign(_dim=curves["dimension"].map({d: i for i, d in enumerate(dim_names)}))
    frame = frame.sort_values(["subject_id", "side", "stride", "_dim", "t"], kind="stable")
    counts = frame.groupby(["subject_id", "side", "stride"], sort=False).size()
    sizes = frame.groupby(["subject_id", "side", "stride", "_dim"], sort=False).size()
    n_dims = len(dim_names)
    if sizes.nunique() != 1 or (counts != n_dims * sizes.iloc[0]).any():
        raise DataError("ragged grid: curves have differing numbers of grid points or dimensions")
    n_grid = int(sizes.iloc[0])
    n_obs = counts.size
    t = frame["t"].to_numpy(dtype=float).reshape(n_obs * n_dims, n_grid)
    grid = t[0]
    if not np.array_equal(t, np.broadcast_to(grid, t.shape)):
        raise DataError("ragged grid: curves are observed on different grids")
    T_raw = frame["T_raw"].to_numpy(dtype=float).reshape(n_obs, n_dims * n_grid)
    if np.any(T_raw != T_raw[:, :1]):
        raise DataError("T_raw must be constant within a stride")
    keys = frame[["subject_id", "side", "stride"]].to_numpy()[:: n_dims * n_grid]
    values = frame["value"].to_numpy(dtype=float).reshape(n_obs, n_dims, n_grid)
    return MvLongDataset(
        values=values,
        grid=grid,
        subject_ids=keys[:, 0],
        sides=keys[:, 1],
        strides=keys[:, 2].astype(np.int64),
        long_time=T_raw[:, 0],
        covariates=table,
        dim_names=tuple(dim_names),
    )


def save_dataset(dataset: MvLongDataset, curve_file, covariate_file) -> None:
    """Write the dataset in the long curve CSV and covariate CSV formats (17 significant digits)."""
    n, p, g = dataset.values.shape
    frame = pd.DataFrame(
        {
            "subject_id": np.repeat(dataset.subject_ids, p * g),
            "side": np.repeat(dataset.sides, p * g),
            "stride": np.repeat(dataset.strides, p * g),
            "T_raw": np.repeat(dataset.long_time, p * g),
            "dimension": np.tile(np.repeat(np.array(dataset.dim_names, dtype=object), g), n),
            "t": np.tile(dataset.grid, n * p),
            "value": dataset.values.reshape(-1),
        }
    )
    frame.to_csv(curve_file, index=False, float_format=FLOAT_FORMAT)
    groups = sorted(set(dataset.groups) | set(dataset.covariates.rows))
    cov = pd.DataFrame(
        [[s, j, *dataset.covariates.rows[(s, j)]] for s, j in groups if (s, j) in dataset.covariates.rows],
        columns=["subject_id", "side", *dataset.covariates.names],
    )
    cov.to_csv(covariate_file, index=False, float_format=FLOAT_FORMAT)


def write_exclusion_report(path, exclusions: Iterable[Mapping]) -> None:
    Path(path).write_text(json.dumps([dict(e) for e in exclusions], indent=2) + "\n")


# -- transformations ------------------------------------------------------------
def normalize_long_time(dataset: MvLongDataset) -> MvLongDataset:
    """Divide each subject's longitudinal times by that subject's maximum."""
    T = dataset.long_time
    out = np.empty_like(T)
    for sid in dataset.subjects:
        mask = dataset.subject_ids == sid
        tmax = T[mask].max()
        if T[mask].min() < 0:
            raise DataError(f"negative longitudinal time for subject {sid}")
        if tmax <= 0:
            raise DataError(f"subject {sid} has zero maximum longitudinal time")
        out[mask] = T[mask] / tmax
    return replace(dataset, long_time=out)


def center_dataset(dataset: MvLongDataset) -> tuple:
    """Subtract the pointwise sample mean; returns ``(mean_curve, centered_dataset)``."""
    if dataset.n_total < 2:
        raise DataError("centering needs at least two observations")
    mean = dataset.values.mean(axis=0)
    return MvCurve(mean, dataset.grid), dataset.with_values(dataset.values - mean)


def split_test(dataset: MvLongDataset, holdout_per_side: int, seed: int) -> tuple:
    """Hold out ``holdout_per_side`` random strides from every subject-side.

    Subjects with fewer than ``2 * holdout_per_side`` strides on either side, or
    observed on a single side, are excluded; the exclusions are logged and
    recorded on both returned datasets.  Randomness comes from a Philox stream
    so the partition is reproducible across platforms.
    """
    if holdout_per_side < 1:
        raise ValueError("holdout_per_side must be at least 1")
    sizes = dataset.group_sizes()
    exclusions = list(dataset.exclusions)
    keep_subjects = []
    for sid in dataset.subjects:
        counts = [sizes.get((sid, side), 0) for side in SIDES]
        if min(counts) < 2 * holdout_per_side:
            reason = f"fewer than {2 * holdout_per_side} strides on a side (left={counts[0]}, right={counts[1]})"
            exclusions.append({"subject_id": sid, "reason": reason})
            logger.warning("excluding subject %s: %s", sid, reason)
        else:
            keep_subjects.append(sid)
    rng = np.random.Generator(np.random.Philox(seed))
    test_mask = np.zeros(dataset.n_total, dtype=bool)
    keep_mask = np.isin(dataset.subject_ids, np.array(keep_subjects, dtype=object))
    for sid in sorted(keep_subjects):
        for side in SIDES:
            idx = np.flatnonzero((dataset.subject_ids == sid) & (dataset.sides == side))
            idx = idx[np.argsort(dataset.strides[idx], kind="stable")]
            test_mask[rng.choice(idx, size=holdout_per_side, replace=False)] = True
    train = replace(dataset.take(keep_mask & ~test_mask), exclusions=tuple(exclusions))
    test = replace(dataset.take(test_mask), exclusions=tuple(exclusions))
    return train, test
