"""Cohort records, datasets, and the CSV schemas for study files.

Main-study files carry one row per subject::

    id,time,event,z_90,...,z_2100,w_1,...,w_k

Validation-study files carry one row per (subject, occasion)::

    id,occasion,x,z_90,...,z_2100,w_1,...,w_k

Buffer radii are encoded in the ``z_<radius>`` header names and must be
strictly increasing.  Files are UTF-8, comma-separated, ``.`` decimal point,
header row mandatory, no quoting.  Missing cells are errors: the analyses
this package supports are complete-case.
"""

import csv
from dataclasses import dataclass, field

import numpy as np


class ParseError(ValueError):
    """CSV content violates the schema; message carries row/column coordinates."""


@dataclass(frozen=True)
class SurvivalRecord:
    """One main-study subject."""

    id: str
    z: np.ndarray
    w: np.ndarray
    time: float
    event: int


@dataclass(frozen=True)
class ValidationRecord:
    """One validation-study observation (subject x occasion)."""

    id: str
    occasion: int
    x: float
    z: np.ndarray
    w: np.ndarray


DEFAULT_RADII = (90.0, 150.0, 270.0, 510.0, 750.0, 990.0, 1230.0, 1500.0, 2100.0)


def _format_radius(r):
    return str(int(r)) if float(r).is_integer() else repr(float(r))


@dataclass(frozen=True)
class MainDataset:
    """Immutable, array-backed main-study cohort.

    Row order is exactly the file/order of construction and is preserved by
    every operation in this package.
    """

    ids: np.ndarray
    time: np.ndarray
    event: np.ndarray
    z: np.ndarray
    w: np.ndarray
    radii: np.ndarray
    confounder_names: tuple = field(default=("w_1",))

    def __post_init__(self):
        if np.any(np.diff(self.radii) <= 0):
            raise ParseError("buffer radii must be strictly increasing")
        if self.z.shape[1] != len(self.radii):
            raise ParseError("z width does not match radii count")

    def __len__(self):
        return len(self.time)

    def records(self):
        for i in range(len(self)):
            yield SurvivalRecord(
                id=str(self.ids[i]), z=self.z[i], w=self.w[i],
                time=float(self.time[i]), event=int(self.event[i]),
            )


@dataclass(frozen=True)
class ValidationDataset:
    """Immutable, array-backed validation cohort with repeated measurements."""

    ids: np.ndarray
    occasion: np.ndarray
    x: np.ndarray
    z: np.ndarray
    w: np.ndarray
    radii: np.ndarray
    confounder_names: tuple = field(default=("w_1",))

    def __post_init__(self):
        if np.any(np.diff(self.radii) <= 0):
            raise ParseError("buffer radii must be strictly increasing")
        if self.z.shape[1] != len(self.radii):
            raise ParseError("z width does not match radii count")

    def __len__(self):
        return len(self.x)

    def subject_groups(self):
        """Row-index arrays grouped by subject id, in first-appearance order."""
        groups = {}
        for i, sid in enumerate(self.ids):
            groups.setdefault(sid, []).append(i)
        return {sid: np.asarray(rows) for sid, rows in groups.items()}

    def records(self):
        for i in range(len(self)):
            yield ValidationRecord(
                id=str(self.ids[i]), occasion=int(self.occasion[i]),
                x=float(self.x[i]), z=self.z[i], w=self.w[i],
            )


def _parse_header(header, leading, path):
    for k, name in enumerate(leading):
        if k >= len(header) or header[k] != name:
            raise ParseError(f"{path}: expected column {k + 1} to be '{name}'")
    radii, z_cols = [], []
    k = len(leading)
    while k < len(header) and header[k].startswith("z_"):
        try:
            radii.append(float(header[k][2:]))
        except ValueError as exc:
            raise ParseError(f"{path}: bad radius in header '{header[k]}'") from exc
        z_cols.append(k)
        k += 1
    if not z_cols:
        raise ParseError(f"{path}: no z_<radius> columns found")
    w_cols = list(range(k, len(header)))
    if not w_cols:
        raise ParseError(f"{path}: no confounder columns found")
    w_names = tuple(header[k] for k in w_cols)
    return np.asarray(radii), z_cols, w_cols, w_names


def _cell(row, col_idx, header, rownum, path):
    try:
        return float(row[col_idx])
    except (ValueError, IndexError) as exc:
        raise ParseError(
            f"{path}: row {rownum}, column '{header[col_idx]}': "
            f"non-numeric or missing cell"
        ) from exc


def read_main_csv(path):
    """Parse a main-study CSV into a :class:`MainDataset`.

    Subjects with time <= 0 are rejected: a zero follow-up time would place
    nobody meaningfully at risk and the convention for it is undefined.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        radii, z_cols, w_cols, w_names = _parse_header(header, ("id", "time", "event"), path)
        ids, times, events, zs, ws = [], [], [], [], []
        for rownum, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(f"{path}: row {rownum}: expected {len(header)} cells, got {len(row)}")
            t = _cell(row, 1, header, rownum, path)
            if not np.isfinite(t) or t <= 0:
                raise ParseError(f"{path}: row {rownum}, column 'time': must be finite and > 0")
            d = _cell(row, 2, header, rownum, path)
            if d not in (0.0, 1.0):
                raise ParseError(f"{path}: row {rownum}, column 'event': must be 0 or 1")
            ids.append(row[0])
            times.append(t)
            events.append(int(d))
            zs.append([_cell(row, k, header, rownum, path) for k in z_cols])
            ws.append([_cell(row, k, header, rownum, path) for k in w_cols])
    return MainDataset(
        ids=np.asarray(ids, dtype=object), time=np.asarray(times),
        event=np.asarray(events, dtype=int), z=np.asarray(zs).reshape(len(ids), len(z_cols)),
        w=np.asarray(ws).reshape(len(ids), len(w_cols)),
        radii=radii, confounder_names=w_names,
    )


def read_validation_csv(path):
    """Parse a validation-study CSV into a :class:`ValidationDataset`.

    Confounders may vary across occasions within a subject; only duplicate
    (id, occasion) pairs are rejected.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        radii, z_cols, w_cols, w_names = _parse_header(header, ("id", "occasion", "x"), path)
        ids, occ, xs, zs, ws = [], [], [], [], []
        seen = set()
        for rownum, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(f"{path}: row {rownum}: expected {len(header)} cells, got {len(row)}")
            o = _cell(row, 1, header, rownum, path)
            if not float(o).is_integer():
                raise ParseError(f"{path}: row {rownum}, column 'occasion': must be an integer")
            key = (row[0], int(o))
            if key in seen:
                raise ParseError(f"{path}: row {rownum}: duplicate (id, occasion) pair {key}")
            seen.add(key)
            ids.append(row[0])
            occ.append(int(o))
            xs.append(_cell(row, 2, header, rownum, path))
            zs.append([_cell(row, k, header, rownum, path) for k in z_cols])
            ws.append([_cell(row, k, header, rownum, path) for k in w_cols])
    return ValidationDataset(
        ids=np.asarray(ids, dtype=object), occasion=np.asarray(occ, dtype=int),
        x=np.asarray(xs), z=np.asarray(zs).reshape(len(ids), len(z_cols)),
        w=np.asarray(ws).reshape(len(ids), len(w_cols)),
        radii=radii, confounder_names=w_names,
    )


def write_main_csv(path, dataset):
    """Write a :class:`MainDataset` using the canonical schema, 12 significant digits."""
    header = (["id", "time", "event"]
              + [f"z_{_format_radius(r)}" for r in dataset.radii]
              + list(dataset.confounder_names))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(len(dataset)):
            writer.writerow(
                [dataset.ids[i], f"{dataset.time[i]:.12g}", dataset.event[i]]
                + [f"{v:.12g}" for v in dataset.z[i]]
                + [f"{v:.12g}" for v in dataset.w[i]]
            )


def write_validation_csv(path, dataset):
    """Write a :class:`ValidationDataset` using the canonical schema."""
    header = (["id", "occasion", "x"]
              + [f"z_{_format_radius(r)}" for r in dataset.radii]
              + list(dataset.confounder_names))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(len(dataset)):
            writer.writerow(
                [dataset.ids[i], dataset.occasion[i], f"{dataset.x[i]:.12g}"]
                + [f"{v:.12g}" for v in dataset.z[i]]
                + [f"{v:.12g}" for v in dataset.w[i]]
            )


def risk_set_indices(time, event):
    """Risk sets {j : T_j >= T_i} for every event record, via one sort.

    Ties between an event and a censoring time keep the censored subject in
    the risk set.  Returns a list of (event_index, index_array) pairs in the
    original row order of the events.
    """
    time = np.asarray(time, dtype=float)
    event = np.asarray(event)
    if len(time) == 0:
        raise ValueError("dataset is empty")
    order = np.argsort(time, kind="stable")
    sorted_times = time[order]
    out = []
    for i in np.flatnonzero(event == 1):
        pos = np.searchsorted(sorted_times, time[i], side="left")
        out.append((int(i), np.sort(order[pos:])))
    return out
