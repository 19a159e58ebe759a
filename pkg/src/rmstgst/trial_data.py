"""Subject-level trial data and calendar-time snapshots.

A record stores follow-up as of the data lock: ``followup_time`` is the
time from study entry to event or censoring, whichever came first, and
``event`` says which. A snapshot rolls the dataset back to an earlier
calendar time ``u`` by capping each subject's follow-up at ``u - entry``
and dropping subjects not yet enrolled. Follow-up can only be shortened
this way; records carry no information beyond their own lock.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

__all__ = [
    "SubjectRecord",
    "CsvSchema",
    "Snapshot",
    "ingest_csv",
    "snapshot",
    "snapshot_from_arrays",
    "standardize_covariates",
]


@dataclass(frozen=True)
class SubjectRecord:
    """One subject as of the data lock.

    Attributes:
        subject_id: identifier, unique within a dataset.
        arm: 0 for control, 1 for treatment.
        entry_time: calendar time of study entry (years, >= 0).
        followup_time: time on study until event or censoring (years, >= 0).
        event: 1 if followup_time ended in the event, 0 if censored.
        covariates: baseline covariate values, possibly empty.
    """

    subject_id: str
    arm: int
    entry_time: float
    followup_time: float
    event: int
    covariates: tuple[float, ...] = ()

    def __post_init__(self):
        if self.arm not in (0, 1):
            raise DataError(f"arm must be 0 or 1, got {self.arm!r}")
        if self.event not in (0, 1):
            raise DataError(f"event must be 0 or 1, got {self.event!r}")
        if not (math.isfinite(self.entry_time) and self.entry_time >= 0):
            raise DataError(f"entry_time must be finite and >= 0, got {self.entry_time!r}")
        if not (math.isfinite(self.followup_time) and self.followup_time >= 0):
            raise DataError(f"followup_time must be finite and >= 0, got {self.followup_time!r}")
        if any(not math.isfinite(z) for z in self.covariates):
            raise DataError(f"covariates must be finite, got {self.covariates!r}")


@dataclass(frozen=True)
class CsvSchema:
    """Column-name map for :func:`ingest_csv`.

    ``covariates`` lists covariate column names in order; ``None`` means
    every column not otherwise mapped is a covariate, in file order. An
    empty tuple means no covariates.
    """

    subject_id: str = "id"
    arm: str = "arm"
    entry_time: str = "entry_time"
    followup_time: str = "followup_time"
    event: str = "event"
    covariates: tuple[str, ...] | None = None

    def to_dict(self) -> dict:
        return {
            "id": self.subject_id,
            "arm": self.arm,
            "entry_time": self.entry_time,
            "followup_time": self.followup_time,
            "event": self.event,
            "covariates": list(self.covariates) if self.covariates is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CsvSchema":
        known = {"id", "arm", "entry_time", "followup_time", "event", "covariates"}
        extra = set(d) - known
        if extra:
            raise DataError(f"unknown schema keys: {sorted(extra)}")
        cov = d.get("covariates")
        return cls(
            subject_id=d.get("id", "id"),
            arm=d.get("arm", "arm"),
            entry_time=d.get("entry_time", "entry_time"),
            followup_time=d.get("followup_time", "followup_time"),
            event=d.get("event", "event"),
            covariates=tuple(cov) if cov is not None else None,
        )


def _parse_float(raw: str, what: str) -> float:
    try:
        value = float(raw)
    except (TypeError, ValueError):
        raise ValueError(f"{what} is not numeric: {raw!r}")
    if not math.isfinite(value):
        raise ValueError(f"{what} is not finite: {raw!r}")
    return value


def _parse_binary(raw: str, what: str) -> int:
    value = _parse_float(raw, what)
    if value not in (0.0, 1.0):
        raise ValueError(f"{what} must be 0 or 1: {raw!r}")
    return int(value)


def ingest_csv(path, schema: CsvSchema | None = None) -> list[SubjectRecord]:
    """Read subject records from a CSV file.

    Every row must parse cleanly; offending rows are reported by file
    line number and all collected before raising, so one pass surfaces
    every problem.

    Raises:
        DataError: missing columns, unparseable or invalid rows,
            duplicate subject ids, or an empty file.
    """
    schema = schema or CsvSchema()
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file (no header row)")
        header = list(reader.fieldnames)
        needed = [schema.subject_id, schema.arm, schema.entry_time, schema.followup_time, schema.event]
        if schema.covariates is not None:
            needed += list(schema.covariates)
        missing = [c for c in needed if c not in header]
        if missing:
            raise DataError(f"{path}: missing columns {missing}; header has {header}")
        if schema.covariates is None:
            mapped = set(needed)
            cov_cols = [c for c in header if c not in mapped]
        else:
            cov_cols = list(schema.covariates)

        records: list[SubjectRecord] = []
        problems: list[str] = []
        seen_ids: set[str] = set()
        for line_no, row in enumerate(reader, start=2):
            try:
                sid = row.get(schema.subject_id)
                if sid is None or sid == "":
                    raise ValueError("missing id")
                if sid in seen_ids:
                    raise ValueError(f"duplicate id {sid!r}")
                rec = SubjectRecord(
                    subject_id=sid,
                    arm=_parse_binary(row.get(schema.arm), "arm"),
                    entry_time=_parse_float(row.get(schema.entry_time), "entry_time"),
                    followup_time=_parse_float(row.get(schema.followup_time), "followup_time"),
                    event=_parse_binary(row.get(schema.event), "event"),
                    covariates=tuple(
                        _parse_float(row.get(c), f"covariate {c!r}") for c in cov_cols
                    ),
                )
            except (ValueError, DataError) as exc:
                problems.append(f"line {line_no}: {exc}")
                continue
            seen_ids.add(sid)
            records.append(rec)

    if problems:
        shown = "\n  ".join(problems[:20])
        more = f"\n  ... and {len(problems) - 20} more" if len(problems) > 20 else ""
        raise DataError(f"{path}: {len(problems)} bad row(s)\n  {shown}{more}")
    if not records:
        raise DataError(f"{path}: no data rows")
    return records


class Snapshot:
    """The dataset as observable at calendar time ``u``, analyzed to horizon ``tau``.

    Holds read-only arrays over the subjects enrolled strictly before
    ``u``: ``arm``, capped follow-up ``time``, event indicator ``event``,
    and the covariate matrix ``z`` of shape (n, p).
    """

    __slots__ = ("u", "tau", "arm", "time", "event", "z", "n0", "n1")

    def __init__(self, u, tau, arm, time, event, z):
        u = float(u)
        tau = float(tau)
        if not (math.isfinite(u) and u > 0):
            raise DataError(f"analysis time u must be finite and > 0, got {u!r}")
        if not (math.isfinite(tau) and tau > 0):
            raise DataError(f"horizon tau must be finite and > 0, got {tau!r}")
        arm = np.ascontiguousarray(arm, dtype=np.int8)
        time = np.ascontiguousarray(time, dtype=np.float64)
        event = np.ascontiguousarray(event, dtype=np.int8)
        z = np.ascontiguousarray(z, dtype=np.float64)
        if z.ndim != 2:
            raise DataError(f"covariate matrix must be 2-d, got shape {z.shape}")
        n = arm.shape[0]
        if time.shape != (n,) or event.shape != (n,) or z.shape[0] != n:
            raise DataError("snapshot arrays disagree on subject count")
        if n == 0:
            raise DataError("empty snapshot: no subjects enrolled before u")
        if np.any(time < 0) or not np.all(np.isfinite(time)):
            raise DataError("follow-up times must be finite and >= 0")
        for a in (arm, time, event, z):
            a.setflags(write=False)
        self.u = u
        self.tau = tau
        self.arm = arm
        self.time = time
        self.event = event
        self.z = z
        self.n0 = int(np.sum(arm == 0))
        self.n1 = int(np.sum(arm == 1))

    @property
    def n(self) -> int:
        return self.n0 + self.n1

    @property
    def n_covariates(self) -> int:
        return self.z.shape[1]

    def arm_indices(self, arm: int) -> np.ndarray:
        return np.flatnonzero(self.arm == arm)


def snapshot_from_arrays(entry, time, event, arm, z, u, tau, lock_time=None) -> Snapshot:
    """Array-path snapshot; see :func:`snapshot` for semantics."""
    entry = np.asarray(entry, dtype=np.float64)
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event, dtype=np.int8)
    arm = np.asarray(arm, dtype=np.int8)
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z.reshape(len(z), 1) if z.size else z.reshape(len(entry), 0)
    if lock_time is not None and u > lock_time:
        raise DataError(
            f"analysis time u={u} exceeds the data lock at {lock_time}; "
            "follow-up cannot be rolled forward"
        )
    keep = entry < u
    if not np.any(keep):
        raise DataError(f"empty snapshot: no subjects enrolled before u={u}")
    entry = entry[keep]
    exposure = np.asarray(u, dtype=np.float64) - entry
    t_lock = time[keep]
    t_u = np.minimum(t_lock, exposure)
    d_u = event[keep] * (t_lock <= exposure)
    return Snapshot(u=u, tau=tau, arm=arm[keep], time=t_u, event=d_u, z=z[keep])


def snapshot(records, u: float, tau: float, lock_time=None) -> Snapshot:
    """Roll the dataset back to calendar time ``u``.

    Subjects with ``entry_time >= u`` are excluded. For the rest,
    follow-up is capped at ``u - entry_time``; an event counts only if it
    occurred within the capped window (boundary included).

    Args:
        records: sequence of SubjectRecord.
        u: analysis calendar time, > 0.
        tau: analysis horizon carried on the snapshot, > 0.
        lock_time: optional calendar time of the data lock. When given,
            ``u > lock_time`` raises since records cannot be matured.

    Raises:
        DataError: invalid u/tau, immature data, or nobody enrolled.
    """
    records = list(records)
    if any(not isinstance(r, SubjectRecord) for r in records):
        raise DataError("records must be SubjectRecord instances")
    p = len(records[0].covariates) if records else 0
    if any(len(r.covariates) != p for r in records):
        raise DataError("all records must have the same number of covariates")
    entry = np.array([r.entry_time for r in records], dtype=np.float64)
    time = np.array([r.followup_time for r in records], dtype=np.float64)
    event = np.array([r.event for r in records], dtype=np.int8)
    arm = np.array([r.arm for r in records], dtype=np.int8)
    z = np.array([r.covariates for r in records], dtype=np.float64).reshape(len(records), p)
    return snapshot_from_arrays(entry, time, event, arm, z, u, tau, lock_time=lock_time)


def standardize_covariates(snap: Snapshot) -> Snapshot:
    """Center and scale each covariate column over the snapshot's subjects.

    Fitted coefficients change under this map but adjusted survival,
    restricted means, and test statistics do not; it only conditions the
    Newton solve when covariates live on wild scales.

    Raises:
        DataError: a covariate column is constant (zero variance).
    """
    if snap.n_covariates == 0:
        return snap
    mean = snap.z.mean(axis=0)
    sd = snap.z.std(axis=0)
    flat = np.flatnonzero(sd == 0)
    if flat.size:
        raise DataError(f"cannot standardize constant covariate column(s) {flat.tolist()}")
    z = (snap.z - mean) / sd
    return Snapshot(u=snap.u, tau=snap.tau, arm=snap.arm, time=snap.time, event=snap.event, z=z)
