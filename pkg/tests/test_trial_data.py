"""Record ingestion and calendar-time snapshot behavior."""

from __future__ import annotations

import numpy as np
import pytest
from conftest import make_record, toy_records
from hypothesis import given
from hypothesis import strategies as st

from rmstgst.errors import DataError
from rmstgst.trial_data import (
    CsvSchema,
    SubjectRecord,
    ingest_csv,
    snapshot,
    snapshot_from_arrays,
    standardize_covariates,
)


def write_csv(path, header, rows):
    lines = [",".join(header)] + [",".join(str(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return str(path)


class TestSubjectRecord:
    def test_field_mapping(self):
        rec = make_record("s1", 1, 0.5, 2.0, 1, (0.3,))
        assert rec.arm == 1 and rec.entry_time == 0.5 and rec.covariates == (0.3,)

    @pytest.mark.parametrize(
        "kwargs,msg",
        [
            (dict(arm=2), "arm"),
            (dict(event=3), "event"),
            (dict(entry=-0.1), "entry_time"),
            (dict(time=-1.0), "followup_time"),
            (dict(cov=(float("nan"),)), "covariates"),
        ],
    )
    def test_invalid_fields(self, kwargs, msg):
        base = dict(sid="s1", arm=0, entry=0.0, time=1.0, event=1, cov=(0.0,))
        base.update(kwargs)
        with pytest.raises(DataError, match=msg):
            make_record(**base)


class TestIngestCsv:
    HEADER = ["id", "arm", "entry_time", "followup_time", "event", "z1"]

    def test_happy_path(self, tmp_path):
        path = write_csv(tmp_path / "t.csv", self.HEADER, [["s1", 1, 0.5, 2.0, 1, 0.3]])
        (rec,) = ingest_csv(path)
        assert rec.subject_id == "s1"
        assert rec.arm == 1
        assert rec.entry_time == 0.5
        assert rec.followup_time == 2.0
        assert rec.event == 1
        assert rec.covariates == (0.3,)

    def test_invalid_arm_reported_with_line(self, tmp_path):
        path = write_csv(
            tmp_path / "t.csv", self.HEADER,
            [["s1", 2, 0.5, 2.0, 1, 0.3], ["s2", 0, 0.1, 1.0, 0, 0.1]],
        )
        with pytest.raises(DataError, match=r"line 2.*arm"):
            ingest_csv(path)

    def test_all_bad_rows_collected(self, tmp_path):
        path = write_csv(
            tmp_path / "t.csv", self.HEADER,
            [
                ["s1", 2, 0.5, 2.0, 1, 0.3],
                ["s2", 0, -0.1, 1.0, 0, 0.1],
                ["s3", 0, 0.1, 1.0, 0, "oops"],
            ],
        )
        with pytest.raises(DataError) as err:
            ingest_csv(path)
        message = str(err.value)
        assert "3 bad row(s)" in message
        for line in ("line 2", "line 3", "line 4"):
            assert line in message

    def test_duplicate_id_rejected(self, tmp_path):
        path = write_csv(
            tmp_path / "t.csv", self.HEADER,
            [["s1", 0, 0.0, 1.0, 1, 0.0], ["s1", 1, 0.0, 1.0, 1, 0.0]],
        )
        with pytest.raises(DataError, match="duplicate id"):
            ingest_csv(path)

    def test_missing_column(self, tmp_path):
        path = write_csv(tmp_path / "t.csv", self.HEADER[:-2], [["s1", 0, 0.0]])
        with pytest.raises(DataError, match="missing columns"):
            ingest_csv(path)

    def test_empty_and_headerless_files(self, tmp_path):
        empty = tmp_path / "e.csv"
        empty.write_text("", encoding="utf-8")
        with pytest.raises(DataError, match="empty file"):
            ingest_csv(str(empty))
        headers_only = write_csv(tmp_path / "h.csv", self.HEADER, [])
        with pytest.raises(DataError, match="no data rows"):
            ingest_csv(headers_only)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="cannot read"):
            ingest_csv(str(tmp_path / "absent.csv"))

    def test_nine_covariates_autodetected_in_order(self, tmp_path):
        cov_names = [f"c{i}" for i in range(9)]
        header = ["id", "arm", "entry_time", "followup_time", "event"] + cov_names
        row = ["s1", 0, 0.0, 1.0, 1] + [float(i) for i in range(9)]
        path = write_csv(tmp_path / "t.csv", header, [row])
        (rec,) = ingest_csv(path)
        assert rec.covariates == tuple(float(i) for i in range(9))

    def test_schema_renames_and_explicit_covariates(self, tmp_path):
        header = ["pid", "grp", "enroll", "fup", "died", "age", "junk"]
        path = write_csv(tmp_path / "t.csv", header, [["p1", 1, 0.2, 1.5, 0, 63.0, "x"]])
        schema = CsvSchema(
            subject_id="pid", arm="grp", entry_time="enroll",
            followup_time="fup", event="died", covariates=("age",),
        )
        (rec,) = ingest_csv(path, schema)
        assert rec.covariates == (63.0,)
        round_trip = CsvSchema.from_dict(schema.to_dict())
        assert round_trip == schema


class TestSnapshot:
    def test_administrative_censoring_at_u(self):
        rec = make_record("s1", 0, 0.5, 2.0, 1, (0.0,))
        other = make_record("s2", 1, 0.0, 3.0, 0, (0.0,))
        snap = snapshot([rec, other], u=1.0, tau=1.0)
        i = list(np.asarray(snap.arm)).index(0)
        assert snap.time[i] == pytest.approx(0.5)
        assert snap.event[i] == 0

    def test_future_enrollee_excluded(self):
        late = make_record("s1", 0, 2.0, 1.0, 1, (0.0,))
        early = make_record("s2", 1, 0.0, 1.0, 1, (0.0,))
        snap = snapshot([late, early], u=1.5, tau=1.0)
        assert snap.n == 1 and snap.n0 == 0 and snap.n1 == 1

    def test_full_followup_observed(self):
        rec = make_record("s1", 0, 0.0, 1.0, 1, (0.0,))
        other = make_record("s2", 1, 0.0, 2.0, 0, (0.0,))
        snap = snapshot([rec, other], u=5.0, tau=2.0)
        i = list(np.asarray(snap.arm)).index(0)
        assert snap.time[i] == pytest.approx(1.0)
        assert snap.event[i] == 1

    def test_entry_exactly_at_u_excluded(self):
        recs = [
            make_record("s1", 0, 1.0, 1.0, 1, (0.0,)),
            make_record("s2", 1, 0.0, 1.0, 1, (0.0,)),
        ]
        snap = snapshot(recs, u=1.0, tau=1.0)
        assert snap.n == 1

    def test_empty_snapshot_rejected(self):
        recs = [make_record("s1", 0, 2.0, 1.0, 1, (0.0,))]
        with pytest.raises(DataError, match="empty snapshot"):
            snapshot(recs, u=1.0, tau=1.0)

    def test_lock_time_guard(self):
        recs = toy_records()
        snapshot(recs, u=1.0, tau=1.0, lock_time=1.0)
        with pytest.raises(DataError, match="lock"):
            snapshot(recs, u=2.0, tau=1.0, lock_time=1.5)

    def test_counts_by_arm(self):
        snap = snapshot(toy_records(), u=5.0, tau=2.0)
        assert (snap.n0, snap.n1) == (4, 4)
        assert snap.n == 8 and snap.n_covariates == 1

    def test_standardize_constant_column_rejected(self):
        recs = [
            make_record("s1", 0, 0.0, 1.0, 1, (1.0,)),
            make_record("s2", 1, 0.0, 2.0, 1, (1.0,)),
        ]
        snap = snapshot(recs, u=3.0, tau=1.0)
        with pytest.raises(DataError, match="constant covariate"):
            standardize_covariates(snap)

    def test_standardize_centers_and_scales(self):
        snap = snapshot(toy_records(), u=5.0, tau=2.0)
        std = standardize_covariates(snap)
        assert abs(float(std.z.mean())) < 1e-12
        assert float(std.z.std()) == pytest.approx(1.0)


record_strategy = st.builds(
    SubjectRecord,
    subject_id=st.uuids().map(str),
    arm=st.integers(0, 1),
    entry_time=st.floats(0.0, 3.0, allow_nan=False),
    followup_time=st.floats(0.0, 5.0, allow_nan=False),
    event=st.integers(0, 1),
    covariates=st.tuples(st.floats(-2.0, 2.0, allow_nan=False)),
)

cohorts = st.lists(record_strategy, min_size=1, max_size=25)
analysis_times = st.floats(0.05, 8.0, allow_nan=False)


def _by_id(snap, records, u):
    """Map included subjects back to records by matching order of entry filter."""
    kept = [r for r in records if r.entry_time < u]
    assert snap.n == len(kept)
    return kept


class TestSnapshotProperties:
    @given(records=cohorts, u1=analysis_times, u2=analysis_times)
    def test_monotone_in_analysis_time(self, records, u1, u2):
        lo, hi = sorted((u1, u2))
        if lo == hi:
            hi = lo + 0.5
        try:
            early = snapshot(records, u=lo, tau=1.0)
        except DataError:
            return
        late = snapshot(records, u=hi, tau=1.0)
        kept_early = _by_id(early, records, lo)
        kept_late = _by_id(late, records, hi)
        index_late = {r.subject_id: k for k, r in enumerate(kept_late)}
        for k, rec in enumerate(kept_early):
            m = index_late[rec.subject_id]
            assert early.time[k] <= late.time[m] + 1e-12
            assert early.event[k] <= late.event[m]

    @given(records=cohorts, u=analysis_times)
    def test_lock_time_idempotence(self, records, u):
        lock = max(r.entry_time + r.followup_time for r in records) + 1.0
        try:
            snap = snapshot(records, u=lock, tau=1.0)
        except DataError:
            return
        for k, rec in enumerate(_by_id(snap, records, lock)):
            assert snap.time[k] == pytest.approx(min(rec.followup_time, lock - rec.entry_time))
            if rec.followup_time <= lock - rec.entry_time:
                assert snap.event[k] == rec.event

    @given(records=cohorts, u1=analysis_times, u2=analysis_times)
    def test_resnapshot_composition(self, records, u1, u2):
        early_u, late_u = sorted((u1, u2))
        if early_u == late_u:
            return
        try:
            direct = snapshot(records, u=early_u, tau=1.0)
        except DataError:
            return
        late = snapshot(records, u=late_u, tau=1.0)
        kept = _by_id(late, records, late_u)
        entries = np.array([r.entry_time for r in kept])
        again = snapshot_from_arrays(
            entries, np.asarray(late.time), np.asarray(late.event),
            np.asarray(late.arm), np.asarray(late.z), u=early_u, tau=1.0,
        )
        assert again.n == direct.n
        np.testing.assert_allclose(np.sort(again.time), np.sort(direct.time), atol=1e-12)
        assert int(again.event.sum()) == int(direct.event.sum())

    @given(records=cohorts, u=analysis_times)
    def test_snapshot_invariants(self, records, u):
        try:
            snap = snapshot(records, u=u, tau=1.0)
        except DataError:
            return
        kept = _by_id(snap, records, u)
        for k, rec in enumerate(kept):
            assert 0.0 <= snap.time[k] <= min(rec.followup_time, u - rec.entry_time) + 1e-12
            if snap.event[k]:
                assert snap.time[k] == pytest.approx(rec.followup_time)
        assert snap.n0 + snap.n1 == snap.n
