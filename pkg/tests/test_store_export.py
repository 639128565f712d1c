"""Append-only log durability and deterministic exports."""

import csv
import io
import zipfile
import xml.etree.ElementTree as ET
from pathlib import Path

import pytest

from chatbench.engine import SessionEngine
from chatbench.export import (
    EXPORT_COLUMNS,
    build_export_rows,
    export_raw_events,
    export_session,
    export_session_csv,
    export_session_xlsx,
    parse_raw_events,
    verify_records,
)
from chatbench.model import EventRecord, RecordKind
from chatbench.store import CORRUPT_LOG, SEQ_GAP, STORAGE_FAILURE, SessionLog, StoreError
from chatbench.protocol import encode_record

from fixture_session import build_fixture_engine

FIXTURE_CSV = Path(__file__).parent / "data" / "expected_session.csv"


@pytest.fixture
def fixture_records():
    return build_fixture_engine().records


class TestSessionLog:
    def test_append_and_reload(self, tmp_path, fixture_records):
        path = tmp_path / "fixture-1.log"
        log = SessionLog(path, "fixture-1")
        for record in fixture_records:
            log.append(record)
        log.close()
        reloaded = SessionLog.open(path)
        assert reloaded.records == fixture_records
        assert reloaded.session_id == "fixture-1"

    def test_gap_rejected(self, tmp_path, fixture_records):
        log = SessionLog(tmp_path / "s.log", "fixture-1")
        for record in fixture_records[:3]:
            log.append(record)
        with pytest.raises(StoreError) as exc:
            log.append(fixture_records[4])  # seq 5 after 3 stored
        assert exc.value.code == SEQ_GAP

    def test_duplicate_append_is_idempotent(self, tmp_path, fixture_records):
        path = tmp_path / "s.log"
        log = SessionLog(path, "fixture-1")
        log.append(fixture_records[0])
        log.append(fixture_records[0])
        log.append(fixture_records[1])
        log.close()
        assert SessionLog.open(path).records == fixture_records[:2]

    def test_conflicting_redelivery_rejected(self, tmp_path, fixture_records):
        log = SessionLog(tmp_path / "s.log", "fixture-1")
        log.append(fixture_records[0])
        imposter = EventRecord(1, "fixture-1", RecordKind.SESSION_CLOSED, 9, {})
        with pytest.raises(StoreError) as exc:
            log.append(imposter)
        assert exc.value.code == STORAGE_FAILURE

    def test_torn_tail_line_dropped(self, tmp_path, fixture_records):
        path = tmp_path / "s.log"
        log = SessionLog(path, "fixture-1")
        for record in fixture_records[:5]:
            log.append(record)
        log.close()
        with open(path, "ab") as fh:
            fh.write(encode_record(fixture_records[5])[:20])  # torn write, no newline
        recovered = SessionLog.open(path)
        assert recovered.records == fixture_records[:5]
        # and the truncated file accepts the record again
        recovered.append(fixture_records[5])
        recovered.close()
        assert SessionLog.open(path).records == fixture_records[:6]

    def test_corrupt_middle_detected(self, tmp_path, fixture_records):
        path = tmp_path / "s.log"
        log = SessionLog(path, "fixture-1")
        for record in fixture_records[:4]:
            log.append(record)
        log.close()
        lines = path.read_bytes().split(b"\n")
        lines[1] = b"garbage"
        path.write_bytes(b"\n".join(lines))
        with pytest.raises(StoreError) as exc:
            SessionLog.open(path)
        assert exc.value.code == CORRUPT_LOG


class TestCsvExport:
    def test_empty_session_exports_header_only(self, fixture_records):
        data = export_session_csv(fixture_records[:3])  # created + two joins
        assert data.decode("utf-8") == ",".join(EXPORT_COLUMNS) + "\n"

    def test_deterministic_bytes(self, fixture_records):
        assert export_session_csv(fixture_records) == export_session_csv(fixture_records)

    def test_matches_committed_fixture(self, fixture_records):
        assert export_session_csv(fixture_records) == FIXTURE_CSV.read_bytes()

    def test_fixture_values_spot_checked(self, fixture_records):
        rows = build_export_rows(fixture_records)
        m1, m2 = rows
        assert m1["pause_before_ms"] == 500
        assert m1["speed_cps"] == 10.0
        assert m1["iki_list_ms"] == "200"
        assert m1["mouse_path_px"] == 5.0
        assert m1["text_original"] == "hi" and m1["text_current"] == "hi!"
        assert m1["rating_latest"] == 2 and m1["comment_concat"] == "needs follow-up"
        assert m2["author_display_name"] == "UNIT-7"  # snapshot of the switched persona
        assert m2["author_participant_id"] == "wanda"
        assert m2["pause_before_ms"] == 1300
        assert m2["keystroke_count"] == 3 and m2["erase_count"] == 1
        assert m2["iki_list_ms"] == "100;100;100"

    def test_absent_reals_serialize_empty_not_zero(self, fixture_records):
        engine = SessionEngine.from_records(fixture_records)
        # a message typed with a single paste has no intervals at all
        from chatbench.model import InputEvent, InputKind
        engine.join("alice", "fixture-token-a", 5000, 4000)
        engine.ingest_input("alice",
                            InputEvent(InputKind.KEY_DOWN, 5100, 3, 3, None), 4100)
        engine.submit_message("alice", "abc", 5200, 4200)
        text = export_session_csv(engine.records).decode("utf-8")
        row = next(csv.reader([text.splitlines()[-1]]))
        by_col = dict(zip(EXPORT_COLUMNS, row))
        assert by_col["iki_mean_ms"] == "" and by_col["iki_cv"] == ""
        assert by_col["speed_cps"] == "0.0"

    def test_quoting_round_trips_through_csv_reader(self, fixture_records):
        engine = SessionEngine.from_records(fixture_records)
        engine.join("alice", "fixture-token-a", 9000, 5000)
        tricky = 'she said "hi, there"\nand left'
        engine.submit_message("alice", tricky, 9100, 5100)
        data = export_session_csv(engine.records).decode("utf-8")
        rows = list(csv.reader(io.StringIO(data)))
        assert rows[0] == list(EXPORT_COLUMNS)
        assert rows[-1][EXPORT_COLUMNS.index("text_original")] == tricky
        assert not data.endswith("\r\n") and "\r\n" not in data.replace('"', "")


def read_xlsx_rows(data: bytes) -> list[list]:
    ns = "{http://schemas.openxmlformats.org/spreadsheetml/2006/main}"
    with zipfile.ZipFile(io.BytesIO(data)) as zf:
        workbook = zf.read("xl/workbook.xml").decode("utf-8")
        sheet = ET.fromstring(zf.read("xl/worksheets/sheet1.xml"))
    assert 'name="messages"' in workbook
    out = []
    for row in sheet.iter(f"{ns}row"):
        cells = []
        for cell in row.iter(f"{ns}c"):
            if cell.get("t") == "inlineStr":
                cells.append("".join(t.text or "" for t in cell.iter(f"{ns}t")))
            else:
                v = cell.find(f"{ns}v").text
                cells.append(float(v) if "." in v or "e" in v else int(v))
        out.append(cells)
    return out


class TestXlsxExport:
    def test_same_values_as_csv(self, fixture_records):
        xlsx_rows = read_xlsx_rows(export_session_xlsx(fixture_records))
        assert xlsx_rows[0] == list(EXPORT_COLUMNS)
        csv_rows = build_export_rows(fixture_records)
        for sheet_row, row in zip(xlsx_rows[1:], csv_rows):
            # empty cells are omitted from the sheet; compare the present ones
            expected = [row[c] for c in EXPORT_COLUMNS if row[c] not in (None, "")]
            assert sheet_row == expected

    def test_deterministic_bytes(self, fixture_records):
        assert export_session_xlsx(fixture_records) == export_session_xlsx(fixture_records)

    def test_dispatch(self, fixture_records):
        assert export_session(fixture_records, "csv")[:10] == b"session_id"
        assert export_session(fixture_records, "xlsx")[:2] == b"PK"
        with pytest.raises(ValueError):
            export_session(fixture_records, "ods")


class TestRawExport:
    def test_line_per_record(self, fixture_records):
        data = export_raw_events(fixture_records)
        assert data.count(b"\n") == len(fixture_records)

    def test_round_trip_reconstructs_identical_export(self, fixture_records):
        data = export_raw_events(fixture_records)
        records = parse_raw_events(data)
        assert records == fixture_records
        assert export_session_csv(records) == export_session_csv(fixture_records)

    def test_empty_log(self):
        assert export_raw_events([]) == b""
        assert parse_raw_events(b"") == []


class TestVerify:
    def test_healthy_log_passes(self, fixture_records):
        assert verify_records(fixture_records) == []

    def test_tampered_telemetry_detected(self, fixture_records):
        tampered = []
        for record in fixture_records:
            if record.kind == RecordKind.MESSAGE and record.payload["message"]["session_seq"] == 1:
                payload = {"message": dict(record.payload["message"])}
                payload["message"] = dict(payload["message"])
                payload["message"]["telemetry"] = dict(payload["message"]["telemetry"])
                payload["message"]["telemetry"]["pause_before_ms"] = 999
                record = EventRecord(record.record_seq, record.session_id, record.kind,
                                     record.server_ts_ms, payload)
            tampered.append(record)
        problems = verify_records(tampered)
        assert any("pause_before_ms" in p for p in problems)

    def test_gap_detected(self, fixture_records):
        problems = verify_records(fixture_records[:3] + fixture_records[4:])
        assert any("gap" in p for p in problems)
