"""Deterministic session exports: one row per message as CSV or XLSX,
plus a lossless raw-record dump.

Exports are derived, never cached: telemetry columns are recomputed by
replaying the log, so the same log bytes always produce the same export
bytes. Absent real-valued metrics serialize as empty cells, never 0.
"""

from __future__ import annotations

import csv
import io
import zipfile
from xml.sax.saxutils import escape

from .engine import replay_with_telemetry
from .model import AnnotationKind, EventRecord, latest_rating
from .protocol import decode_record, encode_record

# Fixed, versioned column set; order is part of the format.
EXPORT_SCHEMA_VERSION = 1
EXPORT_COLUMNS = (
    "session_id", "session_seq", "message_id",
    "author_participant_id", "author_display_name", "author_role_label", "author_kind",
    "submit_ts_client_ms", "submit_ts_server_ms",
    "text_original", "text_current", "edit_count", "rating_latest", "comment_concat",
    "pause_before_ms", "typing_duration_ms", "char_count",
    "keystroke_count", "erase_count", "speed_cps",
    "iki_mean_ms", "iki_stddev_ms", "iki_cv", "iki_list_ms",
    "mouse_path_px", "mouse_event_count",
)


def build_export_rows(records: list[EventRecord]) -> list[dict]:
    """One dict per message, keys exactly EXPORT_COLUMNS, values already
    serialized to cell form (str for text, int/float for numbers, None
    for absent)."""
    engine, recomputed = replay_with_telemetry(records)
    state = engine.state
    rows = []
    for msg in state.messages:
        t = recomputed[msg.message_id]
        author = state.roster[msg.author_participant_id].participant
        comments = sorted(
            (a for a in msg.annotations if a.kind == AnnotationKind.COMMENT),
            key=lambda a: (a.ts_server_ms, a.annotation_id))
        rows.append({
            "session_id": state.config.session_id,
            "session_seq": msg.session_seq,
            "message_id": msg.message_id,
            "author_participant_id": msg.author_participant_id,
            "author_display_name": msg.author_identity.display_name,
            "author_role_label": msg.author_identity.role_label,
            "author_kind": author.kind.value,
            "submit_ts_client_ms": msg.submit_ts_client_ms,
            "submit_ts_server_ms": msg.submit_ts_server_ms,
            "text_original": msg.text_original,
            "text_current": msg.text_current,
            "edit_count": sum(1 for a in msg.annotations if a.kind == AnnotationKind.EDIT),
            "rating_latest": latest_rating(msg.annotations),
            "comment_concat": " | ".join(str(a.body) for a in comments),
            "pause_before_ms": t.pause_before_ms,
            "typing_duration_ms": t.typing_duration_ms,
            "char_count": t.char_count,
            "keystroke_count": t.keystroke_count,
            "erase_count": t.erase_count,
            "speed_cps": t.speed_cps,
            "iki_mean_ms": t.iki_mean_ms,
            "iki_stddev_ms": t.iki_stddev_ms,
            "iki_cv": t.iki_cv,
            "iki_list_ms": ";".join(str(v) for v in t.iki_list_ms),
            "mouse_path_px": t.mouse_path_px,
            "mouse_event_count": t.mouse_event_count,
        })
    return rows


def _cell_text(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def export_session_csv(records: list[EventRecord]) -> bytes:
    """UTF-8, RFC-4180 quoting, LF line endings, header row first."""
    rows = build_export_rows(records)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(EXPORT_COLUMNS)
    for row in rows:
        writer.writerow([_cell_text(row[col]) for col in EXPORT_COLUMNS])
    return buf.getvalue().encode("utf-8")


def export_session_xlsx(records: list[EventRecord]) -> bytes:
    """Single worksheet named "messages", row 1 = headers. Written by a
    small built-in generator (no spreadsheet dependency) with pinned zip
    metadata so identical logs give identical bytes."""
    rows = build_export_rows(records)
    data_rows = [[row[col] for col in EXPORT_COLUMNS] for row in rows]
    sheet = _sheet_xml([list(EXPORT_COLUMNS)] + data_rows)
    members = [
        ("[Content_Types].xml", _CONTENT_TYPES_XML),
        ("_rels/.rels", _ROOT_RELS_XML),
        ("xl/workbook.xml", _WORKBOOK_XML),
        ("xl/_rels/workbook.xml.rels", _WORKBOOK_RELS_XML),
        ("xl/worksheets/sheet1.xml", sheet),
    ]
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for name, content in members:
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, content, compresslevel=6)
    return buf.getvalue()


def export_session(records: list[EventRecord], format: str) -> bytes:
    if format == "csv":
        return export_session_csv(records)
    if format == "xlsx":
        return export_session_xlsx(records)
    raise ValueError(f"unknown export format {format!r}")


def export_raw_events(records: list[EventRecord]) -> bytes:
    """One canonical record per line, in log order; lossless."""
    return b"".join(encode_record(r) + b"\n" for r in records)


def parse_raw_events(data: bytes) -> list[EventRecord]:
    return [decode_record(line) for line in data.split(b"\n") if line]


def _column_ref(index: int) -> str:
    ref = ""
    index += 1
    while index:
        index, rem = divmod(index - 1, 26)
        ref = chr(ord("A") + rem) + ref
    return ref


def _sheet_xml(table: list[list]) -> str:
    parts = ['<?xml version="1.0" encoding="UTF-8" standalone="yes"?>\n'
             '<worksheet xmlns="http://schemas.openxmlformats.org/spreadsheetml/2006/main">'
             '<sheetData>']
    for r, row in enumerate(table, start=1):
        parts.append(f'<row r="{r}">')
        for c, value in enumerate(row):
            if value is None or value == "":
                continue
            ref = f"{_column_ref(c)}{r}"
            if isinstance(value, bool):
                parts.append(f'<c r="{ref}" t="b"><v>{int(value)}</v></c>')
            elif isinstance(value, (int, float)):
                parts.append(f'<c r="{ref}" t="n"><v>{_cell_text(value)}</v></c>')
            else:
                text = escape(str(value))
                space = ' xml:space="preserve"' if text != text.strip() else ""
                parts.append(f'<c r="{ref}" t="inlineStr"><is><t{space}>{text}</t></is></c>')
        parts.append("</row>")
    parts.append("</sheetData></worksheet>")
    return "".join(parts)


_CONTENT_TYPES_XML = (
    '<?xml version="1.0" encoding="UTF-8" standalone="yes"?>\n'
    '<Types xmlns="http://schemas.openxmlformats.org/package/2006/content-types">'
    '<Default Extension="rels" ContentType="application/vnd.openxmlformats-package.relationships+xml"/>'
    '<Default Extension="xml" ContentType="application/xml"/>'
    '<Override PartName="/xl/workbook.xml" '
    'ContentType="application/vnd.openxmlformats-officedocument.spreadsheetml.sheet.main+xml"/>'
    '<Override PartName="/xl/worksheets/sheet1.xml" '
    'ContentType="application/vnd.openxmlformats-officedocument.spreadsheetml.worksheet+xml"/>'
    "</Types>"
)

_ROOT_RELS_XML = (
    '<?xml version="1.0" encoding="UTF-8" standalone="yes"?>\n'
    '<Relationships xmlns="http://schemas.openxmlformats.org/package/2006/relationships">'
    '<Relationship Id="rId1" '
    'Type="http://schemas.openxmlformats.org/officeDocument/2006/relationships/officeDocument" '
    'Target="xl/workbook.xml"/>'
    "</Relationships>"
)

_WORKBOOK_XML = (
    '<?xml version="1.0" encoding="UTF-8" standalone="yes"?>\n'
    '<workbook xmlns="http://schemas.openxmlformats.org/spreadsheetml/2006/main" '
    'xmlns:r="http://schemas.openxmlformats.org/officeDocument/2006/relationships">'
    '<sheets><sheet name="messages" sheetId="1" r:id="rId1"/></sheets>'
    "</workbook>"
)

_WORKBOOK_RELS_XML = (
    '<?xml version="1.0" encoding="UTF-8" standalone="yes"?>\n'
    '<Relationships xmlns="http://schemas.openxmlformats.org/package/2006/relationships">'
    '<Relationship Id="rId1" '
    'Type="http://schemas.openxmlformats.org/officeDocument/2006/relationships/worksheet" '
    'Target="worksheets/sheet1.xml"/>'
    "</Relationships>"
)


def verify_records(records: list[EventRecord]) -> list[str]:
    """Check the derivation laws a healthy log must satisfy.

    Returns human-readable violations: record_seq density, message
    session_seq density, stored text_current vs the annotation fold,
    and embedded telemetry vs recomputation from the raw events.
    """
    problems = []
    for expected, record in enumerate(records, start=1):
        if record.record_seq != expected:
            problems.append(f"record_seq gap: {record.record_seq} at position {expected}")
            return problems  # later checks need a dense log
    try:
        engine, recomputed = replay_with_telemetry(records)
    except Exception as exc:
        problems.append(f"replay failed: {exc}")
        return problems
    state = engine.state
    for i, msg in enumerate(state.messages, start=1):
        if msg.session_seq != i:
            problems.append(f"{msg.message_id}: session_seq {msg.session_seq}, expected {i}")
        edits = [a for a in msg.annotations if a.kind == AnnotationKind.EDIT]
        expected_text = msg.text_original
        for edit in sorted(edits, key=lambda a: (a.ts_server_ms, a.annotation_id)):
            expected_text = str(edit.body)
        if msg.text_current != expected_text:
            problems.append(f"{msg.message_id}: text_current diverges from edit fold")
        problems.extend(_telemetry_diff(msg.message_id, msg.telemetry, recomputed[msg.message_id]))
    return problems


def _telemetry_diff(message_id, stored, recomputed) -> list[str]:
    out = []
    for field in ("pause_before_ms", "typing_duration_ms", "char_count", "keystroke_count",
                  "erase_count", "iki_list_ms", "mouse_event_count"):
        a, b = getattr(stored, field), getattr(recomputed, field)
        if a != b:
            out.append(f"{message_id}: {field} stored {a!r} != recomputed {b!r}")
    for field in ("speed_cps", "iki_mean_ms", "iki_stddev_ms", "iki_cv", "mouse_path_px"):
        a, b = getattr(stored, field), getattr(recomputed, field)
        if a is None or b is None:
            if a is not b:
                out.append(f"{message_id}: {field} stored {a!r} != recomputed {b!r}")
        elif abs(a - b) > 1e-9 * max(1.0, abs(a), abs(b)):
            out.append(f"{message_id}: {field} stored {a!r} != recomputed {b!r}")
    return out
