"""RTTM reading and writing (SPEAKER records only)."""

from __future__ import annotations

import os
import tempfile
from collections import defaultdict
from dataclasses import dataclass


class RttmParseError(ValueError):
    def __init__(self, line_no: int, field: str, message: str):
        super().__init__(f"line {line_no}: field {field}: {message}")
        self.line_no = line_no
        self.field = field


@dataclass(frozen=True)
class RttmRecord:
    file_id: str
    onset_s: float
    duration_s: float
    speaker: str
    channel: int = 1
    type: str = "SPEAKER"

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ValueError("duration must be positive")
        for token in (self.file_id, self.speaker):
            if not token or any(c.isspace() for c in token):
                raise ValueError(f"invalid token {token!r}")

    @property
    def offset_s(self) -> float:
        return self.onset_s + self.duration_s


def _number(text: str, line_no: int, field: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise RttmParseError(line_no, field, f"not a number: {text!r}") from None
    if value != value or value in (float("inf"), float("-inf")):
        raise RttmParseError(line_no, field, f"not finite: {text!r}")
    return value


def parse_rttm(text: str) -> list[RttmRecord]:
    records = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) < 9:
            raise RttmParseError(line_no, "count", f"expected >= 9 fields, got {len(fields)}")
        if fields[0] != "SPEAKER":
            raise RttmParseError(line_no, "type", f"unsupported type {fields[0]!r}")
        try:
            channel = int(fields[2])
        except ValueError:
            raise RttmParseError(line_no, "channel", f"not an integer: {fields[2]!r}") from None
        onset = _number(fields[3], line_no, "onset")
        duration = _number(fields[4], line_no, "duration")
        if onset < 0:
            raise RttmParseError(line_no, "onset", f"negative onset {fields[3]}")
        if duration <= 0:
            raise RttmParseError(line_no, "duration", f"non-positive duration {fields[4]}")
        records.append(RttmRecord(fields[1], onset, duration, fields[7], channel))
    return records


def write_rttm(records) -> str:
    return "".join(
        f"SPEAKER {r.file_id} {r.channel} {r.onset_s:.3f} {r.duration_s:.3f} <NA> <NA> {r.speaker} <NA> <NA>\n"
        for r in records
    )


def read_rttm_file(path) -> list[RttmRecord]:
    with open(path) as fh:
        return parse_rttm(fh.read())


def write_rttm_file(path, records) -> None:
    """Write atomically (temp file + rename)."""
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), suffix=".rttm.tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(write_rttm(records))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def group_by_file(records) -> dict[str, list[tuple[float, float, str]]]:
    """``file_id -> [(onset, offset, speaker), ...]``"""
    out: dict[str, list] = defaultdict(list)
    for r in records:
        out[r.file_id].append((r.onset_s, r.offset_s, r.speaker))
    return dict(out)


def records_from_segments(file_id: str, segments) -> list[RttmRecord]:
    """Sorted records from ``(onset, offset, speaker)`` triples, skipping
    intervals that round to zero length."""
    out = []
    for on, off, spk in sorted(segments, key=lambda s: (s[0], s[1], s[2])):
        on_r, off_r = round(on, 3), round(off, 3)
        if off_r - on_r >= 0.0005:
            out.append(RttmRecord(file_id, on_r, round(off_r - on_r, 3), spk))
    return out
