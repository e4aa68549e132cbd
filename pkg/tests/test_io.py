import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from jointdiar.archive import ArchiveError, ExtractionArchive, load_archive, save_archive
from jointdiar.rttm import (
    RttmParseError,
    RttmRecord,
    group_by_file,
    parse_rttm,
    read_rttm_file,
    records_from_segments,
    write_rttm,
    write_rttm_file,
)

token = st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789_-", min_size=1, max_size=8)
record = st.builds(
    RttmRecord,
    file_id=token,
    onset_s=st.integers(0, 10**6).map(lambda v: v / 1000),
    duration_s=st.integers(1, 10**5).map(lambda v: v / 1000),
    speaker=token,
)


def test_parse_example_line():
    (r,) = parse_rttm("SPEAKER rec1 1 0.330 1.250 <NA> <NA> spk00 <NA> <NA>\n")
    assert (r.file_id, r.onset_s, r.duration_s, r.speaker) == ("rec1", 0.33, 1.25, "spk00")


def test_writer_format():
    text = write_rttm([RttmRecord("f", 1.5, 0.25, "a")])
    assert text == "SPEAKER f 1 1.500 0.250 <NA> <NA> a <NA> <NA>\n"


@given(st.lists(record, max_size=20))
def test_round_trip(records):
    assert parse_rttm(write_rttm(records)) == records


@pytest.mark.parametrize(
    "line, field",
    [
        ("SPEAKER f 1 0.0 -1.0 <NA> <NA> a <NA> <NA>", "duration"),
        ("SPEAKER f 1 abc 1.0 <NA> <NA> a <NA> <NA>", "onset"),
        ("SPEAKER f x 0.0 1.0 <NA> <NA> a <NA> <NA>", "channel"),
        ("LEXEME f 1 0.0 1.0 <NA> <NA> a <NA> <NA>", "type"),
        ("SPEAKER f 1 0.0", "count"),
    ],
)
def test_parse_errors_name_line_and_field(line, field):
    text = "SPEAKER ok 1 0.0 1.0 <NA> <NA> a <NA> <NA>\n\n" + line + "\n"
    with pytest.raises(RttmParseError) as info:
        parse_rttm(text)
    assert info.value.line_no == 3 and info.value.field == field


def test_record_validation():
    with pytest.raises(ValueError):
        RttmRecord("f", 0.0, 0.0, "a")
    with pytest.raises(ValueError):
        RttmRecord("f g", 0.0, 1.0, "a")


def test_file_round_trip_and_grouping(tmp_path):
    recs = records_from_segments("rec", [(2.0, 3.0, "b"), (0.0, 1.2345, "a"), (4.0, 4.0002, "a")])
    assert [r.speaker for r in recs] == ["a", "b"]  # sub-millisecond piece dropped
    path = tmp_path / "x.rttm"
    write_rttm_file(path, recs)
    assert read_rttm_file(path) == recs
    grouped = group_by_file(recs)
    assert list(grouped) == ["rec"]
    assert [(lab, round(on, 3), round(off, 3)) for on, off, lab in grouped["rec"]] == \
        [("a", 0.0, round(1.2345, 3)), ("b", 2.0, 3.0)]


def _archive(rng, T=7, D=5):
    return ExtractionArchive(rng.normal(size=(T, D)), rng.uniform(size=T), rng.uniform(size=T), 80, 40)


def test_archive_bit_exact_round_trip(tmp_path, rng):
    a = _archive(rng)
    blob = a.to_bytes()
    assert blob[:4] == b"PFEM"
    assert struct.unpack_from("<IIIII", blob, 4) == (1, 7, 5, 80, 40)
    assert len(blob) == 24 + 4 * (7 * 5 + 14)
    save_archive(tmp_path / "a.pfem", a)
    b = load_archive(tmp_path / "a.pfem")
    assert b.to_bytes() == blob
    assert np.array_equal(b.embeddings, a.embeddings)


def test_archive_rejects_corruption(rng):
    blob = _archive(rng).to_bytes()
    with pytest.raises(ArchiveError):
        ExtractionArchive.from_bytes(blob[:-1])
    with pytest.raises(ArchiveError):
        ExtractionArchive.from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ArchiveError):
        ExtractionArchive.from_bytes(blob[:10])
    with pytest.raises(ArchiveError):
        ExtractionArchive(np.zeros((2, 3)), [0.1, 1.5], [0, 0])


def test_archive_timestamps():
    a = ExtractionArchive(np.zeros((3, 2)), np.zeros(3), np.zeros(3), 80, 27)
    assert np.allclose(a.timestamps, [0.027, 0.107, 0.187])
