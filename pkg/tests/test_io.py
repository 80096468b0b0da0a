import struct

import numpy as np
import pytest

from flora import io as fio
from flora.training import TrainRecord


def test_flt1_layout():
    t = np.arange(6.0).reshape(2, 3)
    buf = fio.encode_tensor(t)
    assert buf[:4] == b"FLT1"
    assert struct.unpack("<I", buf[4:8]) == (2,)
    assert struct.unpack("<2Q", buf[8:24]) == (2, 3)
    assert struct.unpack("<6d", buf[24:]) == tuple(range(6))


@pytest.mark.parametrize("shape", [(3,), (2, 3), (2, 3, 4, 4), (1, 1, 1)])
def test_flt1_round_trip(tmp_path, shape):
    t = np.random.default_rng(0).standard_normal(shape)
    fio.save_tensor(tmp_path / "t.flt", t)
    back = fio.load_tensor(tmp_path / "t.flt")
    assert back.shape == shape and back.tobytes() == t.tobytes()


def test_flt1_rejects_bad_input(tmp_path):
    good = fio.encode_tensor(np.ones((2, 2)))
    with pytest.raises(fio.FormatError, match="magic"):
        fio.decode_tensor(b"FLT2" + good[4:])
    with pytest.raises(fio.FormatError, match="truncated"):
        fio.decode_tensor(good[:-1])
    with pytest.raises(fio.FormatError, match="truncated"):
        fio.decode_tensor(good[:12])
    with pytest.raises(fio.FormatError, match="trailing"):
        fio.decode_tensor(good + b"\0")
    (tmp_path / "bad.flt").write_bytes(b"nope")
    with pytest.raises(fio.FormatError, match="bad.flt"):
        fio.load_tensor(tmp_path / "bad.flt")


def test_atomic_write_leaves_nothing_on_failure(tmp_path):
    target = tmp_path / "out.txt"
    with pytest.raises(RuntimeError):
        with fio.atomic_path(target) as tmp:
            tmp.write_text("partial")
            raise RuntimeError("boom")
    assert list(tmp_path.iterdir()) == []


def test_record_streams_round_trip_exactly():
    recs = [TrainRecord(0, 75.65689715080043, 0.0, 0.0),
            TrainRecord(100, 0.1 + 0.2, 12.300967210004295, 1e-300),
            TrainRecord(200, 5e-324, 1.7976931348623157e308, 21.917637469049254)]
    text = fio.records_to_csv(recs)
    assert text.splitlines()[0] == "step,loss,delta_frob,amp_factor"
    assert fio.records_from_csv(text) == recs
    assert fio.records_from_jsonl(fio.records_to_jsonl(recs)) == recs
    assert fio.records_to_csv(fio.records_from_csv(text)) == text
