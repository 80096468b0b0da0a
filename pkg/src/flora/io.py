"""On-disk formats: FLT1 tensors, atomic writes, and training-record streams.

FLT1 layout (all little-endian)::

    b"FLT1" | u32 ndim | ndim x u64 extents | prod(extents) x f64, row-major
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

MAGIC = b"FLT1"
RECORD_FIELDS = ("step", "loss", "delta_frob", "amp_factor")


class FormatError(ValueError):
    """A file does not conform to the expected on-disk format."""


def encode_tensor(t) -> bytes:
    t = np.ascontiguousarray(t, dtype="<f8")
    if t.ndim == 0:
        raise ValueError("FLT1 tensors need at least one mode")
    head = MAGIC + struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}Q", *t.shape)
    return head + t.tobytes(order="C")


def decode_tensor(buf: bytes, name: str = "<buffer>") -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise FormatError(f"{name}: bad magic, not an FLT1 tensor")
    (ndim,) = struct.unpack_from("<I", buf, 4)
    if ndim == 0:
        raise FormatError(f"{name}: ndim must be positive")
    header = 8 + 8 * ndim
    if len(buf) < header:
        raise FormatError(f"{name}: truncated header")
    shape = struct.unpack_from(f"<{ndim}Q", buf, 8)
    if any(e == 0 for e in shape):
        raise FormatError(f"{name}: zero extent in shape {shape}")
    count = int(np.prod(shape, dtype=np.int64))
    expected = header + 8 * count
    if len(buf) < expected:
        raise FormatError(f"{name}: truncated payload ({len(buf)} of {expected} bytes)")
    if len(buf) > expected:
        raise FormatError(f"{name}: {len(buf) - expected} trailing bytes after payload")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=header)
    return data.astype(np.float64).reshape(shape)


@contextmanager
def atomic_path(path):
    """Yield a temporary sibling path that is renamed onto ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_bytes_atomic(path, data: bytes) -> None:
    with atomic_path(path) as tmp:
        tmp.write_bytes(data)


def write_text_atomic(path, text: str) -> None:
    write_bytes_atomic(path, text.encode("utf-8"))


def save_tensor(path, t) -> None:
    write_bytes_atomic(path, encode_tensor(t))


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc.strerror})") from exc
    t = decode_tensor(buf, str(path))
    if not np.all(np.isfinite(t)):
        raise FormatError(f"{path}: contains non-finite entries")
    return t


def _fmt(x) -> str:
    # repr gives the shortest string that round-trips a float64
    return repr(float(x)) if not isinstance(x, (int, np.integer)) else str(int(x))


def records_to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_FIELDS)
    for r in records:
        w.writerow([_fmt(getattr(r, f)) for f in RECORD_FIELDS])
    return buf.getvalue()


def records_to_jsonl(records) -> str:
    lines = [
        json.dumps({f: getattr(r, f) for f in RECORD_FIELDS}, allow_nan=False)
        for r in records
    ]
    return "".join(line + "\n" for line in lines)


def _parse_rows(rows):
    from .training import TrainRecord

    out = []
    for row in rows:
        out.append(TrainRecord(
            step=int(row["step"]),
            loss=float(row["loss"]),
            delta_frob=float(row["delta_frob"]),
            amp_factor=float(row["amp_factor"]),
        ))
    return out


def records_from_csv(text: str):
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != RECORD_FIELDS:
        raise FormatError(f"unexpected CSV header {reader.fieldnames}")
    return _parse_rows(reader)


def records_from_jsonl(text: str):
    return _parse_rows(json.loads(line) for line in text.splitlines() if line.strip())
