"""Binary dataset files.

Layout (all integers little-endian)::

    b"CDTMDS1"
    u64 header length, then a UTF-8 JSON header holding the domain schema
        (and optionally a ``meta`` object, e.g. config fingerprint and seed)
    u64 row count
    rows: u32 value index per field (schema order), then a u8 label
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DatasetFormatError, DatasetTruncatedError, DatasetValidationError
from .schema import DomainSpec
from .synth import Dataset

MAGIC = b"CDTMDS1"
FORMAT_VERSION = 1


def _row_dtype(n_fields: int) -> np.dtype:
    return np.dtype([("v", "<u4", (n_fields,)), ("y", "u1")])


def validate(dataset: Dataset) -> None:
    spec = dataset.spec
    if dataset.values.ndim != 2 or dataset.values.shape[1] != spec.n_fields:
        raise DatasetValidationError(
            f"{spec.name}: values have shape {dataset.values.shape}, expected (n, {spec.n_fields})")
    if dataset.values.shape[0] != dataset.labels.shape[0]:
        raise DatasetValidationError(f"{spec.name}: {dataset.values.shape[0]} rows but {len(dataset.labels)} labels")
    over = dataset.values >= spec.vocab_sizes[None, :]
    if over.any():
        row, col = map(int, np.argwhere(over)[0])
        raise DatasetValidationError(
            f"{spec.name}: row {row} field {spec.fields[col].field_id} has value index "
            f"{int(dataset.values[row, col])} >= vocab {spec.fields[col].vocab_size}")
    bad = dataset.labels > 1
    if bad.any():
        row = int(np.argmax(bad))
        raise DatasetValidationError(f"{spec.name}: row {row} has non-binary label {int(dataset.labels[row])}")


def to_bytes(dataset: Dataset, meta: dict | None = None) -> bytes:
    validate(dataset)
    head = {"version": FORMAT_VERSION, "domain": dataset.spec.to_dict()}
    if meta:
        head["meta"] = meta
    header = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")
    rows = np.empty(len(dataset), dtype=_row_dtype(dataset.spec.n_fields))
    rows["v"] = dataset.values
    rows["y"] = dataset.labels
    return b"".join([MAGIC, struct.pack("<Q", len(header)), header,
                     struct.pack("<Q", len(dataset)), rows.tobytes()])


def _header(buf: bytes) -> tuple[dict, DomainSpec, int]:
    if buf[:len(MAGIC)] != MAGIC:
        raise DatasetFormatError("not a dataset file: magic bytes CDTMDS1 absent")
    pos = len(MAGIC)
    if len(buf) < pos + 8:
        raise DatasetFormatError("header length missing")
    (hlen,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    if len(buf) < pos + hlen + 8:
        raise DatasetFormatError("header truncated")
    try:
        header = json.loads(buf[pos:pos + hlen].decode("utf-8"))
        spec = DomainSpec.from_dict(header["domain"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise DatasetFormatError(f"malformed header: {e}") from None
    if header.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported format version {header.get('version')!r}")
    return header, spec, pos + hlen


def from_bytes(buf: bytes) -> Dataset:
    _, spec, pos = _header(buf)
    (n_rows,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    dtype = _row_dtype(spec.n_fields)
    need = n_rows * dtype.itemsize
    if len(buf) - pos < need:
        raise DatasetTruncatedError(
            f"{spec.name}: expected {n_rows} rows ({need} bytes), found {len(buf) - pos} bytes")
    if len(buf) - pos > need:
        raise DatasetFormatError(f"{spec.name}: {len(buf) - pos - need} trailing bytes after the last row")
    rows = np.frombuffer(buf, dtype=dtype, count=n_rows, offset=pos)
    ds = Dataset(spec, rows["v"].copy(), rows["y"].copy())
    validate(ds)
    return ds


def write_dataset(dataset: Dataset, path: str | Path, meta: dict | None = None) -> None:
    Path(path).write_bytes(to_bytes(dataset, meta))


def read_meta(path: str | Path) -> dict:
    """The header ``meta`` object of a dataset file, without decoding its rows."""
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC) + 8)
        if len(head) < len(MAGIC) + 8:
            raise DatasetFormatError("header length missing")
        (hlen,) = struct.unpack_from("<Q", head, len(MAGIC))
        buf = head + fh.read(hlen + 8)
    header, _, _ = _header(buf)
    return header.get("meta", {})


def read_dataset(path: str | Path) -> Dataset:
    return from_bytes(Path(path).read_bytes())
