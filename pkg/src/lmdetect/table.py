"""Columnar container for feature records and its on-disk formats.

Two interchangeable serializations are provided: a headered CSV and a
compact little-endian binary file (magic ``LMFR``) holding fixed-width
rows plus the string vocabularies the rows index into.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional, Sequence, Union

import numpy as np
import polars as pl

from .features import FEATURE_NAMES, FeatureRecord, LabelEncoding

MAGIC = b"LMFR"
VERSION = 1
MISSING = "?"
_NONE_LEN = 0xFFFFFFFF

COLUMNS = FeatureRecord._fields

ROW_DTYPE = np.dtype([
    ("event_id", "<i8"),
    ("time", "<i8"),
    ("src_user", "<i4"),
    ("src_computer", "<i4"),
    ("dst_computer", "<i4"),
    ("was_source_logged_on", "u1"),
    ("how_long_ago", "<i4"),
    ("other_interactive_logins", "<i4"),
    ("was_process_run", "u1"),
    ("previous_login_fraction", "<f8"),
    ("number_of_failed", "<i4"),
    ("fraction_from_same_box", "<f8"),
    ("auth_type_code", "<i4"),
    ("is_malicious", "u1"),
    ("auth_type", "<i4"),
])

_INT_FEATURES = ("was_source_logged_on", "how_long_ago", "other_interactive_logins",
                 "was_process_run", "number_of_failed", "auth_type_code")
_FLOAT_FEATURES = ("previous_login_fraction", "fraction_from_same_box")
_STRING_COLUMNS = {"src_user": "users", "src_computer": "computers",
                   "dst_computer": "computers", "auth_type": "auth_types"}


class TableFormatError(ValueError):
    pass


def _factorize(values: Sequence, vocab: list, index: dict) -> np.ndarray:
    out = np.empty(len(values), dtype=np.int32)
    for i, v in enumerate(values):
        j = index.get(v)
        if j is None:
            j = index[v] = len(vocab)
            vocab.append(v)
        out[i] = j
    return out


@dataclass
class FeatureTable:
    """Feature records stored column-wise.

    String columns hold ``int32`` codes into ``users``, ``computers`` and
    ``auth_types``; ``auth_type`` uses ``-1`` for a missing value. Row
    order is event order.
    """

    columns: dict
    users: list
    computers: list
    auth_types: list

    def __len__(self) -> int:
        return len(self.columns["event_id"])

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    @classmethod
    def empty(cls) -> "FeatureTable":
        return cls({name: np.zeros(0, dtype=ROW_DTYPE[name]) for name in COLUMNS}, [], [], [])

    @classmethod
    def from_records(cls, records: Iterable[FeatureRecord]) -> "FeatureTable":
        recs = list(records)
        if not recs:
            return cls.empty()
        cols = list(zip(*recs))
        users: list = []
        comps: list = []
        auths: list = []
        uidx: dict = {}
        cidx: dict = {}
        aidx: dict = {None: -1}
        data = {}
        for name, values in zip(COLUMNS, cols):
            if name == "src_user":
                data[name] = _factorize(values, users, uidx)
            elif name in ("src_computer", "dst_computer"):
                data[name] = _factorize(values, comps, cidx)
            elif name == "auth_type":
                out = np.empty(len(values), dtype=np.int32)
                for i, v in enumerate(values):
                    j = aidx.get(v)
                    if j is None:
                        j = aidx[v] = len(auths)
                        auths.append(v)
                    out[i] = j
                data[name] = out
            else:
                data[name] = np.asarray(values, dtype=ROW_DTYPE[name].newbyteorder("="))
        data["is_malicious"] = data["is_malicious"].astype(bool)
        return cls(data, users, comps, auths)

    def records(self) -> Iterator[FeatureRecord]:
        c = self.columns
        U, C, A = self.users, self.computers, self.auth_types
        lists = [c[name].tolist() for name in COLUMNS]
        for row in zip(*lists):
            row = list(row)
            row[2] = U[row[2]]
            row[3] = C[row[3]]
            row[4] = C[row[4]]
            row[13] = bool(row[13])
            row[14] = A[row[14]] if row[14] >= 0 else None
            yield FeatureRecord._make(row)

    def take(self, index) -> "FeatureTable":
        return FeatureTable({k: v[index] for k, v in self.columns.items()},
                            self.users, self.computers, self.auth_types)

    def user_names(self) -> np.ndarray:
        """Source user of every row as an object array."""
        return np.asarray(self.users, dtype=object)[self.columns["src_user"]] if len(self) else \
            np.zeros(0, dtype=object)

    def feature_matrix(self) -> np.ndarray:
        return np.column_stack([self.columns[n].astype(np.float64) for n in FEATURE_NAMES]) \
            if len(self) else np.zeros((0, len(FEATURE_NAMES)))

    def labels(self) -> np.ndarray:
        return self.columns["is_malicious"].astype(bool)

    def with_encoding(self, encoding: LabelEncoding) -> "FeatureTable":
        """Copy with ``auth_type_code`` recomputed from the raw auth type."""
        lut = np.array([encoding.encode(a) for a in self.auth_types] + [0], dtype=np.int32)
        cols = dict(self.columns)
        cols["auth_type_code"] = lut[cols["auth_type"]]  # -1 hits the trailing 0
        return FeatureTable(cols, self.users, self.computers, self.auth_types)

    def equals(self, other: "FeatureTable") -> bool:
        if len(self) != len(other):
            return False
        return list(self.records()) == list(other.records())

    # ---- CSV ----------------------------------------------------------

    def to_polars(self) -> pl.DataFrame:
        c = self.columns
        def strings(name, vocab):
            arr = np.asarray([MISSING if v is None else v for v in vocab] + [MISSING], dtype=object)
            return arr[c[name]].tolist() if len(self) else []
        data = {}
        for name in COLUMNS:
            if name in _STRING_COLUMNS:
                data[name] = pl.Series(name, strings(name, getattr(self, _STRING_COLUMNS[name])), dtype=pl.Utf8)
            elif name == "is_malicious":
                data[name] = pl.Series(name, c[name].astype(np.int8))
            else:
                data[name] = pl.Series(name, c[name])
        return pl.DataFrame(data)

    def write_csv(self, path: Union[str, os.PathLike, io.IOBase]) -> None:
        self.to_polars().write_csv(path, include_header=True, line_terminator="\n")

    @classmethod
    def read_csv(cls, path) -> "FeatureTable":
        df = pl.read_csv(path, infer_schema=False, quote_char='"')
        if tuple(df.columns) != COLUMNS:
            raise TableFormatError(f"unexpected CSV header {df.columns}")
        data = {}
        vocabs = {"users": ([], {}), "computers": ([], {}), "auth_types": ([], {None: -1})}
        for name in COLUMNS:
            col = df[name].to_list()
            if name in _STRING_COLUMNS:
                vocab, index = vocabs[_STRING_COLUMNS[name]]
                vals = [None if v == MISSING else v for v in col]
                data[name] = _factorize(vals, vocab, index)
            elif name in _FLOAT_FEATURES:
                data[name] = np.array([float(v) for v in col], dtype=np.float64)
            else:
                data[name] = np.array([int(v) for v in col], dtype=np.int64)
        data["is_malicious"] = data["is_malicious"].astype(bool)
        for name in _INT_FEATURES + ("event_id", "time"):
            data[name] = data[name].astype(ROW_DTYPE[name].newbyteorder("="))
        return cls(data, vocabs["users"][0], vocabs["computers"][0], vocabs["auth_types"][0])

    # ---- binary -------------------------------------------------------

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<BQ", VERSION, len(self)))
        for vocab in (self.users, self.computers, self.auth_types):
            buf.write(struct.pack("<I", len(vocab)))
            for v in vocab:
                if v is None:
                    buf.write(struct.pack("<I", _NONE_LEN))
                else:
                    b = v.encode("utf-8")
                    buf.write(struct.pack("<I", len(b)))
                    buf.write(b)
        rows = np.empty(len(self), dtype=ROW_DTYPE)
        for name in COLUMNS:
            rows[name] = self.columns[name]
        buf.write(rows.tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "FeatureTable":
        if len(data) < 13 or data[:4] != MAGIC:
            raise TableFormatError("not a feature table (bad magic)")
        version, n = struct.unpack_from("<BQ", data, 4)
        if version != VERSION:
            raise TableFormatError(f"unsupported feature table version {version}")
        off = 13
        vocabs = []
        try:
            for _ in range(3):
                (count,) = struct.unpack_from("<I", data, off)
                off += 4
                vocab = []
                for _ in range(count):
                    (ln,) = struct.unpack_from("<I", data, off)
                    off += 4
                    if ln == _NONE_LEN:
                        vocab.append(None)
                    else:
                        vocab.append(data[off:off + ln].decode("utf-8"))
                        off += ln
                vocabs.append(vocab)
        except struct.error as exc:
            raise TableFormatError(f"truncated feature table header: {exc}") from None
        need = n * ROW_DTYPE.itemsize
        if len(data) - off != need:
            raise TableFormatError(f"expected {need} bytes of rows, found {len(data) - off}")
        rows = np.frombuffer(data, dtype=ROW_DTYPE, count=n, offset=off)
        cols = {name: rows[name].astype(ROW_DTYPE[name].newbyteorder("=")) for name in COLUMNS}
        cols["is_malicious"] = cols["is_malicious"].astype(bool)
        return cls(cols, *vocabs)

    def write_binary(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def read_binary(cls, path) -> "FeatureTable":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def concat(tables: Sequence[FeatureTable]) -> FeatureTable:
    """Concatenate tables, merging their vocabularies."""
    if not tables:
        return FeatureTable.empty()
    users: list = []
    comps: list = []
    auths: list = []
    uidx: dict = {}
    cidx: dict = {}
    aidx: dict = {None: -1}
    parts: dict = {name: [] for name in COLUMNS}
    for t in tables:
        ulut = _factorize(t.users, users, uidx)
        clut = _factorize(t.computers, comps, cidx)
        alut = np.append(_factorize(t.auth_types, auths, aidx), np.int32(-1))
        for name in COLUMNS:
            v = t.columns[name]
            if name == "src_user":
                v = ulut[v]
            elif name in ("src_computer", "dst_computer"):
                v = clut[v]
            elif name == "auth_type":
                v = alut[v]
            parts[name].append(v)
    cols = {k: np.concatenate(v) for k, v in parts.items()}
    return FeatureTable(cols, users, comps, auths)
