"""Embedding matrix files (``EMB1``) and tile manifests."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"EMB1"
VERSION = 1
_HEADER = struct.Struct("<4sHII")
MANIFEST_COLUMNS = ("tile_id", "slide_id", "patient_id", "label", "sex", "race_group")
OOD_LABEL = -1


class FormatError(ValueError):
    pass


def dumps_embeddings(X) -> bytes:
    X = np.asarray(X)
    if X.ndim != 2:
        raise ValueError("embeddings must be 2-D")
    return _HEADER.pack(MAGIC, VERSION, X.shape[0], X.shape[1]) + np.ascontiguousarray(X, dtype="<f4").tobytes()


def loads_embeddings(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise FormatError("file shorter than the EMB1 header")
    magic, version, n, d = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    expected = _HEADER.size + 4 * n * d
    if len(data) != expected:
        raise FormatError(f"payload is {len(data) - _HEADER.size} bytes, expected {4 * n * d}")
    return np.frombuffer(data, dtype="<f4", offset=_HEADER.size).astype(np.float64).reshape(n, d)


def write_embeddings(path, X) -> None:
    Path(path).write_bytes(dumps_embeddings(X))


def read_embeddings(path) -> np.ndarray:
    return loads_embeddings(Path(path).read_bytes())


@dataclass(frozen=True)
class Manifest:
    """Per-tile records of the tile -> slide -> patient hierarchy."""

    tile_id: tuple[str, ...]
    slide_id: tuple[str, ...]
    patient_id: tuple[str, ...]
    label: np.ndarray
    sex: tuple[str, ...]
    race_group: tuple[str, ...]

    def __post_init__(self):
        n = len(self.tile_id)
        cols = (self.slide_id, self.patient_id, self.label, self.sex, self.race_group)
        if any(len(c) != n for c in cols):
            raise ValueError("manifest columns differ in length")
        if len(set(self.tile_id)) != n:
            seen, dup = set(), None
            for t in self.tile_id:
                if t in seen:
                    dup = t
                    break
                seen.add(t)
            raise ValueError(f"duplicate tile_id {dup!r}")
        owner: dict[str, str] = {}
        for s, p in zip(self.slide_id, self.patient_id):
            if owner.setdefault(s, p) != p:
                raise ValueError(f"slide {s!r} maps to patients {owner[s]!r} and {p!r}")
        if not np.isin(self.label, (0, 1, OOD_LABEL)).all():
            raise ValueError("labels must be 0, 1 or -1 (OOD)")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Manifest):
            return NotImplemented
        return (
            self.tile_id == other.tile_id
            and self.slide_id == other.slide_id
            and self.patient_id == other.patient_id
            and np.array_equal(self.label, other.label)
            and self.sex == other.sex
            and self.race_group == other.race_group
        )

    __hash__ = None

    def __len__(self) -> int:
        return len(self.tile_id)

    @property
    def is_ood(self) -> np.ndarray:
        return self.label == OOD_LABEL

    def patients(self) -> list[str]:
        """Patient ids in first-appearance order."""
        return list(dict.fromkeys(self.patient_id))

    def slides(self) -> list[str]:
        return list(dict.fromkeys(self.slide_id))

    def patient_attr(self, column: str) -> dict[str, object]:
        values = getattr(self, column)
        out: dict[str, object] = {}
        for p, v in zip(self.patient_id, values):
            out.setdefault(p, v)
        return out

    def subset(self, rows) -> "Manifest":
        rows = np.asarray(rows, dtype=np.int64)

        def pick(col):
            return tuple(col[i] for i in rows)

        return Manifest(pick(self.tile_id), pick(self.slide_id), pick(self.patient_id),
                        self.label[rows], pick(self.sex), pick(self.race_group))

    def rows_for_patients(self, patient_ids) -> np.ndarray:
        wanted = set(patient_ids)
        return np.array([i for i, p in enumerate(self.patient_id) if p in wanted], dtype=np.int64)


def read_manifest(path) -> Manifest:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(header) != MANIFEST_COLUMNS:
            raise FormatError(f"{path}: header must be {','.join(MANIFEST_COLUMNS)}")
        rows = [r for r in reader if r]
    for i, r in enumerate(rows, start=2):
        if len(r) != len(MANIFEST_COLUMNS):
            raise FormatError(f"{path}:{i}: expected {len(MANIFEST_COLUMNS)} fields")
    cols = list(zip(*rows)) if rows else [()] * len(MANIFEST_COLUMNS)
    try:
        labels = np.array([int(v) for v in cols[3]], dtype=np.int64)
    except ValueError as e:
        raise FormatError(f"{path}: non-integer label") from e
    return Manifest(tuple(cols[0]), tuple(cols[1]), tuple(cols[2]), labels, tuple(cols[4]), tuple(cols[5]))


def write_manifest(path, m: Manifest) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for row in zip(m.tile_id, m.slide_id, m.patient_id, m.label.tolist(), m.sex, m.race_group):
            w.writerow(row)
