"""Embedding matrices, concept labelings, and their on-disk formats.

Two embedding formats are supported:

* ``csv``: no header, one sample per row, comma separated decimal floats.
* ``raw-f32``: a single JSON line ``{"n": <int>, "d": <int>}`` followed by
  ``n * d`` little-endian float32 values in row-major order.

Labels are CSV files with a header row ``attr1,attr2,...[,class]`` and one
row per sample, aligned by row index with the embedding file.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    AlreadyCentered,
    EmptyAttribute,
    MalformedFile,
    NonFiniteValue,
)

DEGENERATE_STD = 1e-12
CENTER_TOL = 1e-6
CLASS_COLUMN = "class"
FORMATS = ("csv", "raw-f32")


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


def _check_finite(data):
    bad = np.argwhere(~np.isfinite(data))
    if len(bad):
        r, c = (int(v) for v in bad[0])
        raise NonFiniteValue(r, c, float(data[r, c]))


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    """An ``n x d`` matrix of sample embeddings.

    ``degenerate`` lists the columns that had (near) zero variance when the
    matrix was standardized; they are exempt from the unit-std invariant.
    """

    data: np.ndarray
    centered: bool = False
    source_id: str = ""
    degenerate: tuple = ()

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 2:
            raise ValueError(f"embedding data must be 2-D, got shape {data.shape}")
        n, d = data.shape
        if n < 1 or d < 2:
            raise ValueError(f"need n >= 1 and d >= 2, got n={n}, d={d}")
        _check_finite(data)
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "degenerate", tuple(int(c) for c in self.degenerate))
        if self.centered:
            keep = np.ones(d, dtype=bool)
            keep[list(self.degenerate)] = False
            means = np.abs(data.mean(axis=0))
            stds = data.std(axis=0)
            if means.max() > CENTER_TOL or np.any(np.abs(stds[keep] - 1.0) > CENTER_TOL):
                raise ValueError("matrix flagged centered but columns are not standardized")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    def take(self, rows) -> "EmbeddingMatrix":
        """Row subset; the result is marked uncentered."""
        return EmbeddingMatrix(self.data[np.asarray(rows)], False, self.source_id)


@dataclass(frozen=True, eq=False)
class CenteringStats:
    """Per-column mean and population standard deviation."""

    mean: np.ndarray
    std: np.ndarray
    degenerate: np.ndarray
    convention: str = "population"

    def __post_init__(self):
        object.__setattr__(self, "mean", _frozen(self.mean))
        object.__setattr__(self, "std", _frozen(self.std))
        object.__setattr__(self, "degenerate", _frozen(self.degenerate, dtype=bool))

    @property
    def scale(self) -> np.ndarray:
        # degenerate columns are mean-subtracted only
        return np.where(self.degenerate, 1.0, self.std)

    def apply(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.scale

    def invert(self, x):
        return np.asarray(x, dtype=float) * self.scale + self.mean


@dataclass(frozen=True, eq=False)
class Labeling:
    """One concept per attribute per sample, plus an optional class label."""

    attributes: tuple
    concepts: tuple
    assignment: np.ndarray
    class_label: Optional[np.ndarray] = None
    class_names: tuple = ()

    def __post_init__(self):
        attributes = tuple(str(a) for a in self.attributes)
        concepts = tuple(tuple(str(c) for c in cs) for cs in self.concepts)
        assignment = np.asarray(self.assignment, dtype=np.int64)
        if assignment.ndim == 1:
            assignment = assignment[:, None]
        if len(attributes) != len(concepts) or assignment.shape[1] != len(attributes):
            raise ValueError("attributes, concepts and assignment columns disagree")
        for a, (name, vocab) in enumerate(zip(attributes, concepts)):
            if len(vocab) < 2:
                raise EmptyAttribute(f"attribute {name!r} has fewer than 2 concepts")
            col = assignment[:, a]
            if col.size and (col.min() < 0 or col.max() >= len(vocab)):
                raise ValueError(f"invalid concept index for attribute {name!r}")
        object.__setattr__(self, "attributes", attributes)
        object.__setattr__(self, "concepts", concepts)
        object.__setattr__(self, "assignment", _frozen(assignment, dtype=np.int64))
        if self.class_label is not None:
            cl = _frozen(self.class_label, dtype=np.int64)
            if cl.shape != (assignment.shape[0],):
                raise ValueError("class_label must have one entry per sample")
            object.__setattr__(self, "class_label", cl)
        object.__setattr__(self, "class_names", tuple(str(c) for c in self.class_names))

    @property
    def n(self) -> int:
        return self.assignment.shape[0]

    @property
    def sizes(self) -> list:
        return [len(c) for c in self.concepts]

    @property
    def offsets(self) -> np.ndarray:
        """Start index of each attribute's concepts in the flattened concept list."""
        return np.concatenate([[0], np.cumsum(self.sizes)[:-1]]).astype(int)

    @property
    def total_concepts(self) -> int:
        return int(sum(self.sizes))

    def concept_names(self) -> list:
        return [f"{a}={c}" for a, cs in zip(self.attributes, self.concepts) for c in cs]

    def attribute_of(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.attributes)), self.sizes)

    def global_assignment(self) -> np.ndarray:
        """``n x |attributes|`` table of flattened concept indices."""
        return self.assignment + self.offsets[None, :]

    def indicator(self) -> np.ndarray:
        """Binary ``n x total_concepts`` presence matrix."""
        out = np.zeros((self.n, self.total_concepts), dtype=bool)
        rows = np.arange(self.n)
        for col in self.global_assignment().T:
            out[rows, col] = True
        return out

    def take(self, rows) -> "Labeling":
        rows = np.asarray(rows)
        cl = None if self.class_label is None else self.class_label[rows]
        return Labeling(self.attributes, self.concepts, self.assignment[rows], cl, self.class_names)


def center_standardize(E: EmbeddingMatrix):
    """Center each column and divide by its population standard deviation.

    Columns whose standard deviation is below ``1e-12`` are only
    mean-subtracted and reported in ``CenteringStats.degenerate``.

    Returns
    -------
    (EmbeddingMatrix, CenteringStats)
    """
    if E.centered:
        raise AlreadyCentered(f"embeddings {E.source_id!r} are already centered")
    mean = E.data.mean(axis=0)
    std = E.data.std(axis=0)
    stats = CenteringStats(mean, std, std < DEGENERATE_STD)
    out = stats.apply(E.data)
    degenerate = tuple(np.flatnonzero(stats.degenerate))
    return EmbeddingMatrix(out, True, E.source_id, degenerate), stats


def load_embeddings(path, format: str = "csv") -> EmbeddingMatrix:
    path = Path(path)
    if format == "csv":
        data = _read_csv_matrix(path)
    elif format == "raw-f32":
        data = _read_raw_f32(path)
    else:
        raise ValueError(f"unknown embedding format {format!r}; expected one of {FORMATS}")
    return EmbeddingMatrix(data, False, str(path))


def _read_csv_matrix(path: Path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for r, row in enumerate(csv.reader(fh)):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rows.append([float(c) for c in row])
            except ValueError as exc:
                raise MalformedFile(f"{path}: row {r}: {exc}") from None
            if len(rows[-1]) != len(rows[0]):
                raise MalformedFile(f"{path}: row {r} has {len(rows[-1])} fields, expected {len(rows[0])}")
    if not rows:
        raise MalformedFile(f"{path}: no data rows")
    data = np.array(rows, dtype=float)
    _check_finite(data)
    return data


def _read_raw_f32(path: Path) -> np.ndarray:
    blob = path.read_bytes()
    nl = blob.find(b"\n")
    if nl < 0:
        raise MalformedFile(f"{path}: missing header line")
    try:
        header = json.loads(blob[:nl])
        n, d = int(header["n"]), int(header["d"])
    except (ValueError, KeyError, TypeError) as exc:
        raise MalformedFile(f"{path}: bad header: {exc}") from None
    body = blob[nl + 1:]
    if n < 0 or d < 0 or len(body) != 4 * n * d:
        raise MalformedFile(f"{path}: header declares {n}x{d} but payload has {len(body)} bytes")
    data = np.frombuffer(body, dtype="<f4").astype(float).reshape(n, d)
    _check_finite(data)
    return data


def save_embeddings(E, path, format: str = "csv") -> None:
    data = E.data if isinstance(E, EmbeddingMatrix) else np.asarray(E, dtype=float)
    path = Path(path)
    if format == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            for row in data:
                w.writerow([repr(float(v)) for v in row])
    elif format == "raw-f32":
        n, d = data.shape
        with open(path, "wb") as fh:
            fh.write(json.dumps({"n": n, "d": d}).encode() + b"\n")
            fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
    else:
        raise ValueError(f"unknown embedding format {format!r}")


def load_labels(path) -> Labeling:
    """Read a labels CSV; concept vocabularies follow first-seen order."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise MalformedFile(f"{path}: empty file") from None
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    if not header or any(not h for h in header):
        raise MalformedFile(f"{path}: bad header {header!r}")
    has_class = header[-1] == CLASS_COLUMN
    attributes = header[:-1] if has_class else header
    if not attributes:
        raise MalformedFile(f"{path}: no attribute columns")
    vocabs = [dict() for _ in header]
    codes = np.empty((len(rows), len(header)), dtype=np.int64)
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise MalformedFile(f"{path}: row {r} has {len(row)} fields, expected {len(header)}")
        for c, value in enumerate(row):
            codes[r, c] = vocabs[c].setdefault(value.strip(), len(vocabs[c]))
    for name, vocab in zip(attributes, vocabs):
        if len(vocab) < 2:
            raise EmptyAttribute(f"{path}: attribute {name!r} has fewer than 2 distinct concepts")
    concepts = [list(v) for v in vocabs[: len(attributes)]]
    if has_class:
        return Labeling(attributes, concepts, codes[:, :-1], codes[:, -1], list(vocabs[-1]))
    return Labeling(attributes, concepts, codes)


def save_labels(L: Labeling, path) -> None:
    header = list(L.attributes)
    if L.class_label is not None:
        header.append(CLASS_COLUMN)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(L.n):
            row = [L.concepts[a][L.assignment[i, a]] for a in range(len(L.attributes))]
            if L.class_label is not None:
                c = int(L.class_label[i])
                row.append(L.class_names[c] if L.class_names else str(c))
            w.writerow(row)
