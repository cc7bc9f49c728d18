"""Embedding containers and the on-disk formats.

Binary layout (little-endian)::

    b"EMB1" | u32 N | u32 D | u32 C | u8 has_labels
    N*D float32, row-major
    N int32 labels            (only if has_labels)

CSV layout: header ``d0,...,d{D-1}[,label]`` and one row per sample.
A label of -1 means "absent" in both formats.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"EMB1"
HEADER = struct.Struct("<4sIIIB")
NORM_TOL = 1e-3
MISSING_LABEL = -1


class EmbeddingFormatError(ValueError):
    """Base class for unreadable embedding files."""

    def __init__(self, message: str, record: int | None = None):
        if record is not None:
            message = f"record {record}: {message}"
        super().__init__(message)
        self.record = record


class MalformedHeaderError(EmbeddingFormatError):
    pass


class RowCountMismatchError(EmbeddingFormatError):
    pass


class LabelRangeError(EmbeddingFormatError):
    pass


class NonFiniteError(EmbeddingFormatError):
    pass


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    """Unit-norm feature rows with optional integer labels.

    ``features`` is float64 in memory; files store float32.  ``labels`` uses
    -1 for rows whose label is absent (e.g. test rows of a joint set).
    """

    features: np.ndarray
    labels: np.ndarray | None
    num_classes: int
    renormalized: bool = field(default=False)

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise ValueError(f"features must be a non-empty N x D matrix, got shape {X.shape}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        bad = np.flatnonzero(~np.isfinite(X).all(axis=1))
        if bad.size:
            raise NonFiniteError("non-finite feature value", int(bad[0]))
        norms = np.linalg.norm(X, axis=1)
        off = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOL)
        if off.size:
            raise ValueError(f"row {int(off[0])} has norm {norms[off[0]]:.6g}; use normalize_rows")
        X.setflags(write=False)
        object.__setattr__(self, "features", X)
        if self.labels is not None:
            y = np.asarray(self.labels, dtype=np.int64)
            if y.shape != (X.shape[0],):
                raise RowCountMismatchError(f"{y.shape[0] if y.ndim else 0} labels for {X.shape[0]} rows")
            bad = np.flatnonzero((y < MISSING_LABEL) | (y >= self.num_classes))
            if bad.size:
                raise LabelRangeError(
                    f"label {int(y[bad[0]])} outside [0, {self.num_classes})", int(bad[0])
                )
            y.setflags(write=False)
            object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def has_labels(self) -> bool:
        return self.labels is not None and bool(np.all(self.labels >= 0))

    def subset(self, idx) -> "EmbeddingSet":
        idx = np.asarray(idx, dtype=np.int64)
        labels = None if self.labels is None else self.labels[idx]
        return EmbeddingSet(self.features[idx], labels, self.num_classes)

    def unlabeled(self) -> "EmbeddingSet":
        return EmbeddingSet(self.features, None, self.num_classes)


def normalize_rows(X: np.ndarray) -> tuple[np.ndarray, bool]:
    """Scale rows to unit norm; the flag reports whether any row moved by more than 1e-3.

    Rows already unit-norm to float32 precision are left untouched so that a
    load/save/load cycle is bit-exact.
    """
    X = np.array(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise NonFiniteError("zero-norm row cannot be normalized", int(zero[0]))
    fix = np.abs(norms - 1.0) > 1e-6
    X[fix] /= norms[fix, None]
    changed = bool(np.any(np.abs(norms - 1.0) > NORM_TOL))
    return X, changed


def from_arrays(features, labels=None, num_classes: int | None = None) -> EmbeddingSet:
    """Validate raw arrays into an EmbeddingSet, normalizing rows."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {X.shape}")
    bad = np.flatnonzero(~np.isfinite(X).all(axis=1))
    if bad.size:
        raise NonFiniteError("non-finite feature value", int(bad[0]))
    X, changed = normalize_rows(X)
    if num_classes is None:
        if labels is None:
            raise ValueError("num_classes is required when labels are absent")
        num_classes = max(2, int(np.max(labels)) + 1)
    return EmbeddingSet(X, labels, int(num_classes), renormalized=changed)


# ---------------------------------------------------------------- binary I/O


def read_binary(path) -> tuple[np.ndarray, np.ndarray | None, int]:
    """Raw reader: returns (float32 features, int32 labels or None, C) without validation."""
    data = Path(path).read_bytes()
    if len(data) < HEADER.size:
        raise MalformedHeaderError(f"{path}: file shorter than the {HEADER.size}-byte header")
    magic, n, d, c, has_labels = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic {magic!r}")
    if has_labels not in (0, 1):
        raise MalformedHeaderError(f"{path}: has_labels byte is {has_labels}")
    if n < 1 or d < 1:
        raise MalformedHeaderError(f"{path}: declared N={n}, D={d}")
    row_bytes = 4 * d + (4 if has_labels else 0)
    body = len(data) - HEADER.size
    if body != n * row_bytes:
        rows = body // row_bytes if row_bytes else 0
        raise RowCountMismatchError(
            f"{path}: header declares {n} rows but payload holds {body} bytes (~{rows} rows)",
            min(rows, n),
        )
    X = np.frombuffer(data, dtype="<f4", count=n * d, offset=HEADER.size).reshape(n, d)
    y = None
    if has_labels:
        y = np.frombuffer(data, dtype="<i4", count=n, offset=HEADER.size + 4 * n * d)
    return X, y, int(c)


def write_binary(path, features, labels, num_classes: int) -> None:
    X = np.ascontiguousarray(features, dtype="<f4")
    n, d = X.shape
    parts = [HEADER.pack(MAGIC, n, d, num_classes, 0 if labels is None else 1), X.tobytes()]
    if labels is not None:
        parts.append(np.ascontiguousarray(labels, dtype="<i4").tobytes())
    Path(path).write_bytes(b"".join(parts))


# ------------------------------------------------------------------- CSV I/O


def read_csv(path, num_classes: int | None = None):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedHeaderError(f"{path}: empty file") from None
        has_labels = bool(header) and header[-1] == "label"
        dims = header[:-1] if has_labels else header
        if not dims or dims != [f"d{i}" for i in range(len(dims))]:
            raise MalformedHeaderError(f"{path}: header must be d0,...,d{{D-1}}[,label]")
        d = len(dims)
        rows, labels = [], []
        for i, rec in enumerate(reader):
            if len(rec) != len(header):
                raise RowCountMismatchError(f"expected {len(header)} fields, got {len(rec)}", i)
            try:
                rows.append([float(v) for v in rec[:d]])
                if has_labels:
                    labels.append(int(rec[d]))
            except ValueError as exc:
                raise MalformedHeaderError(f"unparseable value ({exc})", i) from None
    if not rows:
        raise RowCountMismatchError(f"{path}: no data rows", 0)
    X = np.asarray(rows, dtype=np.float32)
    y = np.asarray(labels, dtype=np.int32) if has_labels else None
    if num_classes is None:
        num_classes = max(2, int(y.max()) + 1) if y is not None else 2
    return X, y, int(num_classes)


def write_csv(path, features, labels=None) -> None:
    X = np.asarray(features, dtype=np.float32)
    header = [f"d{i}" for i in range(X.shape[1])] + (["label"] if labels is not None else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, row in enumerate(X):
            rec = ["%.9g" % v for v in row]
            if labels is not None:
                rec.append(str(int(labels[i])))
            w.writerow(rec)


# ---------------------------------------------------------------- public API


def _validate(X, y, c) -> EmbeddingSet:
    bad = np.flatnonzero(~np.isfinite(X).all(axis=1))
    if bad.size:
        raise NonFiniteError("non-finite feature value", int(bad[0]))
    if c < 2:
        raise MalformedHeaderError(f"declared C={c} < 2")
    if y is not None:
        bad = np.flatnonzero((y < MISSING_LABEL) | (y >= c))
        if bad.size:
            raise LabelRangeError(f"label {int(y[bad[0]])} outside [0, {c})", int(bad[0]))
    X, changed = normalize_rows(X)
    # keep values float32-representable so that save/load is lossless
    X = X.astype(np.float32).astype(np.float64)
    return EmbeddingSet(X, y, c, renormalized=changed)


def load_embeddings(path, format: str = "binary", num_classes: int | None = None) -> EmbeddingSet:
    """Read an embedding file and return a validated, unit-norm EmbeddingSet."""
    if format == "binary":
        X, y, c = read_binary(path)
    elif format == "csv":
        X, y, c = read_csv(path, num_classes)
    else:
        raise ValueError(f"unknown format {format!r}")
    return _validate(X, y, c)


def save_embeddings(emb: EmbeddingSet, path, format: str = "binary") -> None:
    if format == "binary":
        write_binary(path, emb.features, emb.labels, emb.num_classes)
    elif format == "csv":
        write_csv(path, emb.features, emb.labels)
    else:
        raise ValueError(f"unknown format {format!r}")


# ------------------------------------------------------------ label marginal


@dataclass(frozen=True, eq=False)
class LabelMarginal:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size < 2:
            raise ValueError("a label marginal needs at least two classes")
        if np.any(p < 0) or not np.isfinite(p).all():
            raise ValueError("label marginal entries must be finite and non-negative")
        if abs(p.sum() - 1.0) > 1e-6:
            raise ValueError(f"label marginal sums to {p.sum():.9g}, not 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def num_classes(self) -> int:
        return self.probs.size

    @classmethod
    def uniform(cls, num_classes: int) -> "LabelMarginal":
        return cls(np.full(num_classes, 1.0 / num_classes))

    @classmethod
    def from_probabilities(cls, probs: np.ndarray) -> "LabelMarginal":
        """Model-estimated marginal: the column mean of a probability matrix."""
        return cls(np.asarray(probs, dtype=np.float64).mean(axis=0))


def empirical_marginal(labels, num_classes: int) -> LabelMarginal:
    """Class frequencies of ``labels`` (the mean of their one-hot encodings)."""
    y = np.asarray(labels, dtype=np.int64)
    if y.size == 0:
        raise ValueError("cannot estimate a marginal from zero labels")
    if np.any((y < 0) | (y >= num_classes)):
        raise LabelRangeError(f"labels must lie in [0, {num_classes})")
    counts = np.bincount(y, minlength=num_classes).astype(np.float64)
    return LabelMarginal(counts / y.size)


def split_concat(cal: EmbeddingSet, test: EmbeddingSet):
    """Stack calibration rows on top of test rows.

    Test labels are dropped (stored as -1) so nothing downstream of the joint
    set can see them.  Returns ``(joint, cal_indices, test_indices)``.
    """
    if cal.dim != test.dim:
        raise ValueError(f"dimension mismatch: calibration D={cal.dim}, test D={test.dim}")
    if cal.num_classes != test.num_classes:
        raise ValueError(f"class-count mismatch: {cal.num_classes} vs {test.num_classes}")
    X = np.vstack([cal.features, test.features])
    cal_y = cal.labels if cal.labels is not None else np.full(cal.n, MISSING_LABEL)
    y = np.concatenate([cal_y, np.full(test.n, MISSING_LABEL)])
    joint = EmbeddingSet(X, y, cal.num_classes)
    return joint, np.arange(cal.n), np.arange(cal.n, cal.n + test.n)
