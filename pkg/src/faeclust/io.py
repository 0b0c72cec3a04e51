"""Plain CSV / JSON readers and writers used by the command line tool.

All writers go through :func:`atomic_write` so an interrupted run never
leaves a half-written table behind.  Floats are written with 17 significant
digits, which round-trips doubles exactly.
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
from collections import OrderedDict

import numpy as np

from .errors import InvalidSamplePath, LengthMismatch, ShapeMismatch
from .fdata import SamplePath

LONG_HEADER = ("subject_id", "dim", "t", "value")
LABEL_HEADER = ("subject_id", "label")


def _fmt(x):
    return repr(float(x))


def atomic_write(path, text):
    """Write ``text`` to ``path`` via a temporary file in the same directory."""
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _rows(path, header):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise InvalidSamplePath(f"{path}: empty file") from None
        first = [c.strip() for c in first]
        if tuple(first) != tuple(header):
            raise InvalidSamplePath(f"{path}: expected header {','.join(header)}, got {','.join(first)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise InvalidSamplePath(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            yield lineno, row


def read_long_csv(path):
    """Long-format observations -> list of :class:`SamplePath` (subject order of first appearance).

    Every dimension of a subject must be observed at the same times; time
    order within a subject is kept as written so violations surface during
    validation.
    """
    data = OrderedDict()
    for lineno, row in _rows(path, LONG_HEADER):
        try:
            sid, dim, t, v = int(row[0]), int(row[1]), float(row[2]), float(row[3])
        except ValueError:
            raise InvalidSamplePath(f"{path}:{lineno}: cannot parse {row}") from None
        if dim < 0:
            raise InvalidSamplePath(f"{path}:{lineno}: negative dim")
        data.setdefault(sid, {}).setdefault(dim, ([], []))
        data[sid][dim][0].append(t)
        data[sid][dim][1].append(v)
    if not data:
        raise InvalidSamplePath(f"{path}: no observations")
    p = None
    paths = []
    for sid, dims in data.items():
        if sorted(dims) != list(range(len(dims))):
            raise InvalidSamplePath(f"subject {sid}: dims must be 0..p-1, got {sorted(dims)}")
        if p is None:
            p = len(dims)
        elif len(dims) != p:
            raise InvalidSamplePath(f"subject {sid}: {len(dims)} dims, expected {p}")
        times = np.asarray(dims[0][0])
        cols = []
        for d in range(p):
            td, vd = dims[d]
            if len(td) != len(times) or np.any(np.asarray(td) != times):
                raise InvalidSamplePath(f"subject {sid}: dim {d} observed at different times than dim 0")
            cols.append(vd)
        paths.append(SamplePath(sid, times, np.asarray(cols).T))
    return paths


def long_csv_text(paths):
    lines = [",".join(LONG_HEADER)]
    for sp in paths:
        for d in range(sp.values.shape[1]):
            for t, v in zip(sp.times, sp.values[:, d]):
                lines.append(f"{sp.subject_id},{d},{_fmt(t)},{_fmt(v)}")
    return "\n".join(lines) + "\n"


def write_long_csv(path, paths):
    atomic_write(path, long_csv_text(paths))


def read_labels(path):
    """``(subject_ids, labels)`` arrays in file order."""
    ids, labs = [], []
    for lineno, row in _rows(path, LABEL_HEADER):
        try:
            ids.append(int(row[0]))
            labs.append(int(row[1]))
        except ValueError:
            raise InvalidSamplePath(f"{path}:{lineno}: cannot parse {row}") from None
    if len(set(ids)) != len(ids):
        raise InvalidSamplePath(f"{path}: duplicate subject ids")
    return np.asarray(ids, dtype=np.int64), np.asarray(labs, dtype=np.int64)


def write_labels(path, subject_ids, labels):
    if len(subject_ids) != len(labels):
        raise LengthMismatch("subject ids and labels differ in length")
    lines = [",".join(LABEL_HEADER)] + [f"{int(s)},{int(k)}" for s, k in zip(subject_ids, labels)]
    atomic_write(path, "\n".join(lines) + "\n")


def align_labels(ids_a, labels_a, ids_b, labels_b):
    """Match two label files on subject id; both must cover the same subjects."""
    if set(ids_a.tolist()) != set(ids_b.tolist()):
        raise LengthMismatch("label files cover different subjects")
    pos = {s: i for i, s in enumerate(ids_b.tolist())}
    order = np.array([pos[s] for s in ids_a.tolist()], dtype=np.int64)
    return labels_a, labels_b[order]


def write_matrix(path, subject_ids, X, prefix="x"):
    """Rows ``subject_id,x0,x1,...``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    header = ["subject_id"] + [f"{prefix}{k}" for k in range(X.shape[1])]
    lines = [",".join(header)]
    for s, row in zip(subject_ids, X):
        lines.append(",".join([str(int(s))] + [_fmt(v) for v in row]))
    atomic_write(path, "\n".join(lines) + "\n")


def read_matrix(path):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "subject_id":
            raise ShapeMismatch(f"{path}: first column must be subject_id")
        ids, rows = [], []
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise ShapeMismatch(f"{path}: ragged row")
            ids.append(int(row[0]))
            rows.append([float(v) for v in row[1:]])
    if not rows:
        raise ShapeMismatch(f"{path}: no rows")
    return np.asarray(ids, dtype=np.int64), np.asarray(rows)


def write_pairs(path, rows, cols, vals, names=("i", "j", "d")):
    lines = [",".join(names)] + [f"{int(i)},{int(j)},{_fmt(v)}" for i, j, v in zip(rows, cols, vals)]
    atomic_write(path, "\n".join(lines) + "\n")


def read_pairs(path, names=("i", "j", "s")):
    rows, cols, vals = [], [], []
    for lineno, row in _rows(path, names):
        try:
            rows.append(int(row[0]))
            cols.append(int(row[1]))
            vals.append(float(row[2]))
        except ValueError:
            raise ShapeMismatch(f"{path}:{lineno}: cannot parse {row}") from None
    return np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64), np.asarray(vals)
