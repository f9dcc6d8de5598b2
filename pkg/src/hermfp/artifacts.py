"""Self-describing plain-text artifacts written atomically."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile

import numpy as np

__all__ = [
    "atomic_write",
    "metadata_lines",
    "write_csv",
    "read_csv",
    "write_grid",
    "read_grid",
    "content_hash",
    "PointCache",
]


def atomic_write(path, text):
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def content_hash(text):
    return hashlib.sha256(text.encode()).hexdigest()


def metadata_lines(meta):
    """``#``-prefixed header lines: one JSON document and its hash."""
    body = json.dumps(meta, sort_keys=True, separators=(",", ":"), default=str)
    return [f"# meta {body}", f"# meta-hash {content_hash(body)}"]


def _parse_meta(lines):
    meta = None
    for line in lines:
        if line.startswith("# meta "):
            body = line[len("# meta "):]
            meta = json.loads(body)
            expected = content_hash(body)
        elif line.startswith("# meta-hash ") and meta is not None:
            if line.split()[-1] != expected:
                raise ValueError("metadata hash mismatch")
    return meta


def _fmt(value, float_format):
    if isinstance(value, (float, np.floating)):
        return float_format % value
    return str(value)


def write_csv(path, columns, rows, meta=None, float_format="%.17g"):
    buf = io.StringIO()
    for line in metadata_lines(meta or {}):
        buf.write(line + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(v, float_format) for v in row])
    atomic_write(path, buf.getvalue())


def read_csv(path):
    """Return ``(meta, columns, rows)``; rows are lists of strings."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    comments = [line for line in lines if line.startswith("#")]
    data = [line for line in lines if line and not line.startswith("#")]
    reader = list(csv.reader(data))
    return _parse_meta(comments), reader[0], reader[1:]


def write_grid(path, axes, values, meta=None):
    """Plain-text grid: ``# x_min x_max nx [y_min y_max ny]`` then rows of values."""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    head = " ".join(f"{float(a[0])!r} {float(a[-1])!r} {len(a)}" for a in (np.asarray(ax, float) for ax in axes))
    lines = [f"# {head}"] + metadata_lines(meta or {})
    lines += [" ".join(f"{v:.17g}" for v in row) for row in values]
    atomic_write(path, "\n".join(lines) + "\n")


def read_grid(path):
    """Return ``(axes, values, meta)`` from a file written by :func:`write_grid`."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    parts = lines[0][1:].split()
    axes = [np.linspace(float(parts[i]), float(parts[i + 1]), int(parts[i + 2])) for i in range(0, len(parts), 3)]
    meta = _parse_meta([line for line in lines[1:] if line.startswith("#")])
    rows = [np.array(line.split(), dtype=float) for line in lines[1:] if line and not line.startswith("#")]
    return axes, np.array(rows), meta


class PointCache:
    """Per-point results of a sweep, stored as hash-checked JSON files.

    A point is reused on rerun only if its file parses and its checksum
    matches, so interrupted sweeps resume without trusting partial writes.
    """

    def __init__(self, directory, run_hash):
        self.directory = os.path.join(os.fspath(directory), ".cache", run_hash[:16])
        self.run_hash = run_hash

    def _path(self, key):
        name = hashlib.sha256(json.dumps(key, sort_keys=True, default=str).encode()).hexdigest()[:24]
        return os.path.join(self.directory, name + ".json")

    def get(self, key):
        path = self._path(key)
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, ValueError):
            return None
        body = json.dumps(doc.get("value"), sort_keys=True)
        if doc.get("run") != self.run_hash or doc.get("checksum") != content_hash(body):
            return None
        return doc["value"]

    def put(self, key, value):
        body = json.dumps(value, sort_keys=True)
        doc = {"run": self.run_hash, "key": key, "value": value, "checksum": content_hash(body)}
        atomic_write(self._path(key), json.dumps(doc, sort_keys=True))
