"""Structured-text containers shared by every on-disk artifact.

Files are JSON documents. Floats are written with 17 significant digits so
that a save/load round trip reproduces every double bit for bit (the stock
``json`` encoder gives no control over float formatting, hence the small
writer below).
"""

from __future__ import annotations

import csv
import json
import math
import os
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1


class ArtifactFormatError(ValueError):
    """Raised when a file does not match the expected container schema."""


def format_float(value: float) -> str:
    value = float(value)
    if math.isnan(value) or math.isinf(value):
        raise ValueError(f"non-finite value {value!r} cannot be serialized")
    text = format(value, ".17g")
    # keep a float marker so that e.g. -0.0 and 1.0 read back as floats
    return text if any(c in text for c in ".e") else text + ".0"


def _dump(obj, out: list[str], indent: int, level: int) -> None:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if obj is None:
        out.append("null")
    elif isinstance(obj, (bool, np.bool_)):
        out.append("true" if obj else "false")
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(format_float(obj))
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{\n")
        items = list(obj.items())
        for i, (key, value) in enumerate(items):
            out.append(f"{pad}{json.dumps(str(key))}: ")
            _dump(value, out, indent, level + 1)
            out.append(",\n" if i < len(items) - 1 else "\n")
        out.append(end + "}")
    elif isinstance(obj, (list, tuple)):
        # numeric rows stay on one line to keep big matrices readable
        if all(isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool) for v in obj):
            out.append("[" + ", ".join(format_float(v) if isinstance(v, (float, np.floating)) else str(int(v)) for v in obj) + "]")
            return
        if not obj:
            out.append("[]")
            return
        out.append("[\n")
        for i, value in enumerate(obj):
            out.append(pad)
            _dump(value, out, indent, level + 1)
            out.append(",\n" if i < len(obj) - 1 else "\n")
        out.append(end + "]")
    else:
        raise TypeError(f"cannot serialize object of type {type(obj).__name__}")


def dumps(obj, indent: int = 1) -> str:
    out: list[str] = []
    _dump(obj, out, indent, 0)
    return "".join(out) + "\n"


def write_document(path, kind: str, payload: dict) -> Path:
    """Write ``payload`` under a ``{schema_version, kind}`` header atomically."""
    path = Path(path)
    doc = {"schema_version": SCHEMA_VERSION, "kind": kind}
    doc.update(payload)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(dumps(doc))
    os.replace(tmp, path)
    return path


def read_document(path, kind: str) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ArtifactFormatError(f"{path}: corrupted container ({exc})") from exc
    if not isinstance(doc, dict):
        raise ArtifactFormatError(f"{path}: top level must be an object")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ArtifactFormatError(
            f"{path}: schema_version {version!r} is not supported (expected {SCHEMA_VERSION})"
        )
    if doc.get("kind") != kind:
        raise ArtifactFormatError(f"{path}: expected a {kind!r} document, found {doc.get('kind')!r}")
    return doc


def write_csv(path, header: list[str], rows) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_float(v) for v in row])
    os.replace(tmp, path)
    return path


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = [[float(v) for v in row] for row in reader]
    return header, np.array(data, dtype=float).reshape(len(data), len(header))
