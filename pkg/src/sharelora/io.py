"""Structured-text (JSON) files with bit-faithful floats.

``dumps`` writes every float with 17 significant digits so ``loads`` gives
back the identical double. Non-finite floats are not representable and are
rejected.
"""

import json
import math

import numpy as np

from .errors import ParseError, UnsupportedVersionError


def _fmt_float(x):
    if not math.isfinite(x):
        raise ValueError(f"cannot serialise non-finite float {x!r}")
    return format(x, ".17g")


def _encode(obj, out):
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (bool, np.bool_)) or obj is None:
        out.append(json.dumps(obj if obj is None else bool(obj)))
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(_fmt_float(float(obj)))
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, dict):
        out.append("{")
        for i, (k, v) in enumerate(obj.items()):
            if i:
                out.append(",\n" if isinstance(v, (dict, list, np.ndarray)) else ",")
            out.append(json.dumps(str(k)) + ":")
            _encode(v, out)
        out.append("}")
    elif isinstance(obj, (list, tuple)):
        out.append("[")
        for i, v in enumerate(obj):
            if i:
                out.append(",")
            _encode(v, out)
        out.append("]")
    else:
        raise TypeError(f"cannot serialise {type(obj).__name__}")


def dumps(obj):
    out = []
    _encode(obj, out)
    return "".join(out) + "\n"


def write(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(obj))


def read(path, kind, version):
    """Load a JSON document and check its ``format`` and ``version`` fields."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: top level must be an object")
    if doc.get("format") != kind:
        raise ParseError(f"{path}: field 'format': expected {kind!r}, got {doc.get('format')!r}")
    if doc.get("version") != version:
        raise UnsupportedVersionError(
            f"{path}: field 'version': unsupported version {doc.get('version')!r} (expected {version})")
    return doc


def field(doc, name, path="", shape=None):
    """Fetch ``doc[name]`` as a float array, checking its shape when given."""
    where = f"{path}{name}"
    if name not in doc:
        raise ParseError(f"missing field {where!r}")
    try:
        arr = np.asarray(doc[name], dtype=float)
    except (TypeError, ValueError):
        raise ParseError(f"field {where!r} is not a numeric array") from None
    if shape is not None and arr.shape != tuple(shape):
        raise ParseError(f"field {where!r} has shape {arr.shape}, expected {tuple(shape)}")
    return arr
