"""JSON affine documents written by ``register`` and ``synth``."""

import json

import numpy as np

from . import __version__
from .affine import AffineParams, build_matrix, params_to_world_matrix
from .errors import DocumentError

SCHEMA_VERSION = 1
_GROUPS = ("t", "r", "s", "k")


def _rows(m):
    return [[float(v) for v in row] for row in np.asarray(m)]


def make_document(params, fixed=None, moving=None, metadata=None):
    """Build the document dictionary for ``params``.

    The millimetre matrix needs both grids; without them it is omitted.
    """
    doc = {
        "schema_version": SCHEMA_VERSION,
        "params": {g: [float(v) for v in getattr(params, g)] for g in _GROUPS},
        "matrix_normalized": _rows(build_matrix(params)),
    }
    if fixed is not None and moving is not None:
        doc["matrix_world_mm"] = _rows(params_to_world_matrix(params, fixed, moving))
    meta = {"tool_version": __version__}
    meta.update(metadata or {})
    doc["metadata"] = meta
    return doc


def dumps(doc):
    # repr-precision floats keep the round trip exact
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def write_document(path, params, fixed=None, moving=None, metadata=None):
    doc = make_document(params, fixed, moving, metadata)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(doc))
    return doc


def params_from_document(doc):
    """Validate ``doc`` and return its :class:`AffineParams`.

    Raises :class:`DocumentError` when fields are missing, malformed or when
    the stored normalized matrix disagrees with the parameters.
    """
    if not isinstance(doc, dict):
        raise DocumentError("affine document must be a JSON object")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise DocumentError(f"unsupported schema_version {version!r}")
    groups = doc.get("params")
    if not isinstance(groups, dict):
        raise DocumentError("missing params object")
    try:
        values = [tuple(float(v) for v in groups[g]) for g in _GROUPS]
    except (KeyError, TypeError, ValueError) as exc:
        raise DocumentError(f"malformed params: {exc}") from exc
    if any(len(v) != 3 for v in values):
        raise DocumentError("each parameter group needs three values")
    if not np.all(np.isfinite(values)):
        raise DocumentError("non-finite parameter")
    p = AffineParams(*values)
    stored = doc.get("matrix_normalized")
    if stored is not None:
        try:
            stored = np.asarray(stored, dtype=float)
        except (TypeError, ValueError) as exc:
            raise DocumentError(f"malformed matrix_normalized: {exc}") from exc
        if stored.shape != (4, 4) or not np.allclose(stored, build_matrix(p), rtol=0, atol=1e-12):
            raise DocumentError("matrix_normalized does not match params")
    return p


def read_document(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DocumentError(f"{path}: not valid JSON ({exc})") from exc
    return params_from_document(doc), doc
