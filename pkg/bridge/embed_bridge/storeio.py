"""Writer/reader for icdstore/v1 line-delimited JSON files.

This is the bridge's own implementation of the interchange format — the
bridge talks to the selection pipeline only through files and sockets,
never through its Python API. Floats are emitted at 9 significant digits
and lines end with LF so files are byte-reproducible.
"""

from __future__ import annotations

import json
from typing import Iterable, Optional

import numpy as np

STORE_FORMAT = "icdstore/v1"
_FLOAT_FMT = "{:.9g}"


class BridgeStoreError(ValueError):
    pass


def fmt_vec(v: Optional[np.ndarray]) -> Optional[list[float]]:
    if v is None:
        return None
    return [float(_FLOAT_FMT.format(x)) for x in np.asarray(v, dtype=np.float64)]


def _dump(obj: dict) -> str:
    return json.dumps({k: v for k, v in obj.items() if v is not None}, sort_keys=False)


def write_store(records: Iterable[dict], dim: int, path: str) -> None:
    """Write the header line and one record per line, in the given order.

    Records are plain dicts already shaped like store lines; vector values
    must be pre-formatted lists (use fmt_vec)."""
    out = [json.dumps({"format": STORE_FORMAT, "dim": dim})]
    out.extend(_dump(rec) for rec in records)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(out) + "\n")


def read_store(path: str) -> tuple[int, list[dict]]:
    """Read a store file into (dim, record dicts). Validates only what the
    bridge needs: header shape, per-record role/id, vector lengths."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [l for l in fh.read().split("\n") if l.strip()]
    if not lines:
        raise BridgeStoreError("empty store file")
    header = json.loads(lines[0])
    if header.get("format") != STORE_FORMAT:
        raise BridgeStoreError(f"expected format {STORE_FORMAT!r}")
    dim = header.get("dim")
    if not isinstance(dim, int) or dim <= 0:
        raise BridgeStoreError("header dim must be a positive integer")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        obj = json.loads(line)
        role = obj.get("role")
        if role not in ("demo", "query", "inst"):
            raise BridgeStoreError(f"line {lineno}: unknown role {role!r}")
        for key in ("img", "q", "r", "qr", "pseudo_r", "inst"):
            if obj.get(key) is not None and len(obj[key]) != dim:
                raise BridgeStoreError(
                    f"line {lineno}: field {key!r} length {len(obj[key])} != dim {dim}"
                )
        records.append(obj)
    return dim, records
