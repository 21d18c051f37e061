"""Demonstration data model and the icdstore/v1 line-delimited JSON format.

A store holds three kinds of records: demonstrations (the retrieval pool),
query samples (held-out items whose ground truth is kept aside), and an
optional instruction record. All embedding vectors in one store share a
single dimension declared in the header line.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

STORE_FORMAT = "icdstore/v1"

# 9 significant digits round-trips f32 exactly and keeps files inspectable.
_FLOAT_FMT = "{:.9g}"


class StoreError(ValueError):
    """Raised on malformed store files or invariant violations."""


@dataclass
class DemoRecord:
    """One demonstration: image/text embeddings plus optional raw fields."""

    id: str
    task_tag: str = ""
    img: Optional[np.ndarray] = None
    q: Optional[np.ndarray] = None
    r: Optional[np.ndarray] = None
    qr: Optional[np.ndarray] = None
    text_q: Optional[str] = None
    text_r: Optional[str] = None
    image_ref: Optional[str] = None


@dataclass
class QuerySample:
    """A held-out query: image + question embeddings, ground truth kept aside."""

    id: str
    img: np.ndarray
    q: np.ndarray
    gt_result: str = ""
    task_tag: str = ""
    pseudo_r: Optional[np.ndarray] = None


@dataclass
class InstructionRecord:
    """Instruction text plus the embedding of its simplified form."""

    inst_emb: np.ndarray
    text: str = ""
    simplified_text: str = ""


@dataclass
class DemoLibrary:
    """Insertion-ordered map of demonstrations with a fixed vector dimension."""

    dim: int
    records: dict[str, DemoRecord] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, demo_id: str) -> bool:
        return demo_id in self.records

    def __getitem__(self, demo_id: str) -> DemoRecord:
        return self.records[demo_id]

    def ids(self) -> list[str]:
        return list(self.records.keys())

    def add(self, rec: DemoRecord) -> None:
        if not rec.id:
            raise StoreError("record id must be nonempty")
        if rec.id in self.records:
            raise StoreError(f"duplicate id {rec.id!r}")
        for name in ("img", "q", "r", "qr"):
            v = getattr(rec, name)
            if v is not None and v.shape != (self.dim,):
                raise StoreError(
                    f"record {rec.id!r}: {name} has length {v.shape[0]}, "
                    f"store dim is {self.dim}"
                )
        self.records[rec.id] = rec


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two equal-length vectors.

    Raises on zero-norm inputs; callers must guard.
    """
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = math.sqrt(float(np.dot(a, a)))
    nb = math.sqrt(float(np.dot(b, b)))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine_sim: zero-norm vector")
    return float(np.dot(a, b)) / (na * nb)


def _vec(obj: dict, key: str, dim: int, lineno: int) -> Optional[np.ndarray]:
    if key not in obj or obj[key] is None:
        return None
    val = obj[key]
    if not isinstance(val, list) or not all(isinstance(x, (int, float)) for x in val):
        raise StoreError(f"line {lineno}: field {key!r} is not a float array")
    v = np.asarray(val, dtype=np.float64)
    if v.shape != (dim,):
        raise StoreError(
            f"line {lineno}: field {key!r} has length {v.shape[0]}, header dim is {dim}"
        )
    return v


def load_store(
    path: str,
) -> tuple[DemoLibrary, list[QuerySample], Optional[InstructionRecord]]:
    """Parse an icdstore/v1 file into library, query set, and instruction."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if not lines or not lines[0].strip():
        raise StoreError("empty store file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise StoreError(f"line 1: malformed JSON header: {e}") from e
    if header.get("format") != STORE_FORMAT:
        raise StoreError(f"line 1: expected format {STORE_FORMAT!r}")
    dim = header.get("dim")
    if not isinstance(dim, int) or dim <= 0:
        raise StoreError("line 1: header dim must be a positive integer")

    library = DemoLibrary(dim=dim)
    queries: list[QuerySample] = []
    seen: set[str] = set()
    inst: Optional[InstructionRecord] = None

    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise StoreError(f"line {lineno}: malformed JSON: {e}") from e
        role = obj.get("role")
        if role == "inst":
            emb = _vec(obj, "inst", dim, lineno)
            if emb is None:
                raise StoreError(f"line {lineno}: inst record missing 'inst' vector")
            inst = InstructionRecord(
                inst_emb=emb,
                text=obj.get("text_q", ""),
                simplified_text=obj.get("text_r", ""),
            )
            continue
        rec_id = obj.get("id")
        if not rec_id or not isinstance(rec_id, str):
            raise StoreError(f"line {lineno}: missing or invalid id")
        if rec_id in seen:
            raise StoreError(f"line {lineno}: duplicate id {rec_id!r}")
        seen.add(rec_id)
        img = _vec(obj, "img", dim, lineno)
        q = _vec(obj, "q", dim, lineno)
        if role == "demo":
            library.add(
                DemoRecord(
                    id=rec_id,
                    task_tag=obj.get("task", ""),
                    img=img,
                    q=q,
                    r=_vec(obj, "r", dim, lineno),
                    qr=_vec(obj, "qr", dim, lineno),
                    text_q=obj.get("text_q"),
                    text_r=obj.get("text_r"),
                    image_ref=obj.get("image_ref"),
                )
            )
        elif role == "query":
            if img is None or q is None:
                raise StoreError(f"line {lineno}: query record requires img and q")
            queries.append(
                QuerySample(
                    id=rec_id,
                    img=img,
                    q=q,
                    gt_result=obj.get("gt", ""),
                    task_tag=obj.get("task", ""),
                    pseudo_r=_vec(obj, "pseudo_r", dim, lineno),
                )
            )
        else:
            raise StoreError(f"line {lineno}: unknown role {role!r}")
    return library, queries, inst


def _fmt_vec(v: Optional[np.ndarray]) -> Optional[list[float]]:
    if v is None:
        return None
    return [float(_FLOAT_FMT.format(x)) for x in v]


def _dump(obj: dict) -> str:
    return json.dumps({k: v for k, v in obj.items() if v is not None}, sort_keys=False)


def save_store(
    library: DemoLibrary,
    queries: list[QuerySample],
    path: str,
    inst: Optional[InstructionRecord] = None,
) -> None:
    """Write an icdstore/v1 file with deterministic ordering (demos, queries, inst)."""
    if len(library) == 0:
        raise StoreError("refusing to save an empty library")
    out = [json.dumps({"format": STORE_FORMAT, "dim": library.dim})]
    for rec in library.records.values():
        out.append(
            _dump(
                {
                    "id": rec.id,
                    "role": "demo",
                    "task": rec.task_tag or None,
                    "img": _fmt_vec(rec.img),
                    "q": _fmt_vec(rec.q),
                    "r": _fmt_vec(rec.r),
                    "qr": _fmt_vec(rec.qr),
                    "text_q": rec.text_q,
                    "text_r": rec.text_r,
                    "image_ref": rec.image_ref,
                }
            )
        )
    for qs in queries:
        out.append(
            _dump(
                {
                    "id": qs.id,
                    "role": "query",
                    "task": qs.task_tag or None,
                    "img": _fmt_vec(qs.img),
                    "q": _fmt_vec(qs.q),
                    "gt": qs.gt_result or None,
                    "pseudo_r": _fmt_vec(qs.pseudo_r),
                }
            )
        )
    if inst is not None:
        out.append(
            _dump(
                {
                    "id": "__inst__",
                    "role": "inst",
                    "inst": _fmt_vec(inst.inst_emb),
                    "text_q": inst.text or None,
                    "text_r": inst.simplified_text or None,
                }
            )
        )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(out) + "\n")
