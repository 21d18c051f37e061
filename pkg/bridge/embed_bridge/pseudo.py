"""Fill pseudo-result vectors on query records.

Each query sample gets a pseudo_r embedding: the text encoding of a
draft answer, either supplied in a stub answers file (JSON id -> text)
or produced by a generation model from a randomly-sampled few-shot
prompt. The stub generator is deterministic, so reruns write identical
vectors.
"""

from __future__ import annotations

import hashlib
import json

from .encoder import DEFAULT_ENCODER, DualEncoder
from .server import assemble_prompt
from .storeio import fmt_vec, read_store, write_store


class StubGenerator:
    """Deterministic draft-answer generator keyed on the prompt."""

    def __init__(self, label: str = "stub-gen"):
        self.label = label

    def generate(self, prompt: str) -> str:
        digest = hashlib.sha256(f"{self.label}|{prompt}".encode()).hexdigest()[:8]
        return f"draft answer {digest}"


def _rs_prompt(records: list[dict], query: dict, n: int = 2) -> str:
    """Random-sampling prompt: n seeded-random demos ahead of the query."""
    demos = [r for r in records if r["role"] == "demo"]
    insts = [r for r in records if r["role"] == "inst"]
    seed = int.from_bytes(hashlib.sha256(query["id"].encode()).digest()[:4], "big")
    picked = [demos[(seed + i * 7919) % len(demos)] for i in range(min(n, len(demos)))]
    return assemble_prompt(insts[0].get("text_q", "") if insts else "", picked, query)


def fill_pseudo_results(
    store_path: str,
    out_path: str,
    answers_path: str | None = None,
    generator=None,
    encoder_id: str = DEFAULT_ENCODER,
) -> int:
    """Write a copy of the store with pseudo_r set on every query record.
    Returns the number of queries filled."""
    if answers_path is None and generator is None:
        raise ValueError("need a stub answers file or a generation model")
    answers = {}
    if answers_path is not None:
        with open(answers_path, "r", encoding="utf-8") as fh:
            answers = json.load(fh)
    dim, records = read_store(store_path)
    enc = DualEncoder(encoder_id)
    if enc.dim != dim:
        raise ValueError(f"encoder dim {enc.dim} != store dim {dim}")
    filled = 0
    for rec in records:
        if rec["role"] != "query":
            continue
        if rec["id"] in answers:
            answer = answers[rec["id"]]
        elif generator is not None:
            answer = generator.generate(_rs_prompt(records, rec))
        else:
            raise ValueError(f"no stub answer for query {rec['id']!r}")
        if not isinstance(answer, str) or not answer.strip():
            raise ValueError(f"empty answer for query {rec['id']!r}")
        rec["pseudo_r"] = fmt_vec(enc.encode_text(answer))
        filled += 1
    write_store(records, dim, out_path)
    return filled
