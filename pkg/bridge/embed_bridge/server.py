"""saber-score/v1 scoring server.

Wire protocol: newline-delimited JSON over TCP. Request
`{"id": int, "query": str, "icds": [str, ...]}`; response
`{"id": int, "score": float}` or `{"id": int, "error": str}`. Requests
may be pipelined; each is answered as soon as its score is ready, so
responses can arrive out of order and are matched by id. A bad request
produces an error response with the same id and never tears down the
connection.

The score is the summed log-likelihood of the query's ground-truth
result tokens given the assembled few-shot prompt. The desk-scale model
is a deterministic stub whose per-token probabilities are hashes of
(model label, prompt-so-far, position, token) — prompt-sensitive and
exactly reproducible without a real LVLM.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import socketserver
import threading

from .storeio import read_store

log = logging.getLogger(__name__)


class ModelError(ValueError):
    """Bad scoring input (unknown ids, missing ground truth, ...)."""


class StubLogLikelihoodModel:
    """Deterministic stand-in for an LVLM's token log-likelihoods."""

    def __init__(self, label: str = "stub-lvlm"):
        self.label = label

    def result_logprob(self, prompt: str, result_text: str) -> float:
        tokens = result_text.split()
        if not tokens:
            raise ModelError("query has no ground-truth result text")
        total = 0.0
        prefix = prompt
        for i, tok in enumerate(tokens):
            h = hashlib.sha256(f"{self.label}|{prefix}|{i}|{tok}".encode()).digest()
            u = int.from_bytes(h[:8], "big") / 2.0**64
            total += math.log(0.05 + 0.9 * u)
            prefix = f"{prefix} {tok}"
        return total


def make_model(spec: str):
    if spec == "stub" or spec.startswith("stub:"):
        label = spec.partition(":")[2] or "stub-lvlm"
        return StubLogLikelihoodModel(label)
    raise ValueError(f"unknown model spec {spec!r}")


def assemble_prompt(inst_text: str, demos: list[dict], query: dict) -> str:
    """Generic template: instruction, then each demonstration, then the
    query block ending in an answer cue."""
    parts = []
    if inst_text:
        parts.append(inst_text + "\n")
    for d in demos:
        ref = d.get("image_ref") or d["id"]
        parts.append(
            "{image:%s}\nQuestion: %s\nAnswer: %s\n\n"
            % (ref, d.get("text_q") or "", d.get("text_r") or "")
        )
    qref = query.get("image_ref") or query["id"]
    parts.append(
        "{image:%s}\nQuestion: %s\nAnswer:" % (qref, query.get("text_q") or query["id"])
    )
    return "".join(parts)


class ScoreStore:
    """Record lookup for the scorer: demos and queries by id."""

    def __init__(self, path: str):
        _, records = read_store(path)
        self.demos = {r["id"]: r for r in records if r["role"] == "demo"}
        self.queries = {r["id"]: r for r in records if r["role"] == "query"}
        insts = [r for r in records if r["role"] == "inst"]
        self.inst_text = insts[0].get("text_q", "") if insts else ""

    def score(self, model, query_id: str, icd_ids: list[str]) -> float:
        if query_id not in self.queries:
            raise ModelError(f"unknown query id {query_id!r}")
        missing = [i for i in icd_ids if i not in self.demos]
        if missing:
            raise ModelError(f"unknown demo id {missing[0]!r}")
        query = self.queries[query_id]
        prompt = assemble_prompt(
            self.inst_text, [self.demos[i] for i in icd_ids], query
        )
        return model.result_logprob(prompt, query.get("gt") or "")


class _ScorerServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True
    model = None
    store: ScoreStore | None = None


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        write_lock = threading.Lock()
        workers = []
        for raw in self.rfile:
            line = raw.strip()
            if not line:
                continue
            t = threading.Thread(target=self._answer, args=(line, write_lock))
            t.start()
            workers.append(t)
        for t in workers:
            t.join()

    def _answer(self, line: bytes, write_lock: threading.Lock) -> None:
        rid = -1
        try:
            obj = json.loads(line)
            if isinstance(obj, dict) and isinstance(obj.get("id"), int):
                rid = obj["id"]
            else:
                raise ModelError("request missing integer id")
            query = obj.get("query")
            icds = obj.get("icds")
            if not isinstance(query, str) or not isinstance(icds, list) or not all(
                isinstance(i, str) for i in icds
            ):
                raise ModelError("request needs string query and list-of-string icds")
            score = self.server.store.score(self.server.model, query, icds)
            resp = {"id": rid, "score": score}
        except Exception as e:  # one bad request must not kill the stream
            resp = {"id": rid, "error": f"{type(e).__name__}: {e}"}
        payload = (json.dumps(resp) + "\n").encode("utf-8")
        with write_lock:
            try:
                self.wfile.write(payload)
                self.wfile.flush()
            except OSError:
                log.warning("client went away before response %s", rid)


def serve_scorer(
    model, store_path: str, host: str = "127.0.0.1", port: int = 0
) -> _ScorerServer:
    """Bind a scorer server; caller runs serve_forever (or a thread does)."""
    server = _ScorerServer((host, port), _Handler)
    server.model = model
    server.store = ScoreStore(store_path)
    return server
