"""Sequence scoring: the oracle stand-in and the saber-score/v1 remote client.

A scorer maps (query_id, ordered ICD ids) to a single real number where
higher is better. The oracle is a closed-form deterministic surrogate for
log-likelihood scoring by a large model: it rewards task-tag agreement and
question similarity, penalizes redundancy between chosen ICDs, and weights
later positions more so that order matters.
"""

from __future__ import annotations

import json
import math
import socket
import threading
import time
from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np

from .store import DemoLibrary, QuerySample

WIRE_FORMAT = "saber-score/v1"


@dataclass(frozen=True)
class ScoreRequest:
    query_id: str
    icd_ids: tuple[str, ...]


class ScorerError(RuntimeError):
    """Scorer-side failure (non-retriable)."""


class ScorerTransportError(RuntimeError):
    """Transport failure (retriable)."""


class Scorer(Protocol):
    def score(self, req: ScoreRequest) -> float: ...


@dataclass
class OracleConfig:
    w_match: float = 1.0
    w_sim: float = 0.5
    w_red: float = 0.5
    w_pos: float = 0.1


class OracleScorer:
    """Deterministic closed-form scorer over a library and query set.

    score(query, [x_1..x_j]) =
        sum_{i=1..j} (1 + w_pos*i) * ( w_match*[task_i == task_q]
                                       + w_sim*cos(q_i, q_q)
                                       - w_red*max_{i'<i} cos(qr_i, qr_{i'}) )
    with the redundancy max taken as 0 at i=1. Summation is strictly
    left-to-right so results are bitwise reproducible.
    """

    def __init__(
        self,
        library: DemoLibrary,
        queries: list[QuerySample],
        cfg: Optional[OracleConfig] = None,
        query_tasks: Optional[dict[str, str]] = None,
    ):
        self.cfg = cfg or OracleConfig()
        self._lib = library
        self._queries = {q.id: q for q in queries}
        self._query_tasks = query_tasks or {q.id: q.task_tag for q in queries}
        self._lock = threading.Lock()
        # Normalized q and qr rows for O(1) cosine lookups during search.
        self._ids = library.ids()
        self._index = {demo_id: i for i, demo_id in enumerate(self._ids)}
        self._tasks = [library[i].task_tag for i in self._ids]
        self._qhat: dict[str, np.ndarray] = {}
        qmat = np.zeros((len(self._ids), library.dim))
        qrmat = np.zeros((len(self._ids), library.dim))
        for i, demo_id in enumerate(self._ids):
            rec = library[demo_id]
            if rec.q is None or rec.qr is None:
                raise ScorerError(f"demo {demo_id!r} missing q or qr vector")
            qmat[i] = rec.q / np.linalg.norm(rec.q)
            qrmat[i] = rec.qr / np.linalg.norm(rec.qr)
        self._qn = qmat
        self._qrn = qrmat
        self._qr_cos: dict[tuple[int, int], float] = {}
        self._q_cos: dict[str, np.ndarray] = {}

    def _query_cos(self, query_id: str) -> np.ndarray:
        with self._lock:
            cached = self._q_cos.get(query_id)
            if cached is None:
                qs = self._queries[query_id]
                qhat = qs.q / np.linalg.norm(qs.q)
                cached = self._qn @ qhat
                self._q_cos[query_id] = cached
        return cached

    def _pair_cos(self, a: int, b: int) -> float:
        key = (a, b) if a <= b else (b, a)
        with self._lock:
            val = self._qr_cos.get(key)
            if val is None:
                val = float(np.dot(self._qrn[a], self._qrn[b]))
                self._qr_cos[key] = val
        return val

    def score(self, req: ScoreRequest) -> float:
        if req.query_id not in self._queries:
            raise ScorerError(f"unknown query id {req.query_id!r}")
        cfg = self.cfg
        q_cos = self._query_cos(req.query_id)
        task_q = self._query_tasks.get(req.query_id, "")
        total = 0.0
        idxs: list[int] = []
        for pos, demo_id in enumerate(req.icd_ids, start=1):
            di = self._index.get(demo_id)
            if di is None:
                raise ScorerError(f"unknown demo id {demo_id!r}")
            red = 0.0
            if idxs:
                red = max(self._pair_cos(di, prev) for prev in idxs)
            term = (
                cfg.w_match * (1.0 if self._tasks[di] == task_q else 0.0)
                + cfg.w_sim * float(q_cos[di])
                - cfg.w_red * red
            )
            total += (1.0 + cfg.w_pos * pos) * term
            idxs.append(di)
        return total


def encode_request(req_id: int, req: ScoreRequest) -> bytes:
    obj = {"id": req_id, "query": req.query_id, "icds": list(req.icd_ids)}
    return (json.dumps(obj) + "\n").encode("utf-8")


def decode_response(line: bytes) -> tuple[int, Optional[float], Optional[str]]:
    """Parse one response line into (id, score, error)."""
    obj = json.loads(line.decode("utf-8"))
    rid = obj.get("id")
    if not isinstance(rid, int):
        raise ScorerTransportError(f"response missing integer id: {obj!r}")
    if "error" in obj:
        return rid, None, str(obj["error"])
    score = obj.get("score")
    if not isinstance(score, (int, float)) or not math.isfinite(score):
        raise ScorerTransportError(f"response {rid}: missing or non-finite score")
    return rid, float(score), None


class RemoteScorer:
    """Client for a saber-score/v1 endpoint over TCP.

    Requests carry a monotonically increasing id; responses may arrive in
    any order and are matched back by id. Transport errors are retried up
    to `retries` times with exponential backoff; scorer-reported errors
    are surfaced immediately and never retried.
    """

    def __init__(
        self,
        endpoint: str,
        timeout: float = 120.0,
        retries: int = 3,
        backoff: float = 0.5,
    ):
        host, _, port = endpoint.removeprefix("tcp://").rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"endpoint must be host:port, got {endpoint!r}")
        self._addr = (host, int(port))
        self._timeout = timeout
        self._retries = retries
        self._backoff = backoff
        self._lock = threading.Lock()
        self._sock: Optional[socket.socket] = None
        self._buf = b""
        self._next_id = 0
        self._pending: dict[int, tuple[Optional[float], Optional[str]]] = {}

    def close(self) -> None:
        with self._lock:
            if self._sock is not None:
                self._sock.close()
                self._sock = None
                self._buf = b""

    def _connect(self) -> socket.socket:
        if self._sock is None:
            self._sock = socket.create_connection(self._addr, timeout=self._timeout)
        return self._sock

    def _read_line(self, sock: socket.socket) -> bytes:
        while b"\n" not in self._buf:
            chunk = sock.recv(65536)
            if not chunk:
                raise ScorerTransportError("connection closed by scorer")
            self._buf += chunk
        line, self._buf = self._buf.split(b"\n", 1)
        return line

    def _exchange(self, req: ScoreRequest) -> float:
        with self._lock:
            rid = self._next_id
            self._next_id += 1
            sock = self._connect()
            sock.sendall(encode_request(rid, req))
            while rid not in self._pending:
                got, score, err = decode_response(self._read_line(sock))
                self._pending[got] = (score, err)
            score, err = self._pending.pop(rid)
        if err is not None:
            raise ScorerError(err)
        assert score is not None
        return score

    def score(self, req: ScoreRequest) -> float:
        last: Optional[Exception] = None
        for attempt in range(self._retries + 1):
            try:
                return self._exchange(req)
            except ScorerError:
                raise
            except (OSError, ScorerTransportError, json.JSONDecodeError) as e:
                last = e
                self.close()
                if attempt < self._retries:
                    time.sleep(self._backoff * (2**attempt))
        raise ScorerTransportError(f"scorer unreachable after retries: {last}")

    def score_many(self, reqs: list[ScoreRequest]) -> list[float]:
        """Pipeline a batch of requests on one connection, matching by id."""
        last: Optional[Exception] = None
        for attempt in range(self._retries + 1):
            try:
                return self._exchange_many(reqs)
            except ScorerError:
                raise
            except (OSError, ScorerTransportError, json.JSONDecodeError) as e:
                last = e
                self.close()
                if attempt < self._retries:
                    time.sleep(self._backoff * (2**attempt))
        raise ScorerTransportError(f"scorer unreachable after retries: {last}")

    def _exchange_many(self, reqs: list[ScoreRequest]) -> list[float]:
        with self._lock:
            ids = []
            sock = self._connect()
            payload = b""
            for req in reqs:
                rid = self._next_id
                self._next_id += 1
                ids.append(rid)
                payload += encode_request(rid, req)
            sock.sendall(payload)
            want = set(ids)
            while want - self._pending.keys():
                got, score, err = decode_response(self._read_line(sock))
                self._pending[got] = (score, err)
            results = [self._pending.pop(rid) for rid in ids]
        out = []
        for score, err in results:
            if err is not None:
                raise ScorerError(err)
            assert score is not None
            out.append(score)
        return out


class CountingScorer:
    """Wraps a scorer and counts calls; used by the forge for logging."""

    def __init__(self, inner: Scorer):
        self.inner = inner
        self.calls = 0
        self._lock = threading.Lock()

    def score(self, req: ScoreRequest) -> float:
        with self._lock:
            self.calls += 1
        return self.inner.score(req)


def make_scorer(
    backend: str,
    library: DemoLibrary,
    queries: list[QuerySample],
    oracle_cfg: Optional[OracleConfig] = None,
    endpoint: str = "",
    query_tasks: Optional[dict[str, str]] = None,
) -> Scorer:
    if backend == "oracle":
        return OracleScorer(library, queries, oracle_cfg, query_tasks=query_tasks)
    if backend == "remote":
        if not endpoint:
            raise ValueError("remote scorer requires an endpoint")
        return RemoteScorer(endpoint)
    raise ValueError(f"unknown scorer backend {backend!r}")


__all__ = [
    "ScoreRequest",
    "Scorer",
    "ScorerError",
    "ScorerTransportError",
    "OracleConfig",
    "OracleScorer",
    "RemoteScorer",
    "CountingScorer",
    "make_scorer",
    "encode_request",
    "decode_response",
    "WIRE_FORMAT",
]
