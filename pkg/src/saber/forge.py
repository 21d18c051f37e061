"""Training-data construction: cluster-based query selection, candidate
sampling, and scored beam search emitting the sequence set D_S."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .scorer import CountingScorer, Scorer, ScoreRequest
from .seeding import derive_seed
from .store import DemoLibrary, DemoRecord, QuerySample

log = logging.getLogger(__name__)

DS_FORMAT = "saber-ds/v1"


@dataclass
class ForgeConfig:
    k: int = 8  # clusters
    m: int = 4  # queries per cluster
    N: int = 4  # training shots
    cand: int = 0  # candidate pool per query; 0 means 64*N
    beam: int = 0  # beam width; 0 means 2*N
    seed: int = 0

    def __post_init__(self):
        if self.cand == 0:
            self.cand = 64 * self.N
        if self.beam == 0:
            self.beam = 2 * self.N
        if min(self.k, self.m, self.N) < 1 or self.beam < 1:
            raise ValueError("k, m, N, beam must all be >= 1")
        if self.cand < self.N:
            raise ValueError("candidate pool smaller than shot count")


@dataclass
class SequenceExample:
    query_id: str
    icd_ids: list[str]
    score: float

    def validate(self, library: DemoLibrary, N: int) -> None:
        if len(self.icd_ids) != N:
            raise ValueError(f"sequence for {self.query_id!r} has {len(self.icd_ids)} ICDs, expected {N}")
        if len(set(self.icd_ids)) != len(self.icd_ids):
            raise ValueError(f"sequence for {self.query_id!r} has duplicate ICD ids")
        for demo_id in self.icd_ids:
            if demo_id not in library:
                raise ValueError(f"sequence for {self.query_id!r} references unknown id {demo_id!r}")


def kmeans_partition(
    points: np.ndarray, k: int, seed: int, max_iter: int = 100
) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding.

    Converges when assignments stop changing or after max_iter sweeps.
    An emptied cluster is repaired by stealing the point farthest from
    the largest cluster's centroid.
    """
    n = points.shape[0]
    if n < k:
        raise ValueError(f"need at least {k} points, got {n}")
    rng = np.random.default_rng(seed)

    # k-means++ seeding
    centroids = np.empty((k, points.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = points[first]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for c in range(1, k):
        total = float(d2.sum())
        if total == 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[c] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centroids[c]) ** 2, axis=1))

    assign = np.full(n, -1, dtype=np.int64)
    for _ in range(max_iter):
        dists = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = dists.argmin(axis=1)
        for c in range(k):
            members = new_assign == c
            if not members.any():
                sizes = np.bincount(new_assign, minlength=k)
                big = int(sizes.argmax())
                big_members = np.flatnonzero(new_assign == big)
                far = big_members[dists[big_members, big].argmax()]
                new_assign[far] = c
                members = new_assign == c
            centroids[c] = points[members].mean(axis=0)
        if (new_assign == assign).all():
            break
        assign = new_assign
    return assign, centroids


def kmeans_inertia(points: np.ndarray, assign: np.ndarray, centroids: np.ndarray) -> float:
    return float(((points - centroids[assign]) ** 2).sum())


def select_query_set(
    library: DemoLibrary,
    assignments: np.ndarray,
    centroids: np.ndarray,
    m: int,
) -> tuple[list[QuerySample], DemoLibrary, dict[str, str]]:
    """Split off the m records nearest each centroid as query samples.

    Returns (query set, remaining demonstration library, ground-truth map).
    Distances are Euclidean over image embeddings; ties break by library
    insertion order.
    """
    ids = library.ids()
    k = centroids.shape[0]
    query_ids: list[str] = []
    for c in range(k):
        members = [i for i in range(len(ids)) if assignments[i] == c]
        if len(members) < m:
            raise ValueError(f"cluster {c} has {len(members)} records, need {m}")
        members.sort(
            key=lambda i: (float(np.sum((library[ids[i]].img - centroids[c]) ** 2)), i)
        )
        query_ids.extend(ids[i] for i in members[:m])
    query_set: list[QuerySample] = []
    gt_map: dict[str, str] = {}
    chosen = set(query_ids)
    for qid in query_ids:
        rec = library[qid]
        if rec.img is None or rec.q is None:
            raise ValueError(f"record {qid!r} cannot become a query: missing img or q")
        query_set.append(
            QuerySample(id=qid, img=rec.img, q=rec.q, gt_result=rec.text_r or "", task_tag=rec.task_tag)
        )
        gt_map[qid] = rec.text_r or ""
    remaining = DemoLibrary(dim=library.dim)
    for demo_id in ids:
        if demo_id not in chosen:
            remaining.add(library[demo_id])
    return query_set, remaining, gt_map


def sample_candidates(
    library: DemoLibrary, cand: int, seed: int, query_id: str
) -> list[DemoRecord]:
    """Uniform sample without replacement, seeded per (seed, query_id)."""
    ids = library.ids()
    rng = np.random.default_rng(derive_seed(seed, "cand", query_id))
    if len(ids) < cand:
        log.warning(
            "candidate pool %d smaller than requested %d for query %s; taking all",
            len(ids), cand, query_id,
        )
        cand = len(ids)
    picked = rng.choice(len(ids), size=cand, replace=False)
    return [library[ids[i]] for i in picked]


def greedy_extend(
    partial: list[str],
    cands: list[DemoRecord],
    query_id: str,
    scorer: Scorer,
) -> str:
    """The candidate maximizing the score of the extended sequence.

    The incremental-gain argmax equals the extended-score argmax since
    the base score is constant over candidates. Ties break by id order.
    """
    used = set(partial)
    best_id: str | None = None
    best_score = -np.inf
    for rec in sorted(cands, key=lambda r: r.id):
        if rec.id in used:
            continue
        s = scorer.score(ScoreRequest(query_id, tuple(partial) + (rec.id,)))
        if s > best_score:
            best_score, best_id = s, rec.id
    if best_id is None:
        raise ValueError("no unused candidates left to extend the sequence")
    return best_id


def beam_search(
    query_id: str,
    cands: list[DemoRecord],
    N: int,
    beam: int,
    scorer: Scorer,
) -> list[SequenceExample]:
    """Beam search over ordered no-repeat ICD sequences of length N.

    Every beam entry is expanded with every unused candidate at each step;
    the top `beam` extended sequences survive, ranked by score with ties
    broken by the ordered id tuple. Duplicated id tuples are merged.
    """
    if len(cands) < N:
        raise ValueError(f"need at least {N} candidates, got {len(cands)}")
    cand_ids = sorted(rec.id for rec in cands)
    beams: list[tuple[float, tuple[str, ...]]] = [(0.0, ())]
    for _ in range(N):
        expanded: dict[tuple[str, ...], float] = {}
        for _, prefix in beams:
            used = set(prefix)
            for cid in cand_ids:
                if cid in used:
                    continue
                seq = prefix + (cid,)
                if seq not in expanded:
                    expanded[seq] = scorer.score(ScoreRequest(query_id, seq))
        beams = sorted(
            ((s, seq) for seq, s in expanded.items()),
            key=lambda item: (-item[0], item[1]),
        )[:beam]
    return [SequenceExample(query_id, list(seq), s) for s, seq in beams]


def build_dataset(
    library: DemoLibrary,
    queries: list[QuerySample],
    scorer: Scorer,
    cfg: ForgeConfig,
) -> list[SequenceExample]:
    """Run candidate sampling + beam search per query; emit 2N sequences each."""
    counting = CountingScorer(scorer)
    out: list[SequenceExample] = []
    failures = 0
    for qs in sorted(queries, key=lambda q: q.id):
        try:
            cands = sample_candidates(library, cfg.cand, cfg.seed, qs.id)
            seqs = beam_search(qs.id, cands, cfg.N, cfg.beam, counting)
        except Exception:
            log.exception("forge failed for query %s; skipping", qs.id)
            failures += 1
            continue
        out.extend(seqs)
        log.debug("query %s: %d sequences, best score %.4f", qs.id, len(seqs), seqs[0].score)
    if not out:
        raise RuntimeError("all queries failed during dataset construction")
    log.info(
        "built %d sequences from %d queries (%d failed), %d scorer calls",
        len(out), len(queries), failures, counting.calls,
    )
    return out


def save_dataset(seqs: list[SequenceExample], N: int, path: str) -> None:
    lines = [json.dumps({"format": DS_FORMAT, "N": N})]
    for ex in seqs:
        lines.append(
            json.dumps({"query": ex.query_id, "icds": ex.icd_ids, "score": ex.score})
        )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path: str, library: DemoLibrary | None = None) -> tuple[list[SequenceExample], int]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().split("\n") if ln.strip()]
    header = json.loads(lines[0])
    if header.get("format") != DS_FORMAT:
        raise ValueError(f"expected format {DS_FORMAT!r}")
    N = int(header["N"])
    seqs = []
    for ln in lines[1:]:
        obj = json.loads(ln)
        ex = SequenceExample(obj["query"], list(obj["icds"]), float(obj["score"]))
        if library is not None:
            ex.validate(library, N)
        seqs.append(ex)
    return seqs, N
