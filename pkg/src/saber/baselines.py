"""Configuration baselines, the answer-accuracy metric, and the
sequence-quality metrics (Gap and Variance)."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .scorer import Scorer, ScoreRequest
from .seeding import derive_seed
from .store import DemoLibrary, QuerySample, cosine_sim

log = logging.getLogger(__name__)

REPORT_FORMAT = "saber-report/v1"


def retrieve_rs(library: DemoLibrary, n: int, seed: int, query_id: str = "") -> list[str]:
    """Uniform sample of n distinct demo ids, seeded per (seed, query)."""
    ids = library.ids()
    if n > len(ids):
        raise ValueError(f"cannot sample {n} from {len(ids)} demos")
    rng = np.random.default_rng(derive_seed(seed, "rs", query_id))
    picked = rng.choice(len(ids), size=n, replace=False)
    return [ids[i] for i in picked]


def _top_n(scored: list[tuple[float, str]], n: int) -> list[str]:
    # descending score, ties by id order
    scored.sort(key=lambda item: (-item[0], item[1]))
    return [demo_id for _, demo_id in scored[:n]]


def retrieve_i2i(query: QuerySample, library: DemoLibrary, n: int) -> list[str]:
    """Top-n by image-image cosine similarity, most similar first."""
    scored = []
    for demo_id in library.ids():
        rec = library[demo_id]
        if rec.img is None:
            raise ValueError(f"demo {demo_id!r} missing img vector")
        scored.append((cosine_sim(rec.img, query.img), demo_id))
    return _top_n(scored, n)


def retrieve_iq2iq(
    query: QuerySample, library: DemoLibrary, n: int, strategy: str = "AMS"
) -> list[str]:
    """Joint image+question similarity: AMS averages the per-modality
    cosines, JES takes the cosine of the concatenated embeddings."""
    if strategy not in ("AMS", "JES"):
        raise ValueError(f"unknown strategy {strategy!r}")
    qcat = np.concatenate([query.img, query.q])
    scored = []
    for demo_id in library.ids():
        rec = library[demo_id]
        if rec.img is None or rec.q is None:
            raise ValueError(f"demo {demo_id!r} missing img or q vector")
        if strategy == "AMS":
            s = 0.5 * (cosine_sim(rec.img, query.img) + cosine_sim(rec.q, query.q))
        else:
            s = cosine_sim(np.concatenate([rec.img, rec.q]), qcat)
        scored.append((s, demo_id))
    return _top_n(scored, n)


def retrieve_iqpr(query: QuerySample, library: DemoLibrary, n: int) -> list[str]:
    """Whole-triplet similarity using the query's supplied pseudo-result."""
    if query.pseudo_r is None:
        raise ValueError(f"query {query.id!r} has no pseudo_r vector")
    if not np.any(query.pseudo_r):
        raise ValueError(f"query {query.id!r} has a zero pseudo_r vector")
    qcat = np.concatenate([query.img, query.q, query.pseudo_r])
    scored = []
    for demo_id in library.ids():
        rec = library[demo_id]
        if rec.img is None or rec.q is None or rec.r is None:
            raise ValueError(f"demo {demo_id!r} missing img/q/r vectors")
        s = cosine_sim(np.concatenate([rec.img, rec.q, rec.r]), qcat)
        scored.append((s, demo_id))
    return _top_n(scored, n)


def vqa_accuracy(answer: str, ground_truths: list[str]) -> float:
    """min(1, 3 * matches / 10) with whitespace/case normalization."""
    if not ground_truths:
        raise ValueError("empty ground-truth list")
    norm = " ".join(answer.lower().split())
    matches = sum(1 for g in ground_truths if " ".join(g.lower().split()) == norm)
    return min(1.0, 3.0 * matches / 10.0)


def gap_metric(
    sequences: dict[str, list[str]],
    scorer: Scorer,
    seed: int = 0,
    trials: int = 4,
    exhaustive: bool = False,
) -> tuple[float, dict[str, float]]:
    """Mean drop in score when one ICD is replaced by another from the same
    sequence (duplicating it). Higher means the ICDs are non-redundant.

    With exhaustive=True every ordered (position, source) replacement pair
    is averaged instead of sampling `trials` of them.
    """
    deltas: dict[str, float] = {}
    for query_id in sorted(sequences):
        seq = sequences[query_id]
        L = len(seq)
        if L < 2:
            raise ValueError(f"sequence for {query_id!r} too short for Gap")
        base = scorer.score(ScoreRequest(query_id, tuple(seq)))
        pairs = [(i, j) for i in range(L) for j in range(L) if i != j]
        if not exhaustive:
            rng = np.random.default_rng(derive_seed(seed, "gap", query_id))
            picked = rng.integers(0, len(pairs), size=trials)
            pairs = [pairs[int(k)] for k in picked]
        total = 0.0
        for i, j in pairs:
            mutated = list(seq)
            mutated[i] = seq[j]
            total += scorer.score(ScoreRequest(query_id, tuple(mutated)))
        deltas[query_id] = base - total / len(pairs)
    gap = float(np.mean(list(deltas.values())))
    return gap, deltas


def variance_metric(scores: list[float]) -> float:
    """Population variance of per-query scores."""
    if not scores:
        raise ValueError("variance of empty input")
    arr = np.asarray(scores, dtype=np.float64)
    return float(np.mean((arr - arr.mean()) ** 2))


Retriever = Callable[[QuerySample], list[str]]


@dataclass
class MethodResult:
    method: str
    sequences: dict[str, list[str]] = field(default_factory=dict)
    scores: dict[str, float] = field(default_factory=dict)
    error: Optional[str] = None

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.scores.values())))


def standard_retrievers(
    library: DemoLibrary, n: int, seed: int
) -> dict[str, Retriever]:
    """The four configuration baselines keyed by report name."""
    methods: dict[str, Retriever] = {
        "rs": lambda q: retrieve_rs(library, n, seed, q.id),
        "i2i": lambda q: retrieve_i2i(q, library, n),
        "iq2iq-ams": lambda q: retrieve_iq2iq(q, library, n, "AMS"),
        "iq2iq-jes": lambda q: retrieve_iq2iq(q, library, n, "JES"),
    }
    return methods


def compare_methods(
    methods: dict[str, Retriever],
    queries: list[QuerySample],
    scorer: Scorer,
    seed: int = 0,
    gap_trials: int = 4,
) -> dict:
    """Run each method on every query, score all sequences with the same
    scorer, and report mean score, Gap, and Variance per method."""
    results: list[MethodResult] = []
    for name in methods:
        res = MethodResult(method=name)
        try:
            for q in sorted(queries, key=lambda s: s.id):
                seq = methods[name](q)
                res.sequences[q.id] = seq
                res.scores[q.id] = scorer.score(ScoreRequest(q.id, tuple(seq)))
        except Exception as e:
            log.exception("method %s failed", name)
            res.error = f"{type(e).__name__}: {e}"
        results.append(res)
    report_methods = []
    for res in results:
        if res.error is not None:
            report_methods.append({"name": res.method, "error": res.error})
            continue
        gap, _ = gap_metric(res.sequences, scorer, seed=seed, trials=gap_trials)
        report_methods.append(
            {
                "name": res.method,
                "mean": res.mean,
                "gap": gap,
                "variance": variance_metric(list(res.scores.values())),
            }
        )
    return {"format": REPORT_FORMAT, "methods": report_methods}


def report_table(report: dict) -> str:
    """Aligned plain-text rendering of a saber-report/v1 mapping."""
    rows = [("method", "mean", "gap", "variance")]
    for m in report["methods"]:
        if "error" in m:
            rows.append((m["name"], "error: " + m["error"], "", ""))
        else:
            rows.append(
                (m["name"], f"{m['mean']:.4f}", f"{m['gap']:.4f}", f"{m['variance']:.4f}")
            )
    widths = [max(len(r[c]) for r in rows) for c in range(4)]
    lines = []
    for i, r in enumerate(rows):
        lines.append("  ".join(cell.ljust(widths[c]) for c, cell in enumerate(r)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def save_report(report: dict, json_path: str, text_path: Optional[str] = None) -> None:
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if text_path:
        with open(text_path, "w", encoding="utf-8") as fh:
            fh.write(report_table(report) + "\n")


def render_report_figures(report: dict, out_prefix: str) -> list[str]:
    """Bar charts of per-method mean score and Gap/Variance, saved as PNGs."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ok = [m for m in report["methods"] if "error" not in m]
    if not ok:
        return []
    names = [m["name"] for m in ok]
    paths = []

    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(names, [m["mean"] for m in ok], color="#4878cf")
    ax.set_ylabel("mean scorer value")
    ax.set_title("Mean sequence score by method")
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    path = out_prefix + "_mean.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    paths.append(path)

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    axes[0].bar(names, [m["gap"] for m in ok], color="#6acc65")
    axes[0].set_title("Gap (higher = less redundant)")
    axes[1].bar(names, [m["variance"] for m in ok], color="#d65f5f")
    axes[1].set_title("Variance (lower = more stable)")
    for ax in axes:
        ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    path = out_prefix + "_quality.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    paths.append(path)
    return paths
