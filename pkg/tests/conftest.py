"""Shared fixtures: small hand-built libraries and query sets."""

from __future__ import annotations

import numpy as np
import pytest

from saber.store import DemoLibrary, DemoRecord, InstructionRecord, QuerySample


def unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def make_demo(
    demo_id: str,
    dim: int = 4,
    task: str = "taskA",
    seed: int = 0,
    **overrides,
) -> DemoRecord:
    rng = np.random.default_rng(seed)
    fields = dict(
        id=demo_id,
        task_tag=task,
        img=unit(rng.standard_normal(dim)),
        q=unit(rng.standard_normal(dim)),
        r=unit(rng.standard_normal(dim)),
        qr=unit(rng.standard_normal(dim)),
        text_q=f"question for {demo_id}",
        text_r=f"answer for {demo_id}",
        image_ref=f"{demo_id}.png",
    )
    fields.update(overrides)
    return DemoRecord(**fields)


@pytest.fixture
def small_library() -> DemoLibrary:
    """Six demos over two tasks with seeded random unit embeddings."""
    lib = DemoLibrary(dim=4)
    for i in range(6):
        lib.add(make_demo(f"d{i}", task=f"task{i % 2}", seed=100 + i))
    return lib


@pytest.fixture
def small_queries(small_library) -> list[QuerySample]:
    rng = np.random.default_rng(7)
    return [
        QuerySample(
            id=f"q{i}",
            img=unit(rng.standard_normal(4)),
            q=unit(rng.standard_normal(4)),
            gt_result=f"truth {i}",
            task_tag=f"task{i % 2}",
            pseudo_r=unit(rng.standard_normal(4)),
        )
        for i in range(3)
    ]


@pytest.fixture
def instruction() -> InstructionRecord:
    return InstructionRecord(
        inst_emb=unit([1.0, 2.0, -1.0, 0.5]),
        text="Answer the question about the image.",
        simplified_text="Answer about the image.",
    )
