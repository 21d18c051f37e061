"""Seeded synthetic stores with planted task clusters.

Each task gets random unit centers in image and question space.
Demonstrations scatter around their task's centers; the combined-text
vector qr mixes the task's question center with a per-record style
direction, so demonstrations within one task vary in how redundant they
are with each other. That structure makes both task identity and
within-sequence diversity matter to the oracle scorer.
"""

from __future__ import annotations

import numpy as np

from .store import DemoLibrary, DemoRecord, InstructionRecord


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def make_synthetic_store(
    demos: int = 256,
    tasks: int = 4,
    dim: int = 16,
    seed: int = 0,
    img_noise: float = 0.35,
    q_noise: float = 0.35,
    qr_style: float = 0.9,
) -> tuple[DemoLibrary, InstructionRecord]:
    """Generate `demos` demonstration records across `tasks` planted tasks."""
    if demos < tasks:
        raise ValueError("need at least one demo per task")
    rng = np.random.default_rng(seed)
    img_centers = [_unit(rng.standard_normal(dim)) for _ in range(tasks)]
    q_centers = [_unit(rng.standard_normal(dim)) for _ in range(tasks)]
    library = DemoLibrary(dim=dim)
    width = len(str(demos - 1))
    for i in range(demos):
        t = i % tasks
        img = _unit(img_centers[t] + img_noise * rng.standard_normal(dim))
        q = _unit(q_centers[t] + q_noise * rng.standard_normal(dim))
        style = _unit(rng.standard_normal(dim))
        qr = _unit(q_centers[t] + qr_style * style)
        r = _unit(0.5 * q_centers[t] + rng.standard_normal(dim))
        rec = DemoRecord(
            id=f"d{i:0{width}d}",
            task_tag=f"task{t}",
            img=img,
            q=q,
            r=r,
            qr=qr,
            text_q=f"question {i} of task{t}",
            text_r=f"answer {i} of task{t}",
            image_ref=f"img_{i:0{width}d}.png",
        )
        library.add(rec)
    inst = InstructionRecord(
        inst_emb=_unit(rng.standard_normal(dim)),
        text=(
            "You will be given example image-text pairs followed by a question; "
            "work out the task from the examples, then answer for the new image."
        ),
        simplified_text=(
            "Analyze the example image-text pairs, infer the task, and answer "
            "the question for the new image."
        ),
    )
    return library, inst
