"""Full-model gradient check on a tiny 2-ICD fixture."""

from __future__ import annotations

import torch

from .forge import SequenceExample
from .model import LibraryTensors, ModelConfig, SaberModel
from .store import DemoLibrary, DemoRecord, InstructionRecord, QuerySample
from .training import LossWeights, batch_loss, grad_check
from .synth import make_synthetic_store


def toy_fixture(
    seed: int = 0, d: int = 4, n_demos: int = 6, fusion_mode: str = "binary"
) -> tuple[SaberModel, LibraryTensors, DemoLibrary, list[QuerySample], InstructionRecord]:
    library, inst = make_synthetic_store(demos=n_demos, tasks=2, dim=d, seed=seed)
    ids = library.ids()
    q0 = library[ids[0]]
    queries = [
        QuerySample(id="q0", img=q0.img, q=q0.q, task_tag=q0.task_tag, gt_result="x")
    ]
    cfg = ModelConfig(
        d=d, n_layers=4, n_heads=2, task_layers=(1, 3), max_seq=8,
        fusion_mode=fusion_mode, n_records=n_demos,
    )
    model = SaberModel(cfg)
    model.init_params(seed + 1)
    return model, LibraryTensors.from_library(library), library, queries, inst


def full_model_grad_check(
    seed: int = 0, n_coords: int = 200, eps: float = 1e-5
) -> float:
    """Max relative error of the total training loss gradient on a 2-ICD toy."""
    model, lib, library, queries, inst = toy_fixture(seed)
    ids = library.ids()
    seqs = [SequenceExample("q0", [ids[1], ids[3]], 0.0)]
    qmap = {q.id: q for q in queries}
    inst_emb = torch.tensor(inst.inst_emb, dtype=torch.float64)
    weights = LossWeights()

    def loss_fn() -> torch.Tensor:
        total, _, _ = batch_loss(model, lib, seqs, qmap, inst_emb, weights)
        return total

    params = [p for _, p in sorted(model.named_parameters(), key=lambda kv: kv[0])]
    return grad_check(loss_fn, params, eps=eps, n_coords=n_coords, seed=seed)
