"""Losses, the optimization loop, and the gradient-checking harness."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .forge import SequenceExample
from .model import LibraryTensors, SaberModel
from .seeding import derive_seed
from .store import DemoLibrary, InstructionRecord, QuerySample

log = logging.getLogger(__name__)

IGNORE = -1  # target value for positions without a loss


@dataclass
class LossWeights:
    lambda1: float = 0.1  # sparsity
    lambda2: float = 1e-4  # W_TG L2

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch: int = 128
    epochs: int = 20
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    restart_period: int = 5  # T_0, in epochs
    restart_mult: int = 2  # T_mult

    def __post_init__(self):
        if self.lr < 0 or self.epochs < 1:
            raise ValueError("lr must be >= 0 and epochs >= 1")


def ce_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean negative log-probability of targets over positions != IGNORE.

    logits: [.., L, V]; targets: [.., L] of vocabulary ids.
    """
    V = logits.shape[-1]
    flat_t = targets.reshape(-1)
    if int(flat_t.max()) >= V:
        raise ValueError(f"target id {int(flat_t.max())} out of vocabulary {V}")
    return F.cross_entropy(logits.reshape(-1, V), flat_t, ignore_index=IGNORE)


def sparsity_loss(
    masks: list[torch.Tensor], i_idx: list[int], N: int
) -> torch.Tensor:
    """Sum over task layers of the mean KL(softmax(row) || uniform) over ICD
    rows, each row restricted to its finite support."""
    if N == 0 or not masks:
        return torch.tensor(0.0, dtype=torch.float64)
    total = torch.tensor(0.0, dtype=masks[0].dtype)
    for mask in masks:
        m = mask if mask.dim() == 3 else mask.unsqueeze(0)
        layer_sum = torch.tensor(0.0, dtype=m.dtype)
        for i in i_idx:
            rows = m[:, i, :]  # [B,L]
            finite = torch.isfinite(rows[0])
            support = int(finite.sum())
            if support == 0:
                raise ValueError(f"mask row {i} has empty support")
            p = torch.softmax(rows[:, finite], dim=-1)
            kl = (p * torch.log(p.clamp(min=1e-300))).sum(dim=-1) + math.log(support)
            layer_sum = layer_sum + kl.mean()
        total = total + layer_sum / N
    return total


def total_loss(
    ce: torch.Tensor,
    sparse: torch.Tensor,
    w_tg: torch.Tensor,
    w: LossWeights,
) -> torch.Tensor:
    return ce + w.lambda1 * sparse + w.lambda2 * (w_tg**2).sum()


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Cosine annealing with warm restarts, at epoch granularity."""
    t_i = cfg.restart_period
    t_cur = epoch
    while t_cur >= t_i:
        t_cur -= t_i
        t_i *= cfg.restart_mult
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * t_cur / t_i))


def _sequence_batch(
    seqs: list[SequenceExample],
    lib: LibraryTensors,
    queries: dict[str, QuerySample],
    eos_id: int,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Stack sequences into (query_img, query_q, icd_indices, targets)."""
    B = len(seqs)
    N = len(seqs[0].icd_ids)
    L = N + 3
    imgs = torch.empty(B, lib.img.shape[1], dtype=torch.float64)
    qs = torch.empty_like(imgs)
    icds = torch.empty(B, N, dtype=torch.long)
    targets = torch.full((B, L), IGNORE, dtype=torch.long)
    for b, ex in enumerate(seqs):
        qsamp = queries[ex.query_id]
        imgs[b] = torch.tensor(qsamp.img, dtype=torch.float64)
        qs[b] = torch.tensor(qsamp.q, dtype=torch.float64)
        for j, demo_id in enumerate(ex.icd_ids):
            icds[b, j] = lib.index[demo_id]
            # position j+1 (ê at j=0) predicts ICD j
            targets[b, j + 1] = lib.index[demo_id]
        targets[b, N + 1] = eos_id
    return imgs, qs, icds, targets


def batch_loss(
    model: SaberModel,
    lib: LibraryTensors,
    seqs: list[SequenceExample],
    queries: dict[str, QuerySample],
    inst_emb: torch.Tensor,
    w: LossWeights,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(total, ce, sparse) for one mini-batch of same-shot sequences.

    The query row attends forward over ICD positions, so a single
    teacher-forced pass would let each position see its own label through
    the query token. Sequence likelihood is therefore factorized the same
    way generation runs: one forward per prefix length, reading only the
    last position's next-token distribution. The sparsity penalty uses the
    masks of the full-prefix pass, whose ICD-row supports are unaffected
    by the trailing EOS position.
    """
    N = len(seqs[0].icd_ids)
    eos_id = len(lib) + 1
    imgs, qs, icds, targets = _sequence_batch(seqs, lib, queries, eos_id)
    step_logits = []
    masks = None
    for j in range(N + 1):
        logits, layer_masks = model(
            lib, imgs, qs, inst_emb, icds[:, :j], include_eos=False
        )
        step_logits.append(logits[:, -1, :])
        if j == N:
            masks = layer_masks
    ce = ce_loss(torch.stack(step_logits, dim=1), targets[:, 1 : N + 2])
    sparse = sparsity_loss(masks, list(range(2, 2 + N)), N)
    return total_loss(ce, sparse, model.tg_init.w_tg, w), ce, sparse


def fit(
    model: SaberModel,
    seqs: list[SequenceExample],
    library: DemoLibrary,
    queries: list[QuerySample],
    inst: InstructionRecord,
    cfg: TrainConfig,
    w: Optional[LossWeights] = None,
    log_path: Optional[str] = None,
) -> list[dict]:
    """Train with AdamW + warm-restart cosine schedule; returns per-epoch log.

    Deterministic for a fixed seed with single-threaded execution: the
    shuffle order is seeded and batches are processed in order.
    """
    w = w or LossWeights()
    shots = {len(ex.icd_ids) for ex in seqs}
    if len(shots) != 1:
        raise ValueError(f"mixed shot counts in training set: {sorted(shots)}")
    lib = LibraryTensors.from_library(library)
    for ex in seqs:
        ex.validate(library, len(ex.icd_ids))
    qmap = {q.id: q for q in queries}
    inst_emb = torch.tensor(inst.inst_emb, dtype=torch.float64)
    opt = torch.optim.AdamW(
        model.parameters(),
        lr=cfg.lr,
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.eps,
        weight_decay=cfg.weight_decay,
    )
    rng = np.random.default_rng(derive_seed(cfg.seed, "train-shuffle"))
    history: list[dict] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg)
            for group in opt.param_groups:
                group["lr"] = lr
            order = rng.permutation(len(seqs))
            ce_sum = sparse_sum = loss_sum = 0.0
            n_batches = 0
            for start in range(0, len(seqs), cfg.batch):
                batch = [seqs[i] for i in order[start : start + cfg.batch]]
                opt.zero_grad()
                loss, ce, sparse = batch_loss(model, lib, batch, qmap, inst_emb, w)
                if not torch.isfinite(loss):
                    raise RuntimeError(
                        f"training diverged at epoch {epoch}: loss={float(loss)}, "
                        f"ce={float(ce)}, sparse={float(sparse)}"
                    )
                loss.backward()
                opt.step()
                ce_sum += float(ce.detach())
                sparse_sum += float(sparse.detach())
                loss_sum += float(loss.detach())
                n_batches += 1
            entry = {
                "epoch": epoch,
                "ce": ce_sum / n_batches,
                "sparse": sparse_sum / n_batches,
                "l2": float((model.tg_init.w_tg.detach() ** 2).sum()),
                "lr": lr,
            }
            history.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
            log.info(
                "epoch %d: loss %.4f ce %.4f sparse %.4f lr %.2e",
                epoch, loss_sum / n_batches, entry["ce"], entry["sparse"], lr,
            )
    finally:
        if log_fh:
            log_fh.close()
    return history


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: list[torch.Tensor],
    eps: float = 1e-5,
    n_coords: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error of analytic gradients vs central differences.

    Samples at least n_coords coordinates across the parameter list
    (all coordinates if fewer exist). Relative error uses the
    denominator max(|analytic|, |numeric|, 1) so near-zero gradients are
    compared absolutely.
    """
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    coords = []
    for pi, p in enumerate(params):
        for ci in range(p.numel()):
            coords.append((pi, ci))
    rng = np.random.default_rng(seed)
    if len(coords) > n_coords:
        picked = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[i] for i in picked]
    worst = 0.0
    with torch.no_grad():
        for pi, ci in coords:
            p = params[pi]
            flat = p.view(-1)
            orig = float(flat[ci])
            flat[ci] = orig + eps
            f_plus = float(loss_fn())
            flat[ci] = orig - eps
            f_minus = float(loss_fn())
            flat[ci] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            analytic = 0.0 if grads[pi] is None else float(grads[pi].view(-1)[ci])
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1.0)
            worst = max(worst, err)
    return worst
