"""The sequence model: a small decoder-only transformer whose vocabulary is
the demonstration library, with task-guided attention masks at designated
layers.

Mask policy: the task-aware mask is an additive modulation on top of a
standard causal mask. Causal pairs outside the modulated cases get 0, true
future positions get -inf, and the query row (position 1) may additionally
attend forward to all ICD positions at task-aware layers. A literal
"otherwise -inf" reading would starve the BOS row and the first decode
step, so the additive interpretation is used throughout.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
import torch
from torch import nn

from . import fusion
from .store import DemoLibrary

CKPT_FORMAT = "saber-ckpt/v1"

# Special-token vocabulary offsets past the demonstration ids.
BOS_OFFSET, EOS_OFFSET, TASK_OFFSET = 0, 1, 2
N_SPECIALS = 3


@dataclass
class ModelConfig:
    d: int
    n_layers: int = 4
    n_heads: int = 8
    task_layers: tuple[int, ...] = (1, 3)  # 1-based layer indices
    alpha_init: float = 1.0
    max_seq: int = 16
    t_floor: float = 1e-6
    fusion_mode: str = "binary"
    elementwise_gate: bool = False
    n_records: int = 0  # concat mode residual table size
    ternary_theta: float = 0.9

    def __post_init__(self):
        self.task_layers = tuple(sorted(self.task_layers))
        if any(l < 1 or l > self.n_layers for l in self.task_layers):
            raise ValueError("task_layers must lie in 1..n_layers")
        if self.d % self.n_heads != 0:
            raise ValueError("d must be divisible by n_heads")


class ForwardError(RuntimeError):
    """NaN or structural failure during a forward pass."""


@dataclass
class LibraryTensors:
    """Stacked embedding matrices of a demonstration library."""

    ids: list[str]
    index: dict[str, int]
    img: torch.Tensor
    q: torch.Tensor
    qr: Optional[torch.Tensor]
    r: Optional[torch.Tensor]
    task_tags: list[str] = field(default_factory=list)

    @classmethod
    def from_library(cls, library: DemoLibrary, dtype=torch.float64) -> "LibraryTensors":
        ids = library.ids()
        recs = [library[i] for i in ids]

        def stack(name: str) -> Optional[torch.Tensor]:
            vals = [getattr(r, name) for r in recs]
            if any(v is None for v in vals):
                return None
            return torch.tensor(np.stack(vals), dtype=dtype)

        img = stack("img")
        q = stack("q")
        if img is None or q is None:
            raise ValueError("every demonstration needs img and q vectors")
        return cls(
            ids=ids,
            index={demo_id: i for i, demo_id in enumerate(ids)},
            img=img,
            q=q,
            qr=stack("qr"),
            r=stack("r"),
            task_tags=[r.task_tag for r in recs],
        )

    def __len__(self) -> int:
        return len(self.ids)


def relevance_weight(
    e_tg: torch.Tensor, e: torch.Tensor, mlp: nn.Module, t_floor: float
) -> torch.Tensor:
    """Per-token task relevance t = σ(MLP([e_TG ⊕ e])), clamped away from {0,1}.

    `e` may be [L,d] or [B,L,d]; e_tg broadcasts along the sequence axis.
    """
    tg = e_tg.unsqueeze(-2).expand(*e.shape[:-1], e.shape[-1])
    t = torch.sigmoid(mlp(torch.cat([tg, e], dim=-1))).squeeze(-1)
    return t.clamp(min=t_floor, max=1.0 - 1e-7)


def build_task_mask(
    seq_embs: torch.Tensor,
    i_idx: list[int],
    t: Optional[torch.Tensor],
    alpha: torch.Tensor | float,
    task_layer: bool,
    d_scale: Optional[float] = None,
) -> torch.Tensor:
    """Additive attention mask for one layer.

    seq_embs: [B,L,d] token embeddings (pre-positional); t: [B,L] relevance
    weights, required when task_layer is True. Returns [B,L,L].
    """
    if seq_embs.dim() == 2:
        seq_embs = seq_embs.unsqueeze(0)
        t = t.unsqueeze(0) if t is not None else None
    B, L, d = seq_embs.shape
    if L == 0:
        raise ForwardError("empty sequence")
    device, dtype = seq_embs.device, seq_embs.dtype
    neg_inf = torch.tensor(float("-inf"), dtype=dtype, device=device)
    causal = torch.tril(torch.ones(L, L, dtype=torch.bool, device=device))
    if not task_layer:
        base = torch.where(causal, torch.zeros(L, L, dtype=dtype, device=device), neg_inf)
        return base.expand(B, L, L)

    if t is None:
        raise ForwardError("task layer requires relevance weights")
    scale = d_scale if d_scale is not None else math.sqrt(d)
    normed = seq_embs / seq_embs.norm(dim=-1, keepdim=True).clamp(min=1e-12)
    sims = normed @ normed.transpose(-1, -2)  # [B,L,L]
    log_t = torch.log(t)  # [B,L], <= 0 by clamping

    icd = torch.zeros(L, dtype=torch.bool, device=device)
    for i in i_idx:
        icd[i] = True
    pair = icd.unsqueeze(1) & icd.unsqueeze(0) & causal  # intra-ICD, j <= i
    vals = torch.zeros(B, L, L, dtype=dtype, device=device)
    vals = torch.where(pair, sims / scale * log_t.unsqueeze(-1), vals)

    allowed = causal.clone()
    if L > 1:
        qrow = torch.zeros(L, L, dtype=torch.bool, device=device)
        qrow[1, :] = icd
        allowed = allowed | qrow
        qvals = alpha * sims[:, 1, :] / scale * log_t[:, 1].unsqueeze(-1)  # [B,L]
        vals[:, 1, :] = torch.where(icd, qvals, vals[:, 1, :])
    return torch.where(allowed, vals, neg_inf)


def attend(
    h: torch.Tensor,
    mask: torch.Tensor,
    w_q: nn.Linear,
    w_k: nn.Linear,
    w_v: nn.Linear,
    w_o: nn.Linear,
    n_heads: int,
    layer: int = -1,
) -> torch.Tensor:
    """Multi-head attention with the additive mask applied to every head."""
    B, L, d = h.shape
    dh = d // n_heads

    def split(x: torch.Tensor) -> torch.Tensor:
        return x.view(B, L, n_heads, dh).transpose(1, 2)  # [B,H,L,dh]

    q, k, v = split(w_q(h)), split(w_k(h)), split(w_v(h))
    logits = q @ k.transpose(-1, -2) / math.sqrt(dh) + mask.unsqueeze(1)
    if torch.isinf(logits).all(dim=-1).any():
        raise ForwardError(f"layer {layer}: attention row with empty support")
    probs = torch.softmax(logits, dim=-1)
    if torch.isnan(probs).any():
        bad = torch.isnan(probs).any(dim=-1).nonzero()[0].tolist()
        raise ForwardError(f"layer {layer}: NaN attention row at {bad}")
    out = (probs @ v).transpose(1, 2).reshape(B, L, d)
    return w_o(out)


class DecoderBlock(nn.Module):
    """Pre-norm residual block: attention then 4d GELU feed-forward."""

    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(d)
        self.ln2 = nn.LayerNorm(d)
        self.w_q = nn.Linear(d, d)
        self.w_k = nn.Linear(d, d)
        self.w_v = nn.Linear(d, d)
        self.w_o = nn.Linear(d, d)
        self.ff = nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(), nn.Linear(4 * d, d))

    def forward(self, h: torch.Tensor, mask: torch.Tensor, layer: int) -> torch.Tensor:
        h = h + attend(self.ln1(h), mask, self.w_q, self.w_k, self.w_v, self.w_o, self.n_heads, layer)
        return h + self.ff(self.ln2(h))


class TaskLayerExtras(nn.Module):
    """Per task-aware layer: relevance MLP and the guider-update attention."""

    def __init__(self, d: int):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(2 * d, d), nn.GELU(), nn.Linear(d, 1))
        self.tg_q = nn.Linear(d, d)
        self.tg_k = nn.Linear(d, d)
        self.tg_v = nn.Linear(d, d)
        self.tg_o = nn.Linear(d, d)
        self.tg_ln = nn.LayerNorm(d)


def update_task_guider(
    e_tg: torch.Tensor, hidden: torch.Tensor, extras: TaskLayerExtras
) -> torch.Tensor:
    """Single-query cross-attention of the guider over the layer's hidden
    states, with residual add and layer norm."""
    single = e_tg.dim() == 1
    if single:
        e_tg, hidden = e_tg.unsqueeze(0), hidden.unsqueeze(0)
    d = e_tg.shape[-1]
    q = extras.tg_q(e_tg).unsqueeze(1)  # [B,1,d]
    k, v = extras.tg_k(hidden), extras.tg_v(hidden)
    probs = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)
    out = extras.tg_o((probs @ v).squeeze(1))
    new = extras.tg_ln(e_tg + out)
    return new.squeeze(0) if single else new


def output_distribution(
    logits: torch.Tensor, forbidden: list[int] | set[int]
) -> torch.Tensor:
    """Softmax over the vocabulary with forbidden entries masked out."""
    masked = logits.clone()
    for idx in forbidden:
        masked[..., idx] = float("-inf")
    if torch.isinf(masked).all(dim=-1).any():
        raise ValueError("all vocabulary entries forbidden")
    return torch.softmax(masked, dim=-1)


class SaberModel(nn.Module):
    """Decoder-only transformer over a demonstration-indexed vocabulary."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d
        self.gate = fusion.GateParams(
            d, cfg.fusion_mode, cfg.elementwise_gate, cfg.n_records, cfg.ternary_theta
        )
        self.specials = fusion.SpecialEmbeddings(d)
        self.tg_init = fusion.TaskGuiderInit(d)
        self.pos = nn.Parameter(torch.zeros(cfg.max_seq, d))
        self.blocks = nn.ModuleList(
            DecoderBlock(d, cfg.n_heads) for _ in range(cfg.n_layers)
        )
        self.task_extras = nn.ModuleDict(
            {str(l): TaskLayerExtras(d) for l in cfg.task_layers}
        )
        self.alpha = nn.Parameter(torch.tensor(float(cfg.alpha_init)))
        self.special_logits = nn.Parameter(torch.zeros(N_SPECIALS))
        self.double()

    def init_params(self, seed: int) -> None:
        """Seeded initialization of every learnable tensor."""
        gen = torch.Generator().manual_seed(seed)
        d = self.cfg.d
        for name, p in sorted(self.named_parameters(), key=lambda kv: kv[0]):
            if name == "alpha":
                p.data.fill_(self.cfg.alpha_init)
            elif "ln" in name or "LayerNorm" in name.lower():
                # keep torch's LayerNorm defaults (weight 1, bias 0)
                continue
            elif p.dim() >= 2:
                std = 1.0 / math.sqrt(p.shape[-1])
                p.data = torch.empty_like(p).normal_(0.0, std, generator=gen)
            elif name.endswith(("e_bos", "e_eos", "e_task")) or name == "pos":
                p.data = torch.empty_like(p).normal_(0.0, 1.0 / math.sqrt(d), generator=gen)
            else:
                p.data.zero_()

    # ---- embedding helpers ----

    def demo_token_embeddings(self, lib: LibraryTensors) -> torch.Tensor:
        """Fused token embedding for every library record, [V,d]."""
        mode = self.cfg.fusion_mode
        if mode == "binary":
            if lib.qr is None:
                raise ValueError("binary fusion requires qr vectors on all demos")
            return fusion.binary_gate(lib.img, lib.qr, self.gate)
        if lib.r is None:
            raise ValueError(f"{mode} fusion requires r vectors on all demos")
        if mode == "ternary":
            emb, _ = fusion.ternary_gate(lib.img, lib.q, lib.r, self.gate)
            return emb
        return fusion.concat_embed(lib.img, lib.q, lib.r, self.gate.r_learn[: len(lib)])

    def encode_sequences(
        self,
        lib: LibraryTensors,
        query_img: torch.Tensor,  # [B,d]
        query_q: torch.Tensor,  # [B,d]
        icd_indices: torch.Tensor,  # [B,N] long
        include_eos: bool,
    ) -> tuple[torch.Tensor, list[int]]:
        """Batched [BOS, ê, e_1..e_N (, EOS)] token embeddings, [B,L,d]."""
        B, N = icd_indices.shape
        demo_embs = self.demo_token_embeddings(lib)
        gated = fusion.binary_gate(query_img, query_q, self.gate)
        e_hat = torch.cat([self.specials.e_task.expand(B, -1), gated], dim=-1) @ self.specials.w_join.T
        rows = [self.specials.e_bos.expand(B, 1, -1), e_hat.unsqueeze(1)]
        if N > 0:
            rows.append(demo_embs[icd_indices])
        if include_eos:
            rows.append(self.specials.e_eos.expand(B, 1, -1))
        seq = torch.cat(rows, dim=1)
        return seq, list(range(2, 2 + N))

    def initial_guider(
        self, query_img: torch.Tensor, query_q: torch.Tensor, inst_emb: torch.Tensor
    ) -> torch.Tensor:
        if query_img.dim() == 1:
            return fusion.init_task_guider(query_img, query_q, inst_emb, self.tg_init)
        B = query_img.shape[0]
        cat = torch.cat([query_img, query_q, inst_emb.expand(B, -1)], dim=-1)
        return cat @ self.tg_init.w_tg.T

    # ---- forward ----

    def forward_embeddings(
        self,
        seq_embs: torch.Tensor,  # [B,L,d] or [L,d]
        i_idx: list[int],
        e_tg0: torch.Tensor,
        demo_embs: torch.Tensor,  # [V,d]
        t_override: Optional[float] = None,
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Run the decoder stack; returns (logits [B,L,V+3], task-layer masks).

        `t_override` forces every relevance weight to a constant; used by
        the differential tests against the unmodulated reference.
        """
        single = seq_embs.dim() == 2
        if single:
            seq_embs = seq_embs.unsqueeze(0)
            e_tg0 = e_tg0.unsqueeze(0)
        B, L, d = seq_embs.shape
        if L > self.cfg.max_seq:
            raise ForwardError(f"sequence length {L} exceeds max_seq {self.cfg.max_seq}")
        h = seq_embs + self.pos[:L]
        e_tg = e_tg0
        masks: list[torch.Tensor] = []
        for layer_idx, block in enumerate(self.blocks, start=1):
            task_layer = layer_idx in self.cfg.task_layers
            if task_layer:
                extras = self.task_extras[str(layer_idx)]
                if t_override is not None:
                    t = torch.full((B, L), t_override, dtype=seq_embs.dtype)
                else:
                    t = relevance_weight(e_tg, seq_embs, extras.mlp, self.cfg.t_floor)
                mask = build_task_mask(seq_embs, i_idx, t, self.alpha, True)
                masks.append(mask)
            else:
                mask = build_task_mask(seq_embs, i_idx, None, self.alpha, False)
            h = block(h, mask, layer_idx)
            if torch.isnan(h).any():
                raise ForwardError(f"layer {layer_idx}: NaN hidden state")
            if task_layer:
                e_tg = update_task_guider(e_tg, h, self.task_extras[str(layer_idx)])
        logits_demo = h @ demo_embs.T / math.sqrt(d)
        logits_special = self.special_logits.expand(B, L, N_SPECIALS)
        logits = torch.cat([logits_demo, logits_special], dim=-1)
        if single:
            return logits.squeeze(0), [m.squeeze(0) for m in masks]
        return logits, masks

    def forward(
        self,
        lib: LibraryTensors,
        query_img: torch.Tensor,
        query_q: torch.Tensor,
        inst_emb: torch.Tensor,
        icd_indices: torch.Tensor,
        include_eos: bool = True,
        t_override: Optional[float] = None,
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        seq, i_idx = self.encode_sequences(lib, query_img, query_q, icd_indices, include_eos)
        e_tg0 = self.initial_guider(query_img, query_q, inst_emb)
        demo_embs = self.demo_token_embeddings(lib)
        return self.forward_embeddings(seq, i_idx, e_tg0, demo_embs, t_override)

    def vocab_size(self, lib: LibraryTensors) -> int:
        return len(lib) + N_SPECIALS

    @staticmethod
    def special_ids(vocab_demos: int) -> tuple[int, int, int]:
        """(BOS, EOS, TASK) vocabulary indices for a library of given size."""
        return (
            vocab_demos + BOS_OFFSET,
            vocab_demos + EOS_OFFSET,
            vocab_demos + TASK_OFFSET,
        )


# ---- checkpoint io ----


def save_checkpoint(model: SaberModel, path: str) -> None:
    """Write saber-ckpt/v1: one JSON header line, then f32 tensor data in
    manifest order (row-major, little-endian)."""
    names = sorted(name for name, _ in model.named_parameters())
    params = dict(model.named_parameters())
    manifest = [{"name": n, "shape": list(params[n].shape)} for n in names]
    cfg = asdict(model.cfg)
    cfg["task_layers"] = list(model.cfg.task_layers)
    header = json.dumps({"format": CKPT_FORMAT, "config": cfg, "tensors": manifest})
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8") + b"\n")
        for n in names:
            fh.write(
                params[n].detach().to(torch.float32).numpy().astype("<f4").tobytes()
            )


def load_checkpoint(path: str) -> SaberModel:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    header = json.loads(header_line.decode("utf-8"))
    if header.get("format") != CKPT_FORMAT:
        raise ValueError(f"expected checkpoint format {CKPT_FORMAT!r}")
    cfg_d = dict(header["config"])
    cfg_d["task_layers"] = tuple(cfg_d["task_layers"])
    model = SaberModel(ModelConfig(**cfg_d))
    params = dict(model.named_parameters())
    offset = 0
    with torch.no_grad():
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
            offset += count * 4
            params[entry["name"]].copy_(
                torch.tensor(arr.reshape(shape), dtype=torch.float64)
            )
    if offset != len(blob):
        raise ValueError("checkpoint has trailing bytes")
    return model
