"""Token embedding construction.

Demonstration tokens are fused from their image and text embeddings by a
gating module (binary by default; ternary and learnable-residual
concatenation are ablation modes). The query token is the [TASK]
embedding joined with the gated query embedding through a learned
projection, and the task guider starts from a learned projection of the
concatenated query-image, query-text, and instruction embeddings.
"""

from __future__ import annotations

import torch
from torch import nn

GATE_MODES = ("binary", "ternary", "concat")


class GateParams(nn.Module):
    """Learnable gating weights for all three fusion modes.

    The binary gate is a scalar sigmoid gate over [img ⊕ txt] (a
    per-dimension variant is available behind `elementwise`). The ternary
    gate softmaxes three logits over [img ⊕ q ⊕ r]. Concat mode adds a
    per-record learnable residual, held in an embedding table sized to
    the library.
    """

    def __init__(
        self,
        d: int,
        mode: str = "binary",
        elementwise: bool = False,
        n_records: int = 0,
        theta: float = 0.9,
    ):
        super().__init__()
        if mode not in GATE_MODES:
            raise ValueError(f"unknown gate mode {mode!r}")
        self.d = d
        self.mode = mode
        self.elementwise = elementwise
        self.theta = theta
        out = d if elementwise else 1
        self.w_g = nn.Parameter(torch.zeros(out, 2 * d))
        self.b_g = nn.Parameter(torch.zeros(out))
        if mode == "ternary":
            self.w_tern = nn.Parameter(torch.zeros(3, 3 * d))
            self.b_tern = nn.Parameter(torch.zeros(3))
        if mode == "concat":
            self.r_learn = nn.Parameter(torch.zeros(n_records, d))


def binary_gate(img: torch.Tensor, txt: torch.Tensor, p: GateParams) -> torch.Tensor:
    """g·img + (1−g)·txt with g = σ(W_g·[img⊕txt] + b_g).

    Accepts a single vector or a batch of rows.
    """
    x = torch.cat([img, txt], dim=-1)
    g = torch.sigmoid(x @ p.w_g.T + p.b_g)
    return g * img + (1.0 - g) * txt


def ternary_gate(
    img: torch.Tensor, q: torch.Tensor, r: torch.Tensor, p: GateParams
) -> tuple[torch.Tensor, torch.Tensor]:
    """Softmax-weighted combination of the three component embeddings.

    Returns (embedding, squared-weight regularizer value); the latter is
    penalized when it exceeds the configured theta.
    """
    x = torch.cat([img, q, r], dim=-1)
    gates = torch.softmax(x @ p.w_tern.T + p.b_tern, dim=-1)
    g_i, g_q, g_r = gates[..., 0:1], gates[..., 1:2], gates[..., 2:3]
    emb = g_i * img + g_q * q + g_r * r
    reg = (gates**2).sum(dim=-1)
    return emb, reg


def concat_embed(
    img: torch.Tensor, q: torch.Tensor, r: torch.Tensor, r_learn: torch.Tensor
) -> torch.Tensor:
    """Elementwise sum of all three embeddings plus the learnable residual."""
    return img + q + r + r_learn


class SpecialEmbeddings(nn.Module):
    """[BOS]/[EOS]/[TASK] embeddings and the query join projection.

    The query token must be width d but carries both the [TASK] embedding
    and the gated query embedding, so W_join projects their 2d
    concatenation back down.
    """

    def __init__(self, d: int):
        super().__init__()
        self.e_bos = nn.Parameter(torch.zeros(d))
        self.e_eos = nn.Parameter(torch.zeros(d))
        self.e_task = nn.Parameter(torch.zeros(d))
        self.w_join = nn.Parameter(torch.zeros(d, 2 * d))


def embed_query(
    img: torch.Tensor,
    q: torch.Tensor,
    s: SpecialEmbeddings,
    p: GateParams,
) -> torch.Tensor:
    """ê = W_join·[e_task ⊕ gate(img, q)].

    The text side is the question embedding alone: a query sample has no
    result. All gate modes use the binary gate here.
    """
    gated = binary_gate(img, q, p)
    return s.w_join @ torch.cat([s.e_task, gated], dim=-1)


class TaskGuiderInit(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.w_tg = nn.Parameter(torch.zeros(d, 3 * d))


def init_task_guider(
    img: torch.Tensor,
    q: torch.Tensor,
    inst_emb: torch.Tensor,
    tg: TaskGuiderInit,
) -> torch.Tensor:
    """Initial task guider from the 3d concatenation of query and instruction."""
    return tg.w_tg @ torch.cat([img, q, inst_emb], dim=-1)


def embed_icd(
    img: torch.Tensor,
    q: torch.Tensor,
    r: torch.Tensor | None,
    qr: torch.Tensor,
    p: GateParams,
    record_index: int | None = None,
) -> torch.Tensor:
    """Fuse one demonstration into its token embedding per the gate mode."""
    if p.mode == "binary":
        return binary_gate(img, qr, p)
    if r is None:
        raise ValueError(f"{p.mode} fusion requires the r vector")
    if p.mode == "ternary":
        emb, _ = ternary_gate(img, q, r, p)
        return emb
    if record_index is None:
        raise ValueError("concat fusion requires the record index")
    return concat_embed(img, q, r, p.r_learn[record_index])


def build_input_sequence(
    query_img: torch.Tensor,
    query_q: torch.Tensor,
    icd_embs: list[torch.Tensor],
    s: SpecialEmbeddings,
    p: GateParams,
    include_eos: bool,
) -> tuple[torch.Tensor, list[int]]:
    """Assemble [e_BOS, ê, e_1..e_N (, e_EOS)] and the ICD index set.

    Position 0 is always BOS and position 1 the query token; EOS is
    appended only for training sequences.
    """
    e_hat = embed_query(query_img, query_q, s, p)
    rows = [s.e_bos, e_hat, *icd_embs]
    if include_eos:
        rows.append(s.e_eos)
    i_idx = list(range(2, 2 + len(icd_embs)))
    return torch.stack(rows), i_idx
