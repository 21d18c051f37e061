"""Autoregressive ICD-sequence generation, prompt assembly, and the
demonstration perturbation settings used for probing prompt robustness."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .forge import SequenceExample
from .model import LibraryTensors, SaberModel, output_distribution
from .seeding import derive_seed
from .store import DemoLibrary, InstructionRecord, QuerySample

PERTURB_MODES = ("standard", "random-q", "random-r", "dislocation-q", "dislocation-r")
DEFAULT_CAPTION_TEXT = "describe the whole image"


@dataclass
class GenConfig:
    n: int = 4
    decode: str = "greedy"  # or "topk"
    top_k: int = 5
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.decode not in ("greedy", "topk"):
            raise ValueError(f"unknown decode rule {self.decode!r}")


def generate_sequence(
    model: SaberModel,
    library: DemoLibrary,
    query: QuerySample,
    inst: InstructionRecord,
    cfg: GenConfig,
    lib_tensors: LibraryTensors | None = None,
) -> SequenceExample:
    """Generate n distinct ICD ids starting from [BOS, query token].

    Each step reruns full attention over the prefix (the query row may
    attend forward, so no KV cache). Already chosen ids, premature EOS,
    and the non-generable specials are masked out; greedy decoding breaks
    exact ties by id order.
    """
    lib = lib_tensors or LibraryTensors.from_library(library)
    if cfg.n > len(lib):
        raise ValueError(f"cannot generate {cfg.n} shots from {len(lib)} demos")
    V = len(lib)
    bos_id, eos_id, task_id = SaberModel.special_ids(V)
    img = torch.tensor(query.img, dtype=torch.float64)
    q = torch.tensor(query.q, dtype=torch.float64)
    inst_emb = torch.tensor(inst.inst_emb, dtype=torch.float64)
    rng = np.random.default_rng(derive_seed(cfg.seed, "gen", query.id))
    chosen: list[int] = []
    with torch.no_grad():
        for _ in range(cfg.n):
            icds = torch.tensor([chosen], dtype=torch.long)
            logits, _ = model(
                lib, img.unsqueeze(0), q.unsqueeze(0), inst_emb, icds, include_eos=False
            )
            last = logits[0, -1]
            forbidden = set(chosen) | {bos_id, eos_id, task_id}
            probs = output_distribution(last, forbidden)
            if cfg.decode == "greedy":
                best = float(probs.max())
                tied = [i for i in range(V) if float(probs[i]) == best]
                nxt = min(tied, key=lambda i: lib.ids[i])
            else:
                p = probs[:V].numpy().copy()
                if cfg.top_k < V:
                    cutoff = np.sort(p)[-cfg.top_k]
                    p[p < cutoff] = 0.0
                if cfg.temperature != 1.0:
                    p = np.power(p, 1.0 / cfg.temperature)
                p /= p.sum()
                nxt = int(rng.choice(V, p=p))
            chosen.append(nxt)
    return SequenceExample(query.id, [lib.ids[i] for i in chosen], 0.0)


# ---- prompt assembly ----


@dataclass
class PromptTemplate:
    """Per-ICD and query render patterns with {image}/{question}/{answer} slots."""

    name: str
    icd_pattern: str
    query_pattern: str
    header: str = ""  # wrapper before the instruction
    footer: str = ""  # wrapper after the query block
    inst_prefix: str = ""
    inst_suffix: str = "\n"

    def __post_init__(self):
        for slot in ("{image}", "{question}", "{answer}"):
            if self.icd_pattern.count(slot) != 1:
                raise ValueError(
                    f"template {self.name!r}: ICD pattern needs exactly one {slot}"
                )
        for slot in ("{image}", "{question}"):
            if self.query_pattern.count(slot) != 1:
                raise ValueError(
                    f"template {self.name!r}: query pattern needs exactly one {slot}"
                )
        if "{answer}" in self.query_pattern:
            raise ValueError(
                f"template {self.name!r}: query pattern must not carry an answer slot"
            )


BUILTIN_TEMPLATES: dict[str, PromptTemplate] = {
    "generic": PromptTemplate(
        name="generic",
        icd_pattern="{image}\nQuestion: {question}\nAnswer: {answer}\n\n",
        query_pattern="{image}\nQuestion: {question}\nAnswer:",
    ),
    "openflamingo": PromptTemplate(
        name="openflamingo",
        icd_pattern="<img>{image}<|endofchunk|>\nQuestion: {question}\nAnswer: {answer}\n\n",
        query_pattern="<img>{image}<|endofchunk|>\nQuestion: {question}\nAnswer:",
    ),
    "idefics": PromptTemplate(
        name="idefics",
        icd_pattern=(
            "\nUser:{image} Question: {question} <end_of_utterance>"
            "\nAssistant: Answer: {answer}. <end_of_utterance>"
        ),
        query_pattern="\nUser:{image} Question: {question} <end_of_utterance>\nAssistant: Answer:",
        inst_prefix="User: ",
    ),
    "internvl": PromptTemplate(
        name="internvl",
        icd_pattern="<img>{image}</img>\nQuestion: {question}\nAnswer: {answer}\n\n",
        query_pattern="<img>{image}</img>\nQuestion: {question}\nAnswer:",
    ),
    "qwenvl": PromptTemplate(
        name="qwenvl",
        icd_pattern="<|vision_start|>{image}<|vision_end|>Question: {question} Answer: {answer}\n\n",
        query_pattern="<|vision_start|>{image}<|vision_end|>Question: {question} Answer: ",
        header="<|im_start|>system\nYou are a helpful assistant.<|im_end|>\n<|im_start|>user\n",
        footer="<|im_end|>\n<|im_start|>assistant",
    ),
}


def _image_slot(image_ref: str) -> str:
    # downstream callers substitute actual image payloads for these slots
    return "{image:" + image_ref + "}"


def assemble_prompt(
    inst: str,
    seq: list[str],
    query: QuerySample,
    library: DemoLibrary,
    tpl: PromptTemplate,
    query_text: str | None = None,
    query_image_ref: str | None = None,
) -> str:
    """Instruction, then each ICD in order, then the query with a trailing
    answer cue and no answer text."""
    parts = [tpl.header]
    if inst:
        parts.append(tpl.inst_prefix + inst + tpl.inst_suffix)
    for demo_id in seq:
        rec = library[demo_id]
        if rec.text_q is None or rec.text_r is None or rec.image_ref is None:
            raise ValueError(f"demo {demo_id!r} missing text_q/text_r/image_ref")
        parts.append(
            tpl.icd_pattern.replace("{image}", _image_slot(rec.image_ref))
            .replace("{question}", rec.text_q)
            .replace("{answer}", rec.text_r)
        )
    parts.append(
        tpl.query_pattern.replace("{image}", _image_slot(query_image_ref or query.id))
        .replace("{question}", query_text if query_text is not None else query.id)
    )
    parts.append(tpl.footer)
    return "".join(parts)


def load_template(spec: dict) -> PromptTemplate:
    """Build a template from a config mapping; `name` may select a builtin."""
    if set(spec.keys()) == {"name"}:
        name = spec["name"]
        if name not in BUILTIN_TEMPLATES:
            raise ValueError(f"unknown builtin template {name!r}")
        return BUILTIN_TEMPLATES[name]
    return PromptTemplate(**spec)


# ---- perturbation settings ----


@dataclass
class Triplet:
    """Raw (image, question, result) texts of one rendered demonstration."""

    image: str
    q: str
    r: str


def perturb_sequence(
    triplets: list[Triplet],
    mode: str,
    seed: int = 0,
    caption_text: str = DEFAULT_CAPTION_TEXT,
) -> list[Triplet]:
    """Apply one perturbation setting; exactly one of Q or R is ever altered.

    random-q / random-r: one seeded-random member's field overwrites that
    field in every member. dislocation-q / dislocation-r: the caption text
    replaces the field in every member.
    """
    if mode not in PERTURB_MODES:
        raise ValueError(f"unknown perturbation mode {mode!r}")
    if mode == "standard":
        return [Triplet(t.image, t.q, t.r) for t in triplets]
    if mode.startswith("random"):
        if len(triplets) < 2:
            raise ValueError("random modes need at least 2 demonstrations")
        rng = np.random.default_rng(derive_seed(seed, "perturb", mode))
        src = triplets[int(rng.integers(len(triplets)))]
        if mode == "random-q":
            return [Triplet(t.image, src.q, t.r) for t in triplets]
        return [Triplet(t.image, t.q, src.r) for t in triplets]
    if mode == "dislocation-q":
        return [Triplet(t.image, caption_text, t.r) for t in triplets]
    return [Triplet(t.image, t.q, caption_text) for t in triplets]
