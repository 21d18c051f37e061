"""Dataset -> icdstore/v1 extraction.

A dataset spec is a JSON file:

    {
      "instruction": "optional instruction text",
      "samples": [
        {"id": "...", "image_ref": "...", "image_path": "...",
         "q": "...", "r": "...", "task": "..."},
        ...
      ],
      "queries": [
        {"id": "...", "image_ref": "...", "image_path": "...",
         "q": "...", "gt": "...", "task": "..."},
        ...
      ]
    }

Each sample needs q and r texts and either an image_ref (encoded by
reference) or an image_path (encoded by content; unreadable files fail
the job). Ids default to the zero-padded sample position, so reruns of
the same spec emit identical records.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .encoder import DEFAULT_ENCODER, DualEncoder, EncoderError
from .storeio import fmt_vec, write_store


@dataclass
class ExtractJob:
    dataset: str  # path to the dataset spec JSON
    out: str  # destination icdstore/v1 path
    encoder_id: str = DEFAULT_ENCODER
    tail_layers: int = 0  # 0 = frozen encoder


def _encode_image(enc: DualEncoder, entry: dict, label: str) -> tuple[np.ndarray, str]:
    if entry.get("image_path"):
        return enc.encode_image_file(entry["image_path"]), entry["image_path"]
    if entry.get("image_ref"):
        return enc.encode_image(entry["image_ref"]), entry["image_ref"]
    raise EncoderError(f"{label}: needs image_ref or image_path")


def extract(job: ExtractJob) -> str:
    """Run the job and return the written store path."""
    with open(job.dataset, "r", encoding="utf-8") as fh:
        spec = json.load(fh)
    samples = spec.get("samples") or []
    if not samples:
        raise ValueError("dataset spec has no samples")
    enc = DualEncoder(job.encoder_id)

    demos = []
    img_embs, text_embs = [], []
    for i, s in enumerate(samples):
        demo_id = s.get("id") or f"s{i:04d}"
        img, ref = _encode_image(enc, s, f"sample {demo_id}")
        q_text, r_text = s.get("q", ""), s.get("r", "")
        q_vec = enc.encode_text(q_text)
        qr_vec = enc.encode_text(f"{q_text} {r_text}".strip())
        demos.append((demo_id, s, img, ref, q_vec, qr_vec, q_text, r_text))
        img_embs.append(img)
        text_embs.append(qr_vec)

    if job.tail_layers > 0:
        # offline adaptation of the image tower tail on this dataset's pairs;
        # re-encode images afterwards so the store reflects the adapted tower
        enc.adapt_image_tail(np.stack(img_embs), np.stack(text_embs), job.tail_layers)
        demos = [
            (demo_id, s, _encode_image(enc, s, f"sample {demo_id}")[0], ref, qv, qrv, qt, rt)
            for demo_id, s, _, ref, qv, qrv, qt, rt in demos
        ]

    records = []
    for demo_id, s, img, ref, q_vec, qr_vec, q_text, r_text in demos:
        records.append(
            {
                "id": demo_id,
                "role": "demo",
                "task": s.get("task") or None,
                "img": fmt_vec(img),
                "q": fmt_vec(q_vec),
                "r": fmt_vec(enc.encode_text(r_text)),
                "qr": fmt_vec(qr_vec),
                "text_q": q_text,
                "text_r": r_text,
                "image_ref": ref,
            }
        )
    for i, s in enumerate(spec.get("queries") or []):
        query_id = s.get("id") or f"q{i:04d}"
        img, _ = _encode_image(enc, s, f"query {query_id}")
        records.append(
            {
                "id": query_id,
                "role": "query",
                "task": s.get("task") or None,
                "img": fmt_vec(img),
                "q": fmt_vec(enc.encode_text(s.get("q", ""))),
                "gt": s.get("gt") or None,
            }
        )
    if spec.get("instruction"):
        records.append(
            {
                "id": "__inst__",
                "role": "inst",
                "inst": fmt_vec(enc.encode_text(spec["instruction"])),
                "text_q": spec["instruction"],
            }
        )
    write_store(records, enc.dim, job.out)
    return job.out
