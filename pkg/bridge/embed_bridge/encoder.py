"""Deterministic dual encoder (image tower + text tower).

The desk-scale backend is a feature-hashing encoder: tokens (or image
byte chunks) are hashed into a sparse bag-of-features vector and pushed
through a fixed stack of seeded tanh layers, so identical inputs always
produce identical unit-norm embeddings of the configured dimension. The
optional tail adaptation refits the last layers of the image tower by
ridge regression so paired image/text embeddings align — an offline
stand-in for fine-tuning an encoder's last layers on a dataset.
"""

from __future__ import annotations

import hashlib

import numpy as np

N_LAYERS = 3
DEFAULT_ENCODER = "dual-hash-32"


class EncoderError(RuntimeError):
    """Unknown encoder id, unreadable media, or degenerate input."""


def _seed(label: str) -> int:
    return int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "big") >> 1


def _seeded_matrix(label: str, rows: int, cols: int) -> np.ndarray:
    rng = np.random.default_rng(_seed(label))
    return rng.standard_normal((rows, cols)) / np.sqrt(cols)


class DualEncoder:
    """Encoder ids are `dual-hash-<dim>`; anything else fails to load."""

    def __init__(self, encoder_id: str = DEFAULT_ENCODER):
        prefix = "dual-hash-"
        if not encoder_id.startswith(prefix):
            raise EncoderError(f"unknown encoder {encoder_id!r}")
        try:
            dim = int(encoder_id[len(prefix):])
        except ValueError as e:
            raise EncoderError(f"unknown encoder {encoder_id!r}") from e
        if dim < 2:
            raise EncoderError(f"encoder dimension must be >= 2, got {dim}")
        self.id = encoder_id
        self.dim = dim
        self.text_layers = [
            _seeded_matrix(f"{encoder_id}:text:{i}", dim, dim) for i in range(N_LAYERS)
        ]
        self.image_layers = [
            _seeded_matrix(f"{encoder_id}:image:{i}", dim, dim) for i in range(N_LAYERS)
        ]
        self.image_adapters: list[np.ndarray] = []

    # ---- feature hashing ----

    def _hash_features(self, tokens: list[str], tower: str) -> np.ndarray:
        v = np.zeros(self.dim, dtype=np.float64)
        for tok in tokens:
            h = hashlib.sha256(f"{tower}:{tok}".encode("utf-8")).digest()
            idx = int.from_bytes(h[:4], "big") % self.dim
            v[idx] += 1.0 if h[4] % 2 == 0 else -1.0
        norm = np.linalg.norm(v)
        if norm == 0.0:
            raise EncoderError("input hashed to a zero feature vector")
        return v / norm

    def _run(
        self,
        feats: np.ndarray,
        layers: list[np.ndarray],
        adapters: list[np.ndarray] | None = None,
    ) -> np.ndarray:
        h = feats
        for w in layers:
            h = np.tanh(w @ h)
        norm = np.linalg.norm(h)
        if norm == 0.0:
            raise EncoderError("degenerate embedding")
        h = h / norm
        for w in adapters or []:
            h = w @ h
            norm = np.linalg.norm(h)
            if norm == 0.0:
                raise EncoderError("degenerate embedding after adaptation")
            h = h / norm
        return h

    # ---- public encoding ----

    def encode_text(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise EncoderError("cannot encode empty text")
        return self._run(self._hash_features(text.lower().split(), "text"), self.text_layers)

    def encode_image(self, ref: str, data: bytes | None = None) -> np.ndarray:
        """Encode an image by reference string, or by content when bytes are
        supplied (hashed in 64-byte chunks)."""
        if data is not None:
            tokens = [data[i : i + 64].hex() for i in range(0, len(data), 64)]
            if not tokens:
                raise EncoderError(f"image {ref!r} is empty")
        else:
            if not ref:
                raise EncoderError("image needs a reference or content")
            tokens = [ref]
        return self._run(
            self._hash_features(tokens, "image"), self.image_layers, self.image_adapters
        )

    def encode_image_file(self, path: str) -> np.ndarray:
        try:
            with open(path, "rb") as fh:
                data = fh.read()
        except OSError as e:
            raise EncoderError(f"unreadable media {path!r}: {e}") from e
        return self.encode_image(path, data)

    # ---- offline tail adaptation ----

    def adapt_image_tail(
        self,
        image_embs: np.ndarray,
        text_embs: np.ndarray,
        tail_layers: int,
        ridge: float = 1e-2,
    ) -> None:
        """Fit `tail_layers` extra linear layers on top of the image tower by
        sequential ridge regression toward the paired text embeddings.

        tail_layers = 0 leaves the tower frozen. Deterministic: closed-form
        least squares, no sampling."""
        if tail_layers < 0 or tail_layers > N_LAYERS:
            raise EncoderError(
                f"tail_layers must be in 0..{N_LAYERS}, got {tail_layers}"
            )
        if tail_layers == 0:
            return
        a = np.asarray(image_embs, dtype=np.float64)
        t = np.asarray(text_embs, dtype=np.float64)
        if a.shape != t.shape or a.shape[1] != self.dim:
            raise EncoderError("adaptation needs paired [n, dim] embeddings")
        for _ in range(tail_layers):
            gram = a.T @ a + ridge * np.eye(self.dim)
            w = np.linalg.solve(gram, a.T @ t).T  # minimizes ||a w.T - t||^2
            self.image_adapters.append(w)
            a = a @ w.T
            norms = np.linalg.norm(a, axis=1, keepdims=True)
            a = a / np.clip(norms, 1e-12, None)
