"""Image/text encoder backends.

``ClipEncoder`` wraps the frozen pretrained CLIP ViT-L/14@336px through
``transformers`` and projects patch, CLS, and text tokens into the shared
768-wide space. ``SeededEncoder`` is an offline stand-in with the exact same
geometry (14px patches, width 768) for plumbing and contract tests when the
pretrained weights are unreachable; it is content-dependent and bit-exactly
reproducible but carries no pretrained semantics.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

PATCH_SIZE = 14
CLIP_WIDTH = 768
TILE_SIDE = 336

# Preprocessing constants the pretrained model was trained with.
CLIP_PIXEL_MEAN = np.array([0.48145466, 0.4578275, 0.40821073], dtype=np.float64)
CLIP_PIXEL_STD = np.array([0.26862954, 0.26130258, 0.27577711], dtype=np.float64)


class EncoderError(RuntimeError):
    """The encoder backend cannot be constructed or used."""


class SeededEncoder:
    """Deterministic stand-in encoder with ViT-L/14@336px geometry.

    Patch vectors are a fixed seeded linear map of the patch pixels; the CLS
    vector is a second seeded map of the image mean. Same seed + same image
    bytes give bit-identical embeddings.
    """

    name = "seeded"

    def __init__(self, seed: int = 0, width: int = CLIP_WIDTH):
        rng = np.random.default_rng(seed)
        n_in = PATCH_SIZE * PATCH_SIZE * 3
        self.width = width
        self._w_patch = rng.standard_normal((n_in, width)) / np.sqrt(n_in)
        self._w_cls = rng.standard_normal((3, width)) / np.sqrt(3.0)
        self.seed = seed

    def encode_image(self, rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """rgb: (336, 336, 3) float64 in [0, 1] -> ((24, 24, width), (width,))."""
        if rgb.shape != (TILE_SIDE, TILE_SIDE, 3):
            raise EncoderError(f"encoder tile must be {TILE_SIDE}x{TILE_SIDE}x3, got {rgb.shape}")
        g = TILE_SIDE // PATCH_SIZE
        blocks = (
            rgb.astype(np.float64)
            .reshape(g, PATCH_SIZE, g, PATCH_SIZE, 3)
            .transpose(0, 2, 1, 3, 4)
            .reshape(g, g, -1)
        )
        patches = (blocks - 0.5) @ self._w_patch
        cls = (rgb.reshape(-1, 3).mean(axis=0) - 0.5) @ self._w_cls
        return patches.astype(np.float32), cls.astype(np.float32)

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        """One deterministic vector per string, derived from its hash."""
        out = np.empty((len(texts), self.width), dtype=np.float64)
        for i, text in enumerate(texts):
            digest = hashlib.sha256(f"{self.seed}:{text}".encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            out[i] = rng.standard_normal(self.width)
        return out.astype(np.float32)


class ClipEncoder:
    """Frozen pretrained CLIP ViT-L/14@336px via transformers.

    ``source`` is a local checkout or hub id of the pretrained model. ``tap``
    selects where patch tokens are read: "final" (output of the last encoder
    block, the pre-pooling default) or "prefinal" (input to the last block).
    Either way tokens pass the post layer norm and the visual projection so
    patches, CLS, and text share one 768-wide space.
    """

    name = "clip"

    def __init__(
        self,
        source: str = "openai/clip-vit-large-patch14-336",
        tap: str = "final",
        weights_sha256: str | None = None,
    ):
        if tap not in ("final", "prefinal"):
            raise EncoderError(f"unknown tap {tap!r}; want final or prefinal")
        try:
            import torch
            from transformers import CLIPModel, CLIPTokenizerFast
        except ImportError as exc:  # pragma: no cover
            raise EncoderError(f"transformers backend unavailable: {exc}") from exc
        if weights_sha256 is not None:
            digest = self._weights_digest(source)
            if digest != weights_sha256:
                raise EncoderError(
                    f"weight checksum mismatch: expected {weights_sha256}, got {digest}"
                )
        self._torch = torch
        self.tap = tap
        self.model = CLIPModel.from_pretrained(source).eval()
        self.tokenizer = CLIPTokenizerFast.from_pretrained(source)
        self.width = int(self.model.config.projection_dim)
        vision_cfg = self.model.config.vision_config
        if vision_cfg.patch_size != PATCH_SIZE or vision_cfg.image_size != TILE_SIDE:
            raise EncoderError(
                f"model geometry {vision_cfg.image_size}/{vision_cfg.patch_size} "
                f"is not {TILE_SIDE}/{PATCH_SIZE}"
            )
        for p in self.model.parameters():
            p.requires_grad_(False)

    @staticmethod
    def _weights_digest(source: str) -> str:
        path = Path(source)
        if not path.is_dir():
            raise EncoderError("checksum verification needs a local weights directory")
        h = hashlib.sha256()
        for name in ("model.safetensors", "pytorch_model.bin"):
            f = path / name
            if f.exists():
                h.update(f.read_bytes())
                return h.hexdigest()
        raise EncoderError(f"no weights file found under {path}")

    def encode_image(self, rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if rgb.shape != (TILE_SIDE, TILE_SIDE, 3):
            raise EncoderError(f"encoder tile must be {TILE_SIDE}x{TILE_SIDE}x3, got {rgb.shape}")
        torch = self._torch
        pixels = (rgb.astype(np.float64) - CLIP_PIXEL_MEAN) / CLIP_PIXEL_STD
        batch = torch.from_numpy(pixels.transpose(2, 0, 1)[None]).to(torch.float32)
        with torch.no_grad():
            vision = self.model.vision_model(
                pixel_values=batch, output_hidden_states=(self.tap == "prefinal")
            )
            tokens = (
                vision.last_hidden_state
                if self.tap == "final"
                else vision.hidden_states[-2]
            )
            tokens = self.model.vision_model.post_layernorm(tokens)
            projected = tokens @ self.model.visual_projection.weight.T
        arr = projected[0].cpu().numpy().astype(np.float32)
        g = TILE_SIDE // PATCH_SIZE
        return arr[1:].reshape(g, g, self.width), arr[0]

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        torch = self._torch
        batch = self.tokenizer(texts, padding=True, return_tensors="pt")
        with torch.no_grad():
            features = self.model.get_text_features(**batch)
        return features.cpu().numpy().astype(np.float32)


def make_encoder(backend: str, **kwargs):
    if backend == "clip":
        return ClipEncoder(**kwargs)
    if backend == "seeded":
        kwargs.pop("source", None)
        kwargs.pop("tap", None)
        kwargs.pop("weights_sha256", None)
        return SeededEncoder(**kwargs)
    raise EncoderError(f"unknown backend {backend!r}; want clip or seeded")
