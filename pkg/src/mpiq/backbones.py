"""Frozen vision encoders producing per-layer tokens and a global embedding.

Two backends share one interface: a production ViT-B/16 CLIP encoder loaded
from user-supplied weights, and a synthetic encoder whose "features" are
seeded smooth projections of 4x4 pixel-block means. The synthetic backend
needs no downloads, is deterministic, and is differentiable with respect to
pixel values, which lets the full metric/training/rate-distortion stack run
and be gradient-checked at desk scale.

All feature math is float64. Token index 0 is the class token; patch tokens
follow.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .distortions import image_digest
from .validation import check_image

N_LAYERS = 12

CLIP_IMAGE_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_IMAGE_STD = (0.26862954, 0.26130258, 0.27577711)


class BackendUnavailableError(Exception):
    """The requested backbone cannot be loaded (missing weights or package)."""


@dataclass
class LayerFeatures:
    """Tokens of one transformer block output: (T, D), class token first."""

    layer_index: int
    tokens: torch.Tensor

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 2:
            raise ValueError(f"tokens must be (T>=2, D), got {tuple(self.tokens.shape)}")
        if not torch.isfinite(self.tokens).all():
            raise ValueError(f"layer {self.layer_index}: non-finite token values")


@dataclass
class FeatureBundle:
    layers: list[LayerFeatures]
    global_embedding: torch.Tensor

    def __post_init__(self):
        if not self.layers:
            raise ValueError("bundle has no layers")
        indices = [lf.layer_index for lf in self.layers]
        if indices != sorted(indices) or len(set(indices)) != len(indices):
            raise ValueError("layer indices must be strictly increasing")
        shapes = {tuple(lf.tokens.shape) for lf in self.layers}
        if len(shapes) != 1:
            raise ValueError(f"inconsistent token shapes across layers: {shapes}")
        norm = float(self.global_embedding.detach().norm())
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"global embedding must be unit-norm, |g|={norm}")

    @property
    def layer_indices(self) -> list[int]:
        return [lf.layer_index for lf in self.layers]


def to_tensor(image: np.ndarray) -> torch.Tensor:
    """uint8 (H, W, 3) -> float64 tensor in [0, 255]."""
    return torch.from_numpy(check_image(image).astype(np.float64))


def preprocess(
    image: np.ndarray,
    resolution: int = 224,
    mean: tuple = CLIP_IMAGE_MEAN,
    std: tuple = CLIP_IMAGE_STD,
) -> torch.Tensor:
    """Resize (no aspect preservation), scale to [0, 1], normalize: (1, 3, R, R)."""
    return preprocess_tensor(to_tensor(image), resolution, mean, std)


def preprocess_tensor(
    pixels: torch.Tensor,
    resolution: int = 224,
    mean: tuple = CLIP_IMAGE_MEAN,
    std: tuple = CLIP_IMAGE_STD,
) -> torch.Tensor:
    """Differentiable variant of :func:`preprocess` for (H, W, 3) tensors in [0, 255]."""
    x = pixels.permute(2, 0, 1).unsqueeze(0) / 255.0
    if x.shape[-2:] != (resolution, resolution):
        x = torch.nn.functional.interpolate(
            x, size=(resolution, resolution), mode="bilinear", align_corners=False
        )
    m = torch.tensor(mean, dtype=x.dtype).view(1, 3, 1, 1)
    s = torch.tensor(std, dtype=x.dtype).view(1, 3, 1, 1)
    return (x - m) / s


class Encoder:
    """Interface shared by all backbones."""

    backbone_id: str
    n_layers: int = N_LAYERS
    token_count: int
    token_dim: int
    global_dim: int

    def extract(self, image: np.ndarray) -> FeatureBundle:
        """Features of one uint8 image; no gradients retained."""
        with torch.no_grad():
            return self.encode_tensor(to_tensor(image))

    def encode_tensor(self, pixels: torch.Tensor) -> FeatureBundle:
        """Differentiable path: (H, W, 3) float tensor in [0, 255] -> bundle."""
        raise NotImplementedError

    def parameter_checksum(self) -> str:
        raise NotImplementedError


class SyntheticEncoder(Encoder):
    """Deterministic test backbone: 12 layers, T=17 tokens, D=8, D_g=8.

    Patch token t is a tanh projection of the channel means of pixel block t
    on a 4x4 grid, so a pixel change perturbs exactly one patch token per
    layer. Projection weights are drawn once from the seed; the encoder has
    no trainable state.
    """

    GRID = 4

    def __init__(self, seed: int = 0):
        self.backbone_id = f"synthetic-{seed}" if seed else "synthetic"
        self.seed = int(seed)
        self.token_count = self.GRID * self.GRID + 1
        self.token_dim = 8
        self.global_dim = 8
        rng = np.random.default_rng(seed)
        self._layer_w = [
            torch.from_numpy(rng.standard_normal((3, self.token_dim)) * 1.5)
            for _ in range(self.n_layers)
        ]
        self._layer_b = [
            torch.from_numpy(rng.standard_normal(self.token_dim) * 0.2)
            for _ in range(self.n_layers)
        ]
        n_blocks = self.GRID * self.GRID
        self._global_w = torch.from_numpy(
            rng.standard_normal((3 * n_blocks, self.global_dim)) * 0.5
        )
        self._global_b = torch.from_numpy(rng.standard_normal(self.global_dim) * 0.2)

    def _blocks(self, pixels: torch.Tensor) -> torch.Tensor:
        x = pixels.to(torch.float64) / 255.0
        h, w, _ = x.shape
        g = self.GRID
        bh, bw = h // g, w // g
        if bh == 0 or bw == 0:
            raise ValueError(f"image too small for {g}x{g} blocks: {h}x{w}")
        x = x[: bh * g, : bw * g]
        return x.reshape(g, bh, g, bw, 3).mean(dim=(1, 3)).reshape(g * g, 3)

    def encode_tensor(self, pixels: torch.Tensor) -> FeatureBundle:
        blocks = self._blocks(pixels)
        mean_block = blocks.mean(dim=0, keepdim=True)
        layers = []
        for i in range(self.n_layers):
            patch = torch.tanh(blocks @ self._layer_w[i] + self._layer_b[i])
            cls = torch.tanh(mean_block @ self._layer_w[i] + self._layer_b[i])
            layers.append(LayerFeatures(i + 1, torch.cat([cls, patch], dim=0)))
        raw = torch.tanh(blocks.reshape(1, -1) @ self._global_w + self._global_b)
        g = (raw / raw.norm()).reshape(-1)
        return FeatureBundle(layers, g)

    def parameter_checksum(self) -> str:
        h = hashlib.sha256()
        for t in [*self._layer_w, *self._layer_b, self._global_w, self._global_b]:
            h.update(t.numpy().tobytes())
        return h.hexdigest()


class ClipVisionEncoder(Encoder):
    """Frozen ViT-B/16 CLIP visual encoder loaded from local weights.

    Per-layer features are taken at each transformer block's output (before
    the final layer norm); the global embedding is the projected, normalized
    image embedding. Shapes are read from the loaded configuration.
    """

    def __init__(self, weights_path: str | Path, resolution: int | None = None):
        weights_path = Path(weights_path)
        if not weights_path.exists():
            raise BackendUnavailableError(f"no weights at {weights_path}")
        try:
            from transformers import CLIPVisionModelWithProjection
        except ImportError as exc:
            raise BackendUnavailableError(
                "transformers is required for the clip backbone"
            ) from exc
        self.model = CLIPVisionModelWithProjection.from_pretrained(weights_path)
        self.model.eval()
        self.model.requires_grad_(False)
        cfg = self.model.config
        self.backbone_id = "clip-vit-b16"
        self.n_layers = int(cfg.num_hidden_layers)
        self.resolution = int(resolution or cfg.image_size)
        self.token_count = (self.resolution // cfg.patch_size) ** 2 + 1
        self.token_dim = int(cfg.hidden_size)
        self.global_dim = int(cfg.projection_dim)

    def encode_tensor(self, pixels: torch.Tensor) -> FeatureBundle:
        x = preprocess_tensor(pixels, self.resolution).to(torch.float32)
        out = self.model(pixel_values=x, output_hidden_states=True)
        layers = [
            LayerFeatures(i + 1, out.hidden_states[i + 1][0].to(torch.float64))
            for i in range(self.n_layers)
        ]
        g = out.image_embeds[0].to(torch.float64)
        g = g / g.norm()
        return FeatureBundle(layers, g)

    def parameter_checksum(self) -> str:
        h = hashlib.sha256()
        state = self.model.state_dict()
        for key in sorted(state):
            h.update(key.encode())
            h.update(state[key].cpu().numpy().tobytes())
        return h.hexdigest()


class CachingEncoder(Encoder):
    """Wraps an encoder with a content-addressed bundle cache.

    The backbone is frozen, so bundles are reusable across epochs and runs;
    keys combine the image digest with the backbone id. With a cache
    directory, bundles persist as .npz files; otherwise they stay in memory.
    """

    def __init__(self, encoder: Encoder, cache_dir: str | Path | None = None):
        self.inner = encoder
        self.backbone_id = encoder.backbone_id
        self.n_layers = encoder.n_layers
        self.token_count = encoder.token_count
        self.token_dim = encoder.token_dim
        self.global_dim = encoder.global_dim
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self._memory: dict[str, FeatureBundle] = {}

    def encode_tensor(self, pixels: torch.Tensor) -> FeatureBundle:
        return self.inner.encode_tensor(pixels)

    def parameter_checksum(self) -> str:
        return self.inner.parameter_checksum()

    def _cache_path(self, digest: str) -> Path:
        return self.cache_dir / self.backbone_id / f"{digest}.npz"

    def extract(self, image: np.ndarray) -> FeatureBundle:
        digest = image_digest(check_image(image))
        if digest in self._memory:
            return self._memory[digest]
        if self.cache_dir is not None:
            path = self._cache_path(digest)
            if path.exists():
                bundle = _load_bundle(path)
                self._memory[digest] = bundle
                return bundle
        bundle = self.inner.extract(image)
        self._memory[digest] = bundle
        if self.cache_dir is not None:
            _save_bundle(bundle, self._cache_path(digest))
        return bundle


def _save_bundle(bundle: FeatureBundle, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"layer_{lf.layer_index}": lf.tokens.numpy() for lf in bundle.layers}
    arrays["global"] = bundle.global_embedding.numpy()
    arrays["layer_indices"] = np.array(bundle.layer_indices, dtype=np.int64)
    np.savez(path, **arrays)


def _load_bundle(path: Path) -> FeatureBundle:
    with np.load(path) as data:
        indices = [int(i) for i in data["layer_indices"]]
        layers = [
            LayerFeatures(i, torch.from_numpy(data[f"layer_{i}"])) for i in indices
        ]
        g = torch.from_numpy(data["global"])
    return FeatureBundle(layers, g)


def get_backbone(
    backbone_id: str,
    weights_path: str | Path | None = None,
    cache_dir: str | Path | None = None,
) -> Encoder:
    """Resolve a backbone config key to a loaded encoder."""
    if backbone_id == "synthetic" or backbone_id.startswith("synthetic-"):
        seed = int(backbone_id.split("-", 1)[1]) if "-" in backbone_id else 0
        encoder: Encoder = SyntheticEncoder(seed)
    elif backbone_id == "clip-vit-b16":
        path = weights_path or os.environ.get("MPIQ_CLIP_PATH")
        if not path:
            raise BackendUnavailableError(
                "clip-vit-b16 needs a weights path (argument or MPIQ_CLIP_PATH)"
            )
        encoder = ClipVisionEncoder(path)
    else:
        raise BackendUnavailableError(f"unknown backbone {backbone_id!r}")
    if cache_dir is not None:
        return CachingEncoder(encoder, cache_dir)
    return encoder
