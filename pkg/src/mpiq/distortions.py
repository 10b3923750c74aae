"""Deterministic image degradation operators and low-level fidelity (PSNR).

Every operator maps a uint8 RGB image to a uint8 RGB image of the same size.
Intermediate math runs in float64; the result is clipped to [0, 255] and
rounded back to 8-bit before anything downstream (including PSNR) sees it.
Randomized families (noise) draw their random field from the spec seed, so a
fixed (image, spec) always yields a bit-identical output.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image
from scipy.fft import dctn, idctn
from scipy.ndimage import gaussian_filter

from .validation import check_image, check_same_shape

FAMILIES = (
    "codec_jpeg",
    "codec_webp",
    "learned_codec",
    "resample",
    "blur",
    "noise",
    "color_tone",
)

PEAK = 255.0

# Rec.601 luma weights, used by the saturation transform.
_LUMA = np.array([0.299, 0.587, 0.114])


class DistortionError(Exception):
    """Base class for distortion-engine failures."""


class UnsupportedFamilyError(DistortionError):
    pass


class InvalidParamsError(DistortionError):
    pass


@dataclass(frozen=True)
class DistortionSpec:
    """A named, parameterized, seeded degradation operator instance."""

    name: str
    family: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def validate(self) -> "DistortionSpec":
        if self.family not in FAMILIES:
            raise UnsupportedFamilyError(
                f"spec {self.name!r}: unknown family {self.family!r}"
            )
        try:
            _VALIDATORS[self.family](self.params)
        except InvalidParamsError as exc:
            raise InvalidParamsError(f"spec {self.name!r}: {exc}") from None
        return self

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "family": self.family,
            "params": dict(self.params),
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DistortionSpec":
        return cls(
            name=str(d["name"]),
            family=str(d["family"]),
            params=dict(d.get("params", {})),
            seed=int(d.get("seed", 0)),
        ).validate()


@dataclass(frozen=True)
class VariantEntry:
    variant_id: str
    spec: DistortionSpec
    psnr_db: float
    digest: str


@dataclass
class VariantSet:
    """All distorted variants of one reference, with PSNR vs the reference."""

    reference_id: str
    variants: list[VariantEntry]

    def __post_init__(self):
        ids = [v.variant_id for v in self.variants]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate variant ids in set {self.reference_id!r}")
        for v in self.variants:
            if not (v.psnr_db > 0):
                raise ValueError(
                    f"variant {v.variant_id!r}: psnr must be positive or +inf, "
                    f"got {v.psnr_db}"
                )


# ---------------------------------------------------------------------------
# Parameter validation
# ---------------------------------------------------------------------------


def _require(params: dict, key: str) -> float:
    if key not in params:
        raise InvalidParamsError(f"missing required parameter {key!r}")
    value = params[key]
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise InvalidParamsError(f"parameter {key!r} must be a number, got {value!r}")
    if not np.isfinite(value):
        raise InvalidParamsError(f"parameter {key!r} must be finite, got {value!r}")
    return float(value)


def _validate_quality(params: dict) -> None:
    q = _require(params, "quality")
    if not (1 <= q <= 100):
        raise InvalidParamsError(f"quality must lie in [1, 100], got {q}")


def _validate_learned(params: dict) -> None:
    step = _require(params, "step")
    if step <= 0:
        raise InvalidParamsError(f"step must be positive, got {step}")
    codec = params.get("codec", _DEFAULT_LEARNED_CODEC)
    if codec not in _LEARNED_CODECS:
        raise InvalidParamsError(f"no learned codec registered under {codec!r}")


def _validate_resample(params: dict) -> None:
    scale = _require(params, "scale")
    if not (0 < scale <= 1):
        raise InvalidParamsError(f"scale must lie in (0, 1], got {scale}")


def _validate_blur(params: dict) -> None:
    sigma = _require(params, "sigma")
    if sigma <= 0:
        raise InvalidParamsError(f"blur sigma must be positive, got {sigma}")


def _validate_noise(params: dict) -> None:
    sigma = _require(params, "sigma")
    if sigma < 0:
        raise InvalidParamsError(f"noise sigma must be non-negative, got {sigma}")


_TONE_KEYS = ("brightness", "contrast", "gamma", "saturation")


def _validate_tone(params: dict) -> None:
    known = [k for k in _TONE_KEYS if k in params]
    if not known:
        raise InvalidParamsError(
            f"color_tone needs at least one of {_TONE_KEYS}, got {sorted(params)}"
        )
    for k in known:
        v = _require(params, k)
        if k in ("contrast", "gamma") and v <= 0:
            raise InvalidParamsError(f"{k} must be positive, got {v}")
        if k == "saturation" and v < 0:
            raise InvalidParamsError(f"saturation must be non-negative, got {v}")


_VALIDATORS: dict[str, Callable[[dict], None]] = {
    "codec_jpeg": _validate_quality,
    "codec_webp": _validate_quality,
    "learned_codec": _validate_learned,
    "resample": _validate_resample,
    "blur": _validate_blur,
    "noise": _validate_noise,
    "color_tone": _validate_tone,
}


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------


def _to_uint8(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.round(arr), 0, 255).astype(np.uint8)


def _pil_codec(image: np.ndarray, fmt: str, quality: int) -> np.ndarray:
    buf = io.BytesIO()
    Image.fromarray(image).save(buf, format=fmt, quality=quality)
    decoded = Image.open(io.BytesIO(buf.getvalue())).convert("RGB")
    return np.asarray(decoded, dtype=np.uint8)


def _block_dct_quantize(image: np.ndarray, step: float) -> np.ndarray:
    """Bundled stand-in for a learned codec: quantize 8x8 DCT coefficients.

    Keeps the pipeline runnable without pretrained weights; real codecs plug
    in through :func:`register_learned_codec`.
    """
    h, w, _ = image.shape
    ph, pw = (-h) % 8, (-w) % 8
    x = np.pad(image.astype(np.float64), ((0, ph), (0, pw), (0, 0)), mode="edge")
    hh, ww = x.shape[:2]
    blocks = x.reshape(hh // 8, 8, ww // 8, 8, 3)
    coeffs = dctn(blocks, axes=(1, 3), norm="ortho")
    coeffs = np.round(coeffs / step) * step
    rec = idctn(coeffs, axes=(1, 3), norm="ortho").reshape(hh, ww, 3)
    return _to_uint8(rec[:h, :w])


_LEARNED_CODECS: dict[str, Callable[[np.ndarray, float], np.ndarray]] = {
    "block_dct": _block_dct_quantize,
}
_DEFAULT_LEARNED_CODEC = "block_dct"


def register_learned_codec(
    name: str, fn: Callable[[np.ndarray, float], np.ndarray], default: bool = False
) -> None:
    """Register a codec backend for the ``learned_codec`` family.

    ``fn(image_uint8, step) -> image_uint8`` must be deterministic and
    preserve the input shape.
    """
    global _DEFAULT_LEARNED_CODEC
    _LEARNED_CODECS[name] = fn
    if default:
        _DEFAULT_LEARNED_CODEC = name


def _apply_resample(image: np.ndarray, scale: float) -> np.ndarray:
    h, w = image.shape[:2]
    if scale == 1.0:
        return image.copy()
    dw, dh = max(1, round(w * scale)), max(1, round(h * scale))
    pil = Image.fromarray(image)
    down = pil.resize((dw, dh), Image.BICUBIC)
    up = down.resize((w, h), Image.BILINEAR)
    return np.asarray(up, dtype=np.uint8)


def _apply_noise(image: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    if sigma == 0:
        return image.copy()
    field = np.random.default_rng(seed).standard_normal(image.shape)
    return _to_uint8(image.astype(np.float64) + sigma * field)


def _apply_tone(image: np.ndarray, params: dict) -> np.ndarray:
    x = image.astype(np.float64)
    if "brightness" in params:
        x = x + params["brightness"]
    if "contrast" in params:
        x = (x - 128.0) * params["contrast"] + 128.0
    if "gamma" in params:
        x = PEAK * (np.clip(x, 0, PEAK) / PEAK) ** params["gamma"]
    if "saturation" in params:
        luma = np.clip(x, 0, PEAK) @ _LUMA
        x = luma[..., None] + (x - luma[..., None]) * params["saturation"]
    return _to_uint8(x)


def apply_distortion(image: np.ndarray, spec: DistortionSpec) -> np.ndarray:
    """Apply one degradation operator; deterministic for fixed (image, spec)."""
    image = check_image(image)
    spec.validate()
    p = spec.params
    if spec.family == "codec_jpeg":
        return _pil_codec(image, "JPEG", int(p["quality"]))
    if spec.family == "codec_webp":
        return _pil_codec(image, "WEBP", int(p["quality"]))
    if spec.family == "learned_codec":
        codec = _LEARNED_CODECS[str(p.get("codec", _DEFAULT_LEARNED_CODEC))]
        out = codec(image, float(p["step"]))
        check_same_shape(image, out, "learned codec output")
        return out
    if spec.family == "resample":
        return _apply_resample(image, float(p["scale"]))
    if spec.family == "blur":
        blurred = gaussian_filter(
            image.astype(np.float64), sigma=(p["sigma"], p["sigma"], 0), mode="reflect"
        )
        return _to_uint8(blurred)
    if spec.family == "noise":
        return _apply_noise(image, float(p["sigma"]), spec.seed)
    if spec.family == "color_tone":
        return _apply_tone(image, p)
    raise UnsupportedFamilyError(f"unknown family {spec.family!r}")


def psnr(ref: np.ndarray, dist: np.ndarray) -> float:
    """PSNR in dB over all pixels and channels; +inf when the MSE is zero."""
    ref = np.asarray(ref)
    dist = np.asarray(dist)
    check_same_shape(ref, dist, "psnr inputs")
    mse = np.mean((ref.astype(np.float64) - dist.astype(np.float64)) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(PEAK * PEAK / mse))


def image_digest(image: np.ndarray) -> str:
    """Content hash of an image array (pixels plus shape)."""
    h = hashlib.sha256()
    h.update(str(image.shape).encode())
    h.update(np.ascontiguousarray(image).tobytes())
    return h.hexdigest()


def generate_variants(
    image: np.ndarray,
    library: list[DistortionSpec],
    reference_id: str = "ref",
) -> tuple[VariantSet, dict[str, np.ndarray]]:
    """Apply every spec in the library to one reference image.

    Returns the variant set and a dict of variant_id -> pixels. All specs are
    validated up front so an invalid library member fails the whole call
    before any output is produced.
    """
    image = check_image(image)
    if not library:
        raise ValueError("distortion library is empty")
    names = [s.name for s in library]
    if len(set(names)) != len(names):
        raise ValueError("distortion library contains duplicate spec names")
    for spec in library:
        spec.validate()

    entries = []
    pixels: dict[str, np.ndarray] = {}
    for spec in library:
        try:
            out = apply_distortion(image, spec)
        except DistortionError as exc:
            raise DistortionError(f"spec {spec.name!r} failed: {exc}") from exc
        entries.append(
            VariantEntry(
                variant_id=spec.name,
                spec=spec,
                psnr_db=psnr(image, out),
                digest=image_digest(out),
            )
        )
        pixels[spec.name] = out
    return VariantSet(reference_id=reference_id, variants=entries), pixels


# ---------------------------------------------------------------------------
# Library config and image files
# ---------------------------------------------------------------------------

LIBRARY_KIND = "mpiq-distortion-library"
LIBRARY_VERSION = 1


def load_library(path: str | Path | None = None) -> list[DistortionSpec]:
    """Load a distortion library config; defaults to the bundled 66-spec file."""
    if path is None:
        text = resources.files("mpiq.data").joinpath("default_library.json").read_text()
    else:
        text = Path(path).read_text()
    doc = json.loads(text)
    if doc.get("kind") != LIBRARY_KIND:
        raise ValueError(f"not a distortion library config: kind={doc.get('kind')!r}")
    if int(doc.get("version", -1)) > LIBRARY_VERSION:
        raise ValueError(f"unsupported library version {doc.get('version')}")
    specs = [DistortionSpec.from_dict(d) for d in doc["specs"]]
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValueError("library config contains duplicate spec names")
    return specs


def save_library(specs: list[DistortionSpec], path: str | Path) -> None:
    doc = {
        "kind": LIBRARY_KIND,
        "version": LIBRARY_VERSION,
        "specs": [s.to_dict() for s in specs],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        return check_image(np.asarray(img.convert("RGB"), dtype=np.uint8), str(path))


def save_image(image: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(check_image(image)).save(path, format="PNG")
