"""Shared fixtures: synthetic reference images and the desk-scale dataset.

The desk library pairs a brightness-shift family against a noise family at
interleaved PSNR levels: same-index specs land within the 0.5 dB tolerance
(alternating which side has the higher PSNR), while neighboring strengths
stay > 3 dB apart so only cross-family pairs form. Low-pass toy voters are
nearly blind to zero-mean noise but sensitive to tone shifts, so every
cross-family pair is labeled in the noise variant's favor by construction.
"""

import numpy as np
import pytest
from PIL import Image

from mpiq.dataset import SamplerConfig, build_dataset
from mpiq.distortions import DistortionSpec
from mpiq.voting import default_voter_pool

TONE_STRENGTHS = [3, 5, 8, 12, 18, 27]
NOISE_STRENGTHS = [2.9, 5.2, 7.8, 12.4, 17.5, 27.9]


def make_reference(seed: int, size: int = 64) -> np.ndarray:
    """Smooth random image with values in [70, 185] so tone shifts don't clip."""
    rng = np.random.default_rng(seed)
    low = (rng.uniform(0.0, 1.0, size=(8, 8, 3)) * 255).astype(np.uint8)
    img = np.asarray(Image.fromarray(low).resize((size, size), Image.BILINEAR))
    scaled = 70.0 + img.astype(np.float64) / 255.0 * 115.0
    return np.clip(np.round(scaled), 0, 255).astype(np.uint8)


def desk_library() -> list[DistortionSpec]:
    specs = [
        DistortionSpec(f"noise_s{s:04.1f}", "noise", {"sigma": s}, seed=7000 + i)
        for i, s in enumerate(NOISE_STRENGTHS)
    ]
    specs += [
        DistortionSpec(f"tone_b{d:02d}", "color_tone", {"brightness": d})
        for d in TONE_STRENGTHS
    ]
    return specs


@pytest.fixture(scope="session")
def small_manifest(tmp_path_factory):
    """4 references x 12 desk specs -> ~24 labeled cross-family pairs."""
    out = tmp_path_factory.mktemp("small_dataset")
    references = [(f"ref{i:02d}", make_reference(1000 + i)) for i in range(4)]
    return build_dataset(
        references,
        desk_library(),
        default_voter_pool(),
        SamplerConfig(delta_db=0.5, rng_seed=7),
        out / "manifest.jsonl",
    )
