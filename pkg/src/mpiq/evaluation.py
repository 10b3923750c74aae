"""Metric evaluation: pairwise accuracy, rank correlations, BD-rate, and the
rate-distortion loss adapter.

Any scalar full-reference metric can be evaluated against a labeled pair set
(our manifests or a minimal external schema). Correlation conventions: the
per-pair score difference is correlated against the soft label; accuracy is
computed on non-tie pairs only, matching the training-time tie filter.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
from scipy import stats as scipy_stats
from scipy.signal import fftconvolve

from .backbones import Encoder, to_tensor
from .dataset import MANIFEST_KIND, DatasetManifest, load_manifest
from .distortions import load_image, psnr
from .metric import MetricParams, load_checkpoint, score_components
from .validation import check_finite_vector, check_image

logger = logging.getLogger(__name__)

# trade-off points used when sweeping the rate-distortion objective
DEFAULT_RD_LAMBDAS = (0.6, 2.0, 6.0, 10.0, 18.0)


class EvaluationError(Exception):
    pass


class ZeroVarianceError(EvaluationError):
    pass


class CurveError(EvaluationError):
    pass


# ---------------------------------------------------------------------------
# Metrics under test
# ---------------------------------------------------------------------------


@dataclass
class MetricUnderTest:
    """A deterministic scalar FR metric; lower-is-better ones are negated."""

    metric_id: str
    score_fn: Callable[[np.ndarray, np.ndarray], float]
    higher_is_better: bool = True

    def oriented_score(self, ref: np.ndarray, dist: np.ndarray) -> float:
        s = float(self.score_fn(ref, dist))
        return s if self.higher_is_better else -s


def psnr_metric() -> MetricUnderTest:
    return MetricUnderTest("psnr", psnr)


def ms_ssim_metric() -> MetricUnderTest:
    return MetricUnderTest("ms-ssim", ms_ssim)


def global_similarity_metric(backbone: Encoder) -> MetricUnderTest:
    """Cosine of the backbone's global embeddings, the global-only baseline."""

    def _score(ref, dist):
        a = backbone.extract(ref).global_embedding
        b = backbone.extract(dist).global_embedding
        return float((a * b).sum())

    return MetricUnderTest(f"global-{backbone.backbone_id}", _score)


def learned_metric(params: MetricParams, backbone: Encoder) -> MetricUnderTest:
    def _score(ref, dist):
        c = score_components(backbone.extract(ref), backbone.extract(dist), params)
        return float(c["score"])

    return MetricUnderTest(f"learned-{backbone.backbone_id}", _score)


def resolve_metric(name_or_ckpt: str, backbone: Encoder) -> MetricUnderTest:
    """CLI helper: 'psnr', 'ms-ssim', 'global', or a checkpoint path."""
    if name_or_ckpt == "psnr":
        return psnr_metric()
    if name_or_ckpt == "ms-ssim":
        return ms_ssim_metric()
    if name_or_ckpt == "global":
        return global_similarity_metric(backbone)
    params, backbone_id = load_checkpoint(name_or_ckpt)
    if backbone_id != backbone.backbone_id:
        raise EvaluationError(
            f"checkpoint was trained on {backbone_id!r} but backbone is "
            f"{backbone.backbone_id!r}"
        )
    return learned_metric(params, backbone)


# ---------------------------------------------------------------------------
# Labeled pairs
# ---------------------------------------------------------------------------


@dataclass
class EvalPair:
    ref: np.ndarray
    x0: np.ndarray
    x1: np.ndarray
    y: float


def iter_eval_pairs(manifest: DatasetManifest) -> Iterable[EvalPair]:
    for r in manifest.records:
        yield EvalPair(
            ref=load_image(manifest.resolve(r.ref_path)),
            x0=load_image(manifest.resolve(r.path_0)),
            x1=load_image(manifest.resolve(r.path_1)),
            y=r.y,
        )


def load_labeled_pairs(path: str | Path) -> Iterable[EvalPair]:
    """Load our manifests or the minimal external schema.

    The minimal schema is JSONL with objects carrying ref_path, path_0,
    path_1 and y; paths are relative to the file.
    """
    path = Path(path)
    with path.open() as f:
        first = json.loads(next(iter(f)))
    if first.get("kind") == MANIFEST_KIND:
        return iter_eval_pairs(load_manifest(path, validate_files=True))

    def _generate():
        with path.open() as f:
            for line in f:
                if not line.strip():
                    continue
                d = json.loads(line)
                yield EvalPair(
                    ref=load_image(path.parent / d["ref_path"]),
                    x0=load_image(path.parent / d["path_0"]),
                    x1=load_image(path.parent / d["path_1"]),
                    y=float(d["y"]),
                )

    return _generate()


def _accuracy_from_scores(s0: np.ndarray, s1: np.ndarray, y: np.ndarray) -> float:
    # a metric tie never counts as a correct preference call
    return float(np.mean(np.sign(s0 - s1) == np.sign(y - 0.5)))


def pairwise_accuracy(metric: MetricUnderTest, pairs: Iterable[EvalPair]) -> float:
    """Fraction of non-tie pairs whose score ordering matches the label."""
    s0, s1, y = [], [], []
    for p in pairs:
        if p.y == 0.5:
            raise ValueError("pairwise_accuracy expects tie pairs to be excluded")
        s0.append(metric.oriented_score(p.ref, p.x0))
        s1.append(metric.oriented_score(p.ref, p.x1))
        y.append(p.y)
    if not y:
        raise ValueError("empty pair set")
    return _accuracy_from_scores(np.array(s0), np.array(s1), np.array(y))


@dataclass
class EvalSummary:
    metric_id: str
    n_pairs: int
    n_non_tie: int
    accuracy: float
    srcc: float
    krcc: float
    plcc: float

    def to_dict(self) -> dict:
        return {
            "metric_id": self.metric_id,
            "n_pairs": self.n_pairs,
            "n_non_tie": self.n_non_tie,
            "accuracy": self.accuracy,
            "srcc": self.srcc,
            "krcc": self.krcc,
            "plcc": self.plcc,
        }


def evaluate_metric(metric: MetricUnderTest, pairs: Iterable[EvalPair]) -> EvalSummary:
    """Accuracy on non-tie pairs plus correlations of score differences vs y."""
    s0, s1, y = [], [], []
    for p in pairs:
        s0.append(metric.oriented_score(p.ref, p.x0))
        s1.append(metric.oriented_score(p.ref, p.x1))
        y.append(p.y)
    if not y:
        raise ValueError("empty pair set")
    s0, s1, y = np.array(s0), np.array(s1), np.array(y)
    non_tie = y != 0.5
    acc = (
        _accuracy_from_scores(s0[non_tie], s1[non_tie], y[non_tie])
        if non_tie.any()
        else float("nan")
    )
    z = s0 - s1
    corr = {}
    for name, fn in (("srcc", srcc), ("krcc", krcc), ("plcc", plcc)):
        try:
            corr[name] = fn(z, y)
        except (ValueError, ZeroVarianceError):
            corr[name] = float("nan")
    return EvalSummary(
        metric_id=metric.metric_id,
        n_pairs=len(y),
        n_non_tie=int(non_tie.sum()),
        accuracy=acc,
        **corr,
    )


# ---------------------------------------------------------------------------
# Correlations
# ---------------------------------------------------------------------------


def _corr_inputs(a, b, min_len: int) -> tuple[np.ndarray, np.ndarray]:
    a = check_finite_vector(a, "a", min_len=min_len)
    b = check_finite_vector(b, "b", min_len=min_len)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise ZeroVarianceError("correlation undefined for constant input")
    return a, b


def srcc(a, b) -> float:
    """Spearman rank correlation, average ranks for ties."""
    a, b = _corr_inputs(a, b, min_len=3)
    return float(scipy_stats.spearmanr(a, b).statistic)


def krcc(a, b) -> float:
    """Kendall tau-b (tie-corrected)."""
    a, b = _corr_inputs(a, b, min_len=2)
    return float(scipy_stats.kendalltau(a, b).statistic)


def plcc(a, b) -> float:
    """Pearson correlation of raw values (no nonlinear remapping)."""
    a, b = _corr_inputs(a, b, min_len=3)
    return float(scipy_stats.pearsonr(a, b).statistic)


# ---------------------------------------------------------------------------
# BD-rate
# ---------------------------------------------------------------------------


@dataclass
class RateTaskCurve:
    """Rate/task operating points: bpp strictly increasing, >= 4 points."""

    points: list[tuple[float, float]] = field(default_factory=list)

    def __post_init__(self):
        if len(self.points) < 4:
            raise CurveError(f"curve needs >= 4 points, got {len(self.points)}")
        bpp = self.rates
        if np.any(bpp <= 0):
            raise CurveError("bitrates must be positive")
        if np.any(np.diff(bpp) <= 0):
            raise CurveError("bitrates must be strictly increasing")
        scores = self.scores
        if np.any(np.diff(scores) < 0):
            logger.warning("rate-task curve is not monotone in score; continuing")

    @property
    def rates(self) -> np.ndarray:
        return np.array([p[0] for p in self.points], dtype=np.float64)

    @property
    def scores(self) -> np.ndarray:
        return np.array([p[1] for p in self.points], dtype=np.float64)

    @classmethod
    def from_csv(cls, path: str | Path) -> "RateTaskCurve":
        points = []
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            try:
                points.append((float(cells[0]), float(cells[1])))
            except (ValueError, IndexError):
                continue  # header or comment line
        return cls(points)

    def to_csv(self, path: str | Path) -> None:
        lines = ["bpp,score"] + [f"{r},{s}" for r, s in self.points]
        Path(path).write_text("\n".join(lines) + "\n")


def bd_rate(anchor: RateTaskCurve, test: RateTaskCurve) -> float:
    """Average bitrate change (%) of test vs anchor at equal task score.

    Fits a cubic of log10(rate) against score on each curve, integrates the
    difference over the overlapping score interval, and maps the mean log
    offset back to percent. Negative means the test curve saves rate.
    """
    lo = max(anchor.scores.min(), test.scores.min())
    hi = min(anchor.scores.max(), test.scores.max())
    if not hi > lo:
        raise CurveError(f"curves do not overlap in score: [{lo}, {hi}]")
    try:
        with np.errstate(all="raise"):
            p_anchor = np.polyfit(anchor.scores, np.log10(anchor.rates), 3)
            p_test = np.polyfit(test.scores, np.log10(test.rates), 3)
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        raise CurveError(f"degenerate polynomial fit: {exc}") from exc
    int_anchor = np.polyval(np.polyint(p_anchor), [lo, hi])
    int_test = np.polyval(np.polyint(p_test), [lo, hi])
    avg_log_diff = ((int_test[1] - int_test[0]) - (int_anchor[1] - int_anchor[0])) / (
        hi - lo
    )
    return float((10.0 ** avg_log_diff - 1.0) * 100.0)


# ---------------------------------------------------------------------------
# Rate-distortion adapter
# ---------------------------------------------------------------------------


def rd_distortion(score):
    """Distortion term of the rate-distortion objective: D = 1 - S.

    Works on floats and tensors; gradients pass through untouched.
    """
    return 1.0 - score


def rate_distortion_loss(rate, distortion, lam: float):
    """L = R + lambda * D."""
    return rate + lam * distortion


class MachineDistortionLoss:
    """Differentiable distortion term for codec training.

    Callable on (reference, reconstruction) where the reconstruction is an
    (H, W, 3) float tensor in [0, 255] carrying gradients; returns D = 1 - S
    with gradients flowing back into the reconstruction. The metric head and
    the backbone both stay fixed.
    """

    def __init__(self, params: MetricParams, backbone: Encoder):
        self.params = params.clone(requires_grad=False)
        self.backbone = backbone

    def __call__(self, ref, dist: torch.Tensor) -> torch.Tensor:
        if isinstance(ref, np.ndarray):
            ref_t = to_tensor(check_image(ref))
        else:
            ref_t = ref
        with torch.no_grad():
            bundle_ref = self.backbone.encode_tensor(ref_t)
        bundle_dist = self.backbone.encode_tensor(dist)
        s = score_components(bundle_ref, bundle_dist, self.params)["score"]
        return rd_distortion(s)


# ---------------------------------------------------------------------------
# MS-SSIM baseline
# ---------------------------------------------------------------------------

_MSSSIM_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
_SSIM_C1 = (0.01 * 255.0) ** 2
_SSIM_C2 = (0.03 * 255.0) ** 2


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_terms(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Mean luminance term and contrast-structure term of one scale."""
    win = _gaussian_window()
    mu_a = fftconvolve(a, win, mode="valid")
    mu_b = fftconvolve(b, win, mode="valid")
    var_a = fftconvolve(a * a, win, mode="valid") - mu_a * mu_a
    var_b = fftconvolve(b * b, win, mode="valid") - mu_b * mu_b
    cov = fftconvolve(a * b, win, mode="valid") - mu_a * mu_b
    lum = (2 * mu_a * mu_b + _SSIM_C1) / (mu_a ** 2 + mu_b ** 2 + _SSIM_C1)
    cs = (2 * cov + _SSIM_C2) / (var_a + var_b + _SSIM_C2)
    return float(lum.mean()), float(cs.mean())


def _downsample2(x: np.ndarray) -> np.ndarray:
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2]) / 4.0


def ms_ssim(ref: np.ndarray, dist: np.ndarray, levels: int | None = None) -> float:
    """Multi-scale SSIM on luma, 8-bit range, standard weights.

    The scale count adapts to the image (the 11-tap window must fit at the
    coarsest scale); truncated weights are renormalized.
    """
    ref = check_image(ref, "ref")
    dist = check_image(dist, "dist")
    if ref.shape != dist.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {dist.shape}")
    luma = np.array([0.299, 0.587, 0.114])
    a = ref.astype(np.float64) @ luma
    b = dist.astype(np.float64) @ luma
    max_levels = 1
    side = min(a.shape)
    while side // 2 >= 11 and max_levels < len(_MSSSIM_WEIGHTS):
        side //= 2
        max_levels += 1
    m = min(levels or max_levels, max_levels)
    weights = _MSSSIM_WEIGHTS[:m] / _MSSSIM_WEIGHTS[:m].sum()

    value = 1.0
    for level in range(m):
        lum, cs = _ssim_terms(a, b)
        if level < m - 1:
            value *= max(cs, 0.0) ** weights[level]
            a, b = _downsample2(a), _downsample2(b)
        else:
            value *= max(lum * cs, 0.0) ** weights[level]
    return float(value)
