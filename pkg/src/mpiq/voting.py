"""Prediction-discrepancy scoring, voting, and vote aggregation.

A voter wraps a downstream model. For a reference image and two distorted
candidates it produces discrepancies (d0, d1) between the reference
prediction and each candidate's prediction, votes for the candidate with the
strictly smaller discrepancy, and the vote ratio across the pool becomes the
soft label. Production voters wrap pretrained networks; the toy voters here
are deterministic functions of image statistics, sufficient for dataset
construction at desk scale and for tests.
"""

from __future__ import annotations

import json
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .validation import check_finite_vector, check_image

TASKS = (
    "classification",
    "detection",
    "instance_segmentation",
    "semantic_segmentation",
)

# Applied identically to reference and distorted detections before matching.
DETECTION_CONFIDENCE_THRESHOLD = 0.3

_PROB_FLOOR = 1e-12


class VotingError(Exception):
    pass


class EmptyReferenceError(VotingError):
    """The reference image produced no usable predictions for this voter."""


# ---------------------------------------------------------------------------
# Prediction containers
# ---------------------------------------------------------------------------


@dataclass
class ClassificationPrediction:
    logits: np.ndarray

    def __post_init__(self):
        self.logits = check_finite_vector(self.logits, "logits", min_len=2)


@dataclass
class DetectionPrediction:
    """Boxes are [x1, y1, x2, y2] with x1 < x2 and y1 < y2."""

    boxes: np.ndarray
    class_ids: np.ndarray
    confidences: np.ndarray
    masks: list[np.ndarray] | None = None

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64).reshape(-1)
        self.confidences = np.asarray(self.confidences, dtype=np.float64).reshape(-1)
        n = len(self.boxes)
        if len(self.class_ids) != n or len(self.confidences) != n:
            raise ValueError("boxes, class_ids and confidences must align")
        if n and not (
            np.all(self.boxes[:, 0] < self.boxes[:, 2])
            and np.all(self.boxes[:, 1] < self.boxes[:, 3])
        ):
            raise ValueError("boxes must satisfy x1 < x2 and y1 < y2")
        if n and not (np.all(self.confidences >= 0) and np.all(self.confidences <= 1)):
            raise ValueError("confidences must lie in [0, 1]")
        if self.masks is not None and len(self.masks) != n:
            raise ValueError("masks must align with boxes")

    def filtered(self, threshold: float) -> "DetectionPrediction":
        keep = self.confidences >= threshold
        masks = None
        if self.masks is not None:
            masks = [m for m, k in zip(self.masks, keep) if k]
        return DetectionPrediction(
            self.boxes[keep], self.class_ids[keep], self.confidences[keep], masks
        )


@dataclass
class SegmentationPrediction:
    class_map: np.ndarray

    def __post_init__(self):
        self.class_map = np.asarray(self.class_map)
        if self.class_map.ndim != 2:
            raise ValueError("class map must be 2-D")


# ---------------------------------------------------------------------------
# Discrepancy functions
# ---------------------------------------------------------------------------


def _stable_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def classification_discrepancy(
    logits_ref: np.ndarray, logits_dist: np.ndarray
) -> float:
    """KL divergence (reference first) between softmaxed logit vectors."""
    lr = check_finite_vector(logits_ref, "logits_ref", min_len=2)
    ld = check_finite_vector(logits_dist, "logits_dist", min_len=2)
    if lr.shape != ld.shape:
        raise ValueError(f"logit length mismatch: {lr.shape} vs {ld.shape}")
    p = _stable_softmax(lr)
    q = _stable_softmax(ld)
    kl = float(np.sum(p * (np.log(np.maximum(p, _PROB_FLOOR)) - np.log(np.maximum(q, _PROB_FLOOR)))))
    return max(kl, 0.0)


def box_iou(a: np.ndarray, b: np.ndarray) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shape mismatch: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def detection_discrepancy(
    preds_ref: DetectionPrediction,
    preds_dist: DetectionPrediction,
    use_masks: bool = False,
    confidence_threshold: float = DETECTION_CONFIDENCE_THRESHOLD,
) -> float:
    """Confidence-weighted matching cost, treating the reference as pseudo truth.

    Reference boxes are visited in descending confidence order; each claims
    the unmatched same-class distorted box with maximal IoU (box IoU, or mask
    IoU when ``use_masks``). A matched box costs 1 - IoU, an unmatchable one
    costs 1, and each distorted box can be claimed at most once.
    """
    ref = preds_ref.filtered(confidence_threshold)
    dist = preds_dist.filtered(confidence_threshold)
    if len(ref.boxes) == 0 or ref.confidences.sum() <= 0:
        raise EmptyReferenceError("reference image has no usable detections")
    if use_masks and (ref.masks is None or dist.masks is None):
        raise ValueError("instance matching requires masks on both predictions")

    def _overlap(i: int, j: int) -> float:
        if use_masks:
            return mask_iou(ref.masks[i], dist.masks[j])
        return box_iou(ref.boxes[i], dist.boxes[j])

    # stable sort keeps deterministic order for equal confidences
    order = np.argsort(-ref.confidences, kind="stable")
    claimed: set[int] = set()
    total_cost = 0.0
    for i in order:
        candidates = [
            j
            for j in range(len(dist.boxes))
            if j not in claimed and dist.class_ids[j] == ref.class_ids[i]
        ]
        if not candidates:
            cost = 1.0
        else:
            ious = [_overlap(int(i), j) for j in candidates]
            j_star = candidates[int(np.argmax(ious))]
            claimed.add(j_star)
            cost = 1.0 - max(ious)
        total_cost += ref.confidences[i] * cost
    return float(total_cost / ref.confidences.sum())


def segmentation_discrepancy(
    pred_ref: SegmentationPrediction, pred_dist: SegmentationPrediction
) -> float:
    """1 - mean IoU over the classes present in the reference map."""
    ref = pred_ref.class_map
    dist = pred_dist.class_map
    if ref.shape != dist.shape:
        raise ValueError(f"class map shape mismatch: {ref.shape} vs {dist.shape}")
    classes = np.unique(ref)
    ious = []
    for c in classes:
        in_ref = ref == c
        in_dist = dist == c
        union = np.logical_or(in_ref, in_dist).sum()
        ious.append(np.logical_and(in_ref, in_dist).sum() / union)
    return float(1.0 - np.mean(ious))


def cast_vote(d0: float, d1: float) -> int:
    """1 iff the first candidate is strictly more consistent; ties go to 0."""
    if not (np.isfinite(d0) and np.isfinite(d1)):
        raise ValueError(f"discrepancies must be finite, got ({d0}, {d1})")
    return 1 if d0 < d1 else 0


def aggregate_votes(votes: list[int]) -> float:
    """Vote ratio in [0, 1]; the soft preference label."""
    if len(votes) == 0:
        raise ValueError("cannot aggregate an empty vote list")
    if any(v not in (0, 1) for v in votes):
        raise ValueError(f"votes must be 0 or 1, got {votes}")
    return float(np.mean(votes))


# ---------------------------------------------------------------------------
# Voters
# ---------------------------------------------------------------------------


class VoterModel(ABC):
    """A downstream model that predicts on images deterministically."""

    task: str
    voter_id: str

    def __init__(self, voter_id: str, task: str):
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}")
        self.voter_id = voter_id
        self.task = task

    @abstractmethod
    def predict(self, image: np.ndarray):
        """Return the task-appropriate prediction for one image."""


def prediction_discrepancy(task: str, pred_ref, pred_dist) -> float:
    if task == "classification":
        return classification_discrepancy(pred_ref.logits, pred_dist.logits)
    if task == "detection":
        return detection_discrepancy(pred_ref, pred_dist)
    if task == "instance_segmentation":
        return detection_discrepancy(pred_ref, pred_dist, use_masks=True)
    if task == "semantic_segmentation":
        return segmentation_discrepancy(pred_ref, pred_dist)
    raise ValueError(f"unknown task {task!r}")


@dataclass
class VoterVote:
    voter_id: str
    d0: float
    d1: float
    vote: int


@dataclass
class VoteResult:
    per_voter: list[VoterVote]
    soft_label: float = field(init=False)

    def __post_init__(self):
        if not self.per_voter:
            raise ValueError("vote result needs at least one voter")
        self.soft_label = aggregate_votes([v.vote for v in self.per_voter])


def _block_means(image: np.ndarray, grid: int) -> np.ndarray:
    """Per-block channel means on a grid x grid partition, values in [0, 1]."""
    x = image.astype(np.float64) / 255.0
    h, w, _ = x.shape
    bh, bw = h // grid, w // grid
    trimmed = x[: bh * grid, : bw * grid]
    return trimmed.reshape(grid, bh, grid, bw, 3).mean(axis=(1, 3))


class ChannelStatClassifierVoter(VoterModel):
    """Classifier over low-pass image statistics.

    Logits are a seeded random projection of channel means, channel second
    moments, or per-block channel means. Averaging over many pixels makes the
    logits nearly invariant to zero-mean noise while global tone shifts move
    them, which is what makes this voter useful for constructing separable
    toy datasets.
    """

    def __init__(
        self,
        voter_id: str,
        seed: int,
        stat: str = "mean",
        n_classes: int = 8,
        gain: float = 6.0,
        grid: int = 4,
    ):
        super().__init__(voter_id, "classification")
        if stat not in ("mean", "second_moment", "block_mean"):
            raise ValueError(f"unknown stat {stat!r}")
        self.seed = int(seed)
        self.stat = stat
        self.n_classes = int(n_classes)
        self.gain = float(gain)
        self.grid = int(grid)
        self._weights: np.ndarray | None = None

    def _features(self, image: np.ndarray) -> np.ndarray:
        x = image.astype(np.float64) / 255.0
        if self.stat == "mean":
            return x.mean(axis=(0, 1))
        if self.stat == "second_moment":
            return (x * x).mean(axis=(0, 1))
        return _block_means(image, self.grid).reshape(-1)

    def predict(self, image: np.ndarray) -> ClassificationPrediction:
        feats = self._features(check_image(image))
        if self._weights is None or self._weights.shape[1] != feats.size:
            rng = np.random.default_rng(self.seed)
            # scale keeps logits out of softmax saturation
            self._weights = rng.standard_normal((self.n_classes, feats.size)) * (
                self.gain / np.sqrt(feats.size)
            )
        return ClassificationPrediction(self._weights @ feats)


class GridDetectorVoter(VoterModel):
    """Detector over luminance bands of a coarse block grid.

    Each luminance band present in the block map yields one box: the pixel
    bounding box of its blocks, with the band index as class and the band's
    block share mapped into [0.4, 1.0] as confidence.
    """

    def __init__(self, voter_id: str, grid: int = 8, bands: int = 4):
        super().__init__(voter_id, "detection")
        self.grid = int(grid)
        self.bands = int(bands)

    def _band_map(self, image: np.ndarray) -> np.ndarray:
        luma = _block_means(image, self.grid) @ np.array([0.299, 0.587, 0.114])
        return np.minimum((luma * self.bands).astype(np.int64), self.bands - 1)

    def predict(self, image: np.ndarray) -> DetectionPrediction:
        image = check_image(image)
        h, w, _ = image.shape
        bh, bw = h // self.grid, w // self.grid
        band = self._band_map(image)
        boxes, classes, confs = [], [], []
        for b in range(self.bands):
            rows, cols = np.nonzero(band == b)
            if rows.size == 0:
                continue
            boxes.append(
                [
                    cols.min() * bw,
                    rows.min() * bh,
                    (cols.max() + 1) * bw,
                    (rows.max() + 1) * bh,
                ]
            )
            classes.append(b)
            confs.append(0.4 + 0.6 * rows.size / band.size)
        return DetectionPrediction(
            np.array(boxes, dtype=np.float64).reshape(-1, 4),
            np.array(classes, dtype=np.int64),
            np.array(confs, dtype=np.float64),
        )


class GridSegmenterVoter(VoterModel):
    """Semantic map of luminance bands, constant over each grid block."""

    def __init__(self, voter_id: str, grid: int = 8, bands: int = 4):
        super().__init__(voter_id, "semantic_segmentation")
        self.grid = int(grid)
        self.bands = int(bands)

    def predict(self, image: np.ndarray) -> SegmentationPrediction:
        image = check_image(image)
        h, w, _ = image.shape
        luma = _block_means(image, self.grid) @ np.array([0.299, 0.587, 0.114])
        band = np.minimum((luma * self.bands).astype(np.int64), self.bands - 1)
        full = np.repeat(np.repeat(band, h // self.grid, axis=0), w // self.grid, axis=1)
        out = np.zeros((h, w), dtype=np.int64)
        out[: full.shape[0], : full.shape[1]] = full
        # pad edge rows/cols left over from integer block division
        out[full.shape[0]:, :] = out[full.shape[0] - 1: full.shape[0], :]
        out[:, full.shape[1]:] = out[:, full.shape[1] - 1: full.shape[1]]
        return SegmentationPrediction(out)


# ---------------------------------------------------------------------------
# Voter pool config
# ---------------------------------------------------------------------------

VOTER_POOL_KIND = "mpiq-voter-pool"
VOTER_POOL_VERSION = 1

VOTER_KINDS = {
    "channel_stat_classifier": ChannelStatClassifierVoter,
    "grid_detector": GridDetectorVoter,
    "grid_segmenter": GridSegmenterVoter,
}


def make_voter(kind: str, voter_id: str, params: dict) -> VoterModel:
    if kind not in VOTER_KINDS:
        raise ValueError(f"unknown voter kind {kind!r}")
    return VOTER_KINDS[kind](voter_id, **params)


def default_voter_pool() -> list[VoterModel]:
    """Three low-pass statistic classifiers; the stock desk-scale pool."""
    return [
        ChannelStatClassifierVoter("cls-mean", seed=11, stat="mean"),
        ChannelStatClassifierVoter("cls-block", seed=12, stat="block_mean"),
        ChannelStatClassifierVoter("cls-sq", seed=13, stat="second_moment"),
    ]


def load_voters(path: str | Path) -> list[VoterModel]:
    doc = json.loads(Path(path).read_text())
    if doc.get("kind") != VOTER_POOL_KIND:
        raise ValueError(f"not a voter pool config: kind={doc.get('kind')!r}")
    if int(doc.get("version", -1)) > VOTER_POOL_VERSION:
        raise ValueError(f"unsupported voter pool version {doc.get('version')}")
    voters = [
        make_voter(v["kind"], v["id"], dict(v.get("params", {})))
        for v in doc["voters"]
    ]
    ids = [v.voter_id for v in voters]
    if len(set(ids)) != len(ids):
        raise ValueError("voter pool contains duplicate ids")
    if not voters:
        raise ValueError("voter pool is empty")
    return voters


def save_voter_pool(entries: list[dict], path: str | Path) -> None:
    """Write a voter pool config; entries are {id, kind, params} dicts."""
    doc = {"kind": VOTER_POOL_KIND, "version": VOTER_POOL_VERSION, "voters": entries}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
