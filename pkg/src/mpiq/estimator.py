"""Scikit-learn style estimator around the preference-trained metric.

``X`` is a sequence of (reference, candidate_0, candidate_1) triples, each
entry either a uint8 RGB array or a path to a PNG; ``y`` holds the soft
preference labels in [0, 1]. After ``fit`` the estimator scores images with
:meth:`similarity` and ranks pairs with :meth:`decision_function` /
:meth:`predict`, so it composes with sklearn model selection utilities.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .backbones import CachingEncoder, get_backbone
from .dataset import DatasetManifest
from .distortions import load_image
from .metric import (
    DEFAULT_PARTITION,
    load_checkpoint,
    save_checkpoint,
    score as score_breakdown,
)
from .training import (
    TrainConfig,
    compute_pair_features,
    features_from_records,
    fit_head,
    split_dataset,
)
from .validation import check_image


def _as_image(x) -> np.ndarray:
    if isinstance(x, (str, Path)):
        return load_image(x)
    return check_image(np.asarray(x))


class MachinePreferenceMetric(BaseEstimator):
    """Full-reference image similarity trained from pairwise machine votes.

    Parameters mirror the training configuration; all are plain values so
    ``get_params``/``set_params``/``clone`` behave as sklearn expects.

    Attributes set by fit:
        params_: learned head parameters.
        report_: per-epoch training statistics.
        backbone_: the loaded (frozen, cached) encoder.
    """

    def __init__(
        self,
        backbone: str = "synthetic",
        weights_path: str | None = None,
        cache_dir: str | None = None,
        group_partition: tuple = DEFAULT_PARTITION,
        branch: str = "both",
        layer_weighting: str = "grouped",
        learning_rate: float = 2e-4,
        batch_size: int = 64,
        epochs: int = 5,
        split_fraction: float = 0.8,
        random_state: int = 123,
        drop_ties: bool = True,
        hard_labels: bool = False,
    ):
        self.backbone = backbone
        self.weights_path = weights_path
        self.cache_dir = cache_dir
        self.group_partition = group_partition
        self.branch = branch
        self.layer_weighting = layer_weighting
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.split_fraction = split_fraction
        self.random_state = random_state
        self.drop_ties = drop_ties
        self.hard_labels = hard_labels

    # ------------------------------------------------------------------
    # fitting
    # ------------------------------------------------------------------

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            split_fraction=self.split_fraction,
            rng_seed=self.random_state,
            drop_ties=self.drop_ties,
            hard_labels=self.hard_labels,
            group_partition=tuple(tuple(g) for g in self.group_partition),
            branch=self.branch,
            layer_weighting=self.layer_weighting,
            cache_dir=self.cache_dir,
        )

    def _encoder(self) -> CachingEncoder:
        inner = get_backbone(self.backbone, self.weights_path)
        return CachingEncoder(inner, self.cache_dir)

    def fit(self, X, y):
        """Fit the head from (ref, x0, x1) triples and soft labels."""
        cfg = self._train_config()
        y = np.asarray(y, dtype=np.float64)
        if len(X) != len(y):
            raise ValueError(f"X and y disagree on length: {len(X)} vs {len(y)}")
        encoder = self._encoder()

        keep = np.ones(len(y), dtype=bool)
        if cfg.drop_ties:
            keep = y != 0.5
        triples = [
            tuple(_as_image(part) for part in X[i]) for i in np.nonzero(keep)[0]
        ]
        table = compute_pair_features(triples, y[keep], encoder)

        n = len(table)
        if n < 2:
            raise ValueError(f"need at least 2 usable pairs to fit, got {n}")
        order = np.random.default_rng(cfg.rng_seed).permutation(n)
        n_train = int(np.clip(round(n * cfg.split_fraction), 1, n - 1))
        report = fit_head(
            table.subset(order[:n_train]),
            table.subset(order[n_train:]),
            cfg,
            backbone_id=encoder.backbone_id,
        )
        self.backbone_ = encoder
        self.params_ = report.final_params
        self.report_ = report
        return self

    def fit_manifest(self, manifest: DatasetManifest):
        """Fit from a built dataset manifest (images resolved on disk)."""
        cfg = self._train_config()
        encoder = self._encoder()
        train_records, val_records = split_dataset(manifest, cfg)
        report = fit_head(
            features_from_records(train_records, manifest, encoder),
            features_from_records(val_records, manifest, encoder),
            cfg,
            backbone_id=encoder.backbone_id,
        )
        self.backbone_ = encoder
        self.params_ = report.final_params
        self.report_ = report
        return self

    # ------------------------------------------------------------------
    # inference
    # ------------------------------------------------------------------

    def similarity(self, ref, dist) -> float:
        """The learned similarity score of one image pair (higher = closer)."""
        check_is_fitted(self, "params_")
        b_ref = self.backbone_.extract(_as_image(ref))
        b_dist = self.backbone_.extract(_as_image(dist))
        return score_breakdown(b_ref, b_dist, self.params_).score

    def breakdown(self, ref, dist):
        """Full score decomposition (per-layer similarities, weights, gate)."""
        check_is_fitted(self, "params_")
        b_ref = self.backbone_.extract(_as_image(ref))
        b_dist = self.backbone_.extract(_as_image(dist))
        return score_breakdown(b_ref, b_dist, self.params_)

    def decision_function(self, X) -> np.ndarray:
        """Pairwise preference logits z = S(ref, x0) - S(ref, x1)."""
        check_is_fitted(self, "params_")
        out = np.empty(len(X), dtype=np.float64)
        for i, (ref, x0, x1) in enumerate(X):
            ref = _as_image(ref)
            out[i] = self.similarity(ref, x0) - self.similarity(ref, x1)
        return out

    def predict(self, X) -> np.ndarray:
        """1 where the first candidate is preferred, else 0."""
        return (self.decision_function(X) > 0).astype(np.int64)

    def predict_proba(self, X) -> np.ndarray:
        """Columns [P(second preferred), P(first preferred)] via the logistic link."""
        z = self.decision_function(X)
        p1 = 1.0 / (1.0 + np.exp(-z))
        return np.column_stack([1.0 - p1, p1])

    def score(self, X, y) -> float:
        """Pairwise accuracy against soft labels; ties in z count as wrong."""
        z = self.decision_function(X)
        y = np.asarray(y, dtype=np.float64)
        informative = y != 0.5
        if not informative.any():
            raise ValueError("no non-tie pairs to score against")
        return float(np.mean(np.sign(z[informative]) == np.sign(y[informative] - 0.5)))

    # ------------------------------------------------------------------
    # persistence
    # ------------------------------------------------------------------

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        save_checkpoint(self.params_, self.backbone_.backbone_id, path)

    def load(self, path):
        """Attach previously trained head parameters to this estimator."""
        params, backbone_id = load_checkpoint(path)
        encoder = get_backbone(backbone_id, self.weights_path)
        self.backbone_ = CachingEncoder(encoder, self.cache_dir)
        self.params_ = params
        return self

    @classmethod
    def from_checkpoint(cls, path, weights_path: str | None = None):
        params, backbone_id = load_checkpoint(path)
        est = cls(backbone=backbone_id, weights_path=weights_path, branch=params.branch)
        return est.load(path)
