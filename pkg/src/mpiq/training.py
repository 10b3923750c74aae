"""Pairwise preference training of the metric head.

Each manifest pair contributes a logit z = S(ref, x0) - S(ref, x1) and a
soft vote-ratio label y; the loss is binary cross-entropy on (z, y).
Because the backbone is frozen, per-pair layer/global similarities are
precomputed once into a feature table and the optimizer (Adam) only ever
touches the few head scalars. Training is deterministic for a fixed seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbones import CachingEncoder, Encoder, get_backbone
from .dataset import DatasetManifest, PairRecord
from .distortions import load_image
from .metric import (
    DEFAULT_PARTITION,
    MetricParams,
    layer_similarity,
    global_similarity,
    layer_weights,
    singleton_partition,
)

TRAIN_REPORT_KIND = "mpiq-train-report"
TRAIN_REPORT_VERSION = 1

WEIGHTINGS = ("grouped", "uniform", "per_layer")


class TrainingError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 64
    epochs: int = 5
    split_fraction: float = 0.8
    rng_seed: int = 123
    drop_ties: bool = True
    hard_labels: bool = False
    group_partition: tuple = DEFAULT_PARTITION
    branch: str = "both"
    layer_weighting: str = "grouped"
    cache_dir: str | None = None

    def __post_init__(self):
        if self.learning_rate < 0 or not np.isfinite(self.learning_rate):
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not (0 < self.split_fraction < 1):
            raise ValueError(f"split_fraction must lie in (0, 1), got {self.split_fraction}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.layer_weighting not in WEIGHTINGS:
            raise ValueError(f"layer_weighting must be one of {WEIGHTINGS}")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "split_fraction": self.split_fraction,
            "rng_seed": self.rng_seed,
            "drop_ties": self.drop_ties,
            "hard_labels": self.hard_labels,
            "group_partition": [list(g) for g in self.group_partition],
            "branch": self.branch,
            "layer_weighting": self.layer_weighting,
        }


def pair_logit(s0, s1):
    """Preference logit of a scored pair: the score difference."""
    return s0 - s1


def pairwise_bce(z, y):
    """Binary cross-entropy on a pairwise logit, stable for large |z|.

    Accepts floats or tensors; broadcasting applies. Returns a tensor. This
    formulation makes the label-flip identity bce(z, y) == bce(-z, 1-y) hold
    bit-exactly: the label coefficient always multiplies a zeroed relu term
    on one side.
    """
    z = torch.as_tensor(z, dtype=torch.float64)
    y = torch.as_tensor(y, dtype=torch.float64)
    if ((y < 0) | (y > 1)).any():
        raise ValueError("labels must lie in [0, 1]")
    return y * torch.relu(-z) + (1.0 - y) * torch.relu(z) + torch.log1p(
        torch.exp(-z.abs())
    )


def split_dataset(
    manifest: DatasetManifest | list[PairRecord], cfg: TrainConfig
) -> tuple[list[PairRecord], list[PairRecord]]:
    """Seeded disjoint train/validation split, after optional tie filtering."""
    records = manifest.records if isinstance(manifest, DatasetManifest) else list(manifest)
    if cfg.drop_ties:
        records = [r for r in records if r.y != 0.5]
    n = len(records)
    if n < 2:
        raise TrainingError(f"need at least 2 records after filtering, got {n}")
    order = np.random.default_rng(cfg.rng_seed).permutation(n)
    n_train = int(np.clip(round(n * cfg.split_fraction), 1, n - 1))
    train = [records[i] for i in order[:n_train]]
    val = [records[i] for i in order[n_train:]]
    return train, val


# ---------------------------------------------------------------------------
# Precomputed pair features
# ---------------------------------------------------------------------------


@dataclass
class PairFeatureTable:
    """Sufficient statistics of scored pairs under a frozen backbone.

    sims_* hold per-layer patch similarities (N, L); glob_* the global
    cosine (N,). Given these, the score depends only on the head params.
    """

    sims_0: torch.Tensor
    sims_1: torch.Tensor
    glob_0: torch.Tensor
    glob_1: torch.Tensor
    y: torch.Tensor
    layer_indices: list[int]

    def __len__(self) -> int:
        return self.sims_0.shape[0]

    def subset(self, idx: np.ndarray) -> "PairFeatureTable":
        i = torch.as_tensor(idx, dtype=torch.long)
        return PairFeatureTable(
            self.sims_0[i], self.sims_1[i], self.glob_0[i], self.glob_1[i],
            self.y[i], self.layer_indices,
        )


def _pair_side_stats(encoder: Encoder, ref, img) -> tuple[torch.Tensor, torch.Tensor]:
    b_ref = encoder.extract(ref)
    b_img = encoder.extract(img)
    sims = torch.stack(
        [layer_similarity(a, b) for a, b in zip(b_ref.layers, b_img.layers)]
    )
    glob = global_similarity(b_ref.global_embedding, b_img.global_embedding)
    return sims, glob


def compute_pair_features(
    triples, y_values, encoder: Encoder
) -> PairFeatureTable:
    """Build the feature table from (ref, x0, x1) image triples and labels."""
    s0_rows, s1_rows, g0s, g1s = [], [], [], []
    for ref, x0, x1 in triples:
        s0, g0 = _pair_side_stats(encoder, ref, x0)
        s1, g1 = _pair_side_stats(encoder, ref, x1)
        s0_rows.append(s0)
        s1_rows.append(s1)
        g0s.append(g0)
        g1s.append(g1)
    if not s0_rows:
        raise TrainingError("no pairs to featurize")
    layer_indices = list(range(1, encoder.n_layers + 1))
    return PairFeatureTable(
        sims_0=torch.stack(s0_rows),
        sims_1=torch.stack(s1_rows),
        glob_0=torch.stack(g0s),
        glob_1=torch.stack(g1s),
        y=torch.tensor(np.asarray(y_values, dtype=np.float64)),
        layer_indices=layer_indices,
    )


def features_from_records(
    records: list[PairRecord], manifest: DatasetManifest, encoder: Encoder
) -> PairFeatureTable:
    def _img(rel):
        return load_image(manifest.resolve(rel))

    triples = ((_img(r.ref_path), _img(r.path_0), _img(r.path_1)) for r in records)
    return compute_pair_features(triples, [r.y for r in records], encoder)


# ---------------------------------------------------------------------------
# Head optimization
# ---------------------------------------------------------------------------


def _effective_partition(cfg: TrainConfig, layer_indices: list[int]):
    if cfg.layer_weighting in ("uniform", "per_layer"):
        return singleton_partition(layer_indices)
    return tuple(tuple(g) for g in cfg.group_partition)


def _batch_scores(table: PairFeatureTable, params: MetricParams):
    alpha = layer_weights(params)
    t0 = table.sims_0 @ alpha
    t1 = table.sims_1 @ alpha
    eta = torch.sigmoid(params.gate_logit)
    if params.branch == "token":
        return t0, t1
    if params.branch == "global":
        return table.glob_0, table.glob_1
    return eta * t0 + (1 - eta) * table.glob_0, eta * t1 + (1 - eta) * table.glob_1


def batch_loss(table: PairFeatureTable, params: MetricParams) -> torch.Tensor:
    s0, s1 = _batch_scores(table, params)
    return pairwise_bce(pair_logit(s0, s1), table.y).mean()


def _accuracy(table: PairFeatureTable, params: MetricParams) -> float:
    with torch.no_grad():
        s0, s1 = _batch_scores(table, params)
        z = (s0 - s1).numpy()
    y = table.y.numpy()
    informative = y != 0.5
    if not informative.any():
        return float("nan")
    correct = np.sign(z[informative]) == np.sign(y[informative] - 0.5)
    return float(np.mean(correct))


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float


@dataclass
class TrainReport:
    config: TrainConfig
    backbone_id: str
    n_train: int
    n_val: int
    epochs: list[EpochStats]
    final_params: MetricParams = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "kind": TRAIN_REPORT_KIND,
            "version": TRAIN_REPORT_VERSION,
            "config": self.config.to_dict(),
            "backbone_id": self.backbone_id,
            "n_train": self.n_train,
            "n_val": self.n_val,
            "epochs": [
                {
                    "epoch": e.epoch,
                    "train_loss": e.train_loss,
                    "val_loss": e.val_loss,
                    "val_accuracy": e.val_accuracy,
                }
                for e in self.epochs
            ],
            "final_params": {
                "group_partition": [list(g) for g in self.final_params.group_partition],
                "group_logits": [float(v) for v in self.final_params.group_logits],
                "gate_logit": float(self.final_params.gate_logit),
                "branch": self.final_params.branch,
            },
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def fit_head(
    train_table: PairFeatureTable,
    val_table: PairFeatureTable,
    cfg: TrainConfig,
    backbone_id: str = "unknown",
) -> TrainReport:
    """Adam over the head scalars; everything else is fixed."""
    partition = _effective_partition(cfg, train_table.layer_indices)
    params = MetricParams.initial(partition, cfg.branch)

    if cfg.hard_labels:
        train_table = PairFeatureTable(
            train_table.sims_0, train_table.sims_1,
            train_table.glob_0, train_table.glob_1,
            torch.round(train_table.y), train_table.layer_indices,
        )

    trainable = []
    if cfg.branch != "global" and cfg.layer_weighting != "uniform":
        params.group_logits.requires_grad_(True)
        trainable.append(params.group_logits)
    if cfg.branch == "both":
        params.gate_logit.requires_grad_(True)
        trainable.append(params.gate_logit)
    optimizer = torch.optim.Adam(trainable, lr=cfg.learning_rate) if trainable else None

    rng = np.random.default_rng(cfg.rng_seed)
    n = len(train_table)
    stats: list[EpochStats] = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        seen, loss_sum = 0, 0.0
        for start in range(0, n, cfg.batch_size):
            batch = train_table.subset(order[start : start + cfg.batch_size])
            loss = batch_loss(batch, params)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch offset {start}: "
                    f"logits={params.group_logits.detach().tolist()}, "
                    f"gate={float(params.gate_logit.detach())}"
                )
            if optimizer is not None:
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
            loss_sum += float(loss.detach()) * len(batch)
            seen += len(batch)
        with torch.no_grad():
            val_loss = float(batch_loss(val_table, params))
        stats.append(
            EpochStats(
                epoch=epoch,
                train_loss=loss_sum / max(seen, 1),
                val_loss=val_loss,
                val_accuracy=_accuracy(val_table, params),
            )
        )
    return TrainReport(
        config=cfg,
        backbone_id=backbone_id,
        n_train=len(train_table),
        n_val=len(val_table),
        epochs=stats,
        final_params=params.clone(requires_grad=False),
    )


def train(
    manifest: DatasetManifest, backbone: Encoder | str, cfg: TrainConfig
) -> TrainReport:
    """Full training entry point over a manifest with images on disk."""
    if isinstance(backbone, str):
        backbone = get_backbone(backbone)
    encoder = (
        backbone
        if isinstance(backbone, CachingEncoder)
        else CachingEncoder(backbone, cfg.cache_dir)
    )
    train_records, val_records = split_dataset(manifest, cfg)
    train_table = features_from_records(train_records, manifest, encoder)
    val_table = features_from_records(val_records, manifest, encoder)
    return fit_head(train_table, val_table, cfg, backbone_id=encoder.backbone_id)
