"""Learned multi-layer feature-similarity score.

The score compares two feature bundles from the same frozen backbone:
per-layer patch-token cosine similarities are mean-pooled, weighted by a
softmax over learnable group logits (spread uniformly within each group),
and blended with the global-embedding cosine through a sigmoid gate. The
whole head is four scalars in the default configuration and is
differentiable end to end, through the features when the backbone supports
it.

Everything here runs on float64 torch tensors so gradient checks against
central finite differences are tight.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import torch

from .backbones import FeatureBundle, LayerFeatures

DEFAULT_PARTITION = ((1, 2, 3, 4), (5, 6, 7, 8), (9, 10, 11, 12))
BRANCHES = ("both", "token", "global")

CHECKPOINT_KIND = "mpiq-metric-checkpoint"
CHECKPOINT_VERSION = 1

_NORM_EPS = 1e-12


class CheckpointError(Exception):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def _validate_partition(partition) -> tuple[tuple[int, ...], ...]:
    groups = tuple(tuple(int(i) for i in g) for g in partition)
    if not groups:
        raise ValueError("group partition must contain at least one group")
    flat: list[int] = []
    for g in groups:
        if not g:
            raise ValueError("group partition contains an empty group")
        if list(g) != list(range(g[0], g[-1] + 1)):
            raise ValueError(f"group {g} is not contiguous")
        flat.extend(g)
    if flat != sorted(set(flat)):
        raise ValueError("groups must be disjoint and ordered early to late")
    return groups


def singleton_partition(layer_indices) -> tuple[tuple[int, ...], ...]:
    """One group per layer; the per-layer-weights ablation."""
    return tuple((int(i),) for i in layer_indices)


def _as_param_tensor(value, name: str) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        if value.dtype != torch.float64:
            if value.requires_grad:
                raise ValueError(f"trainable {name} must be float64, got {value.dtype}")
            return value.to(torch.float64)
        return value
    return torch.tensor(value, dtype=torch.float64)


@dataclass
class MetricParams:
    """The learnable head: group logits, a gate logit, and its configuration."""

    group_logits: torch.Tensor
    gate_logit: torch.Tensor
    group_partition: tuple[tuple[int, ...], ...] = DEFAULT_PARTITION
    branch: str = "both"

    def __post_init__(self):
        self.group_partition = _validate_partition(self.group_partition)
        self.group_logits = _as_param_tensor(self.group_logits, "group_logits")
        self.gate_logit = _as_param_tensor(self.gate_logit, "gate_logit")
        if self.group_logits.shape != (len(self.group_partition),):
            raise ValueError(
                f"need one logit per group: {tuple(self.group_logits.shape)} "
                f"vs {len(self.group_partition)} groups"
            )
        if self.branch not in BRANCHES:
            raise ValueError(f"branch must be one of {BRANCHES}, got {self.branch!r}")

    @classmethod
    def initial(
        cls,
        group_partition=DEFAULT_PARTITION,
        branch: str = "both",
    ) -> "MetricParams":
        """Unbiased start: uniform group weights, gate at 0.5."""
        n = len(tuple(group_partition))
        return cls(torch.zeros(n, dtype=torch.float64), 0.0, group_partition, branch)

    def clone(self, requires_grad: bool = False) -> "MetricParams":
        w = self.group_logits.detach().clone().requires_grad_(requires_grad)
        g = self.gate_logit.detach().clone().requires_grad_(requires_grad)
        return MetricParams(w, g, self.group_partition, self.branch)

    @property
    def layer_indices(self) -> list[int]:
        return [i for g in self.group_partition for i in g]


@dataclass
class ScoreBreakdown:
    """All intermediate quantities of one scored pair, as plain floats."""

    layer_similarities: list[float]
    layer_weights: list[float]
    token_score: float
    global_score: float
    gate: float
    score: float


def _normalize_rows(tokens: torch.Tensor) -> torch.Tensor:
    # zero-norm rows map to the zero vector (cosine contribution 0), not NaN
    norms = tokens.norm(dim=1, keepdim=True).clamp_min(_NORM_EPS)
    return tokens / norms


def layer_similarity(f_ref: LayerFeatures, f_dist: LayerFeatures) -> torch.Tensor:
    """Mean cosine over patch tokens (class token excluded), in [-1, 1]."""
    a, b = f_ref.tokens, f_dist.tokens
    if a.shape != b.shape:
        raise ValueError(f"token shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    ua = _normalize_rows(a.to(torch.float64))
    ub = _normalize_rows(b.to(torch.float64))
    return (ua[1:] * ub[1:]).sum(dim=1).mean()


def layer_weights(params: MetricParams) -> torch.Tensor:
    """Per-layer weights: softmax over groups, uniform within each group."""
    pi = torch.softmax(params.group_logits, dim=0)
    parts = [
        (pi[g] / len(group)).expand(len(group))
        for g, group in enumerate(params.group_partition)
    ]
    return torch.cat(parts)


def global_similarity(g_ref: torch.Tensor, g_dist: torch.Tensor) -> torch.Tensor:
    if g_ref.shape != g_dist.shape:
        raise ValueError(
            f"embedding dim mismatch: {tuple(g_ref.shape)} vs {tuple(g_dist.shape)}"
        )
    return (g_ref.to(torch.float64) * g_dist.to(torch.float64)).sum()


def _check_bundles(
    bundle_ref: FeatureBundle, bundle_dist: FeatureBundle, params: MetricParams
) -> None:
    if bundle_ref.layer_indices != bundle_dist.layer_indices:
        raise ValueError("bundles cover different layer sets")
    if params.layer_indices != bundle_ref.layer_indices:
        raise ValueError(
            f"group partition covers layers {params.layer_indices} but bundles "
            f"carry {bundle_ref.layer_indices}"
        )


def token_score(
    bundle_ref: FeatureBundle, bundle_dist: FeatureBundle, params: MetricParams
) -> torch.Tensor:
    """Weighted sum of per-layer similarities."""
    _check_bundles(bundle_ref, bundle_dist, params)
    sims = torch.stack(
        [layer_similarity(a, b) for a, b in zip(bundle_ref.layers, bundle_dist.layers)]
    )
    return (layer_weights(params) * sims).sum()


def score_components(
    bundle_ref: FeatureBundle, bundle_dist: FeatureBundle, params: MetricParams
) -> dict[str, torch.Tensor]:
    """All score constituents as tensors; gradients flow into params and features."""
    _check_bundles(bundle_ref, bundle_dist, params)
    sims = torch.stack(
        [layer_similarity(a, b) for a, b in zip(bundle_ref.layers, bundle_dist.layers)]
    )
    alpha = layer_weights(params)
    s_token = (alpha * sims).sum()
    s_global = global_similarity(
        bundle_ref.global_embedding, bundle_dist.global_embedding
    )
    eta = torch.sigmoid(params.gate_logit)
    if params.branch == "token":
        s = s_token
    elif params.branch == "global":
        s = s_global
    else:
        s = eta * s_token + (1.0 - eta) * s_global
    return {
        "layer_similarities": sims,
        "layer_weights": alpha,
        "token_score": s_token,
        "global_score": s_global,
        "gate": eta,
        "score": s,
    }


def score(
    bundle_ref: FeatureBundle, bundle_dist: FeatureBundle, params: MetricParams
) -> ScoreBreakdown:
    with torch.no_grad():
        c = score_components(bundle_ref, bundle_dist, params)
    return ScoreBreakdown(
        layer_similarities=[float(v) for v in c["layer_similarities"]],
        layer_weights=[float(v) for v in c["layer_weights"]],
        token_score=float(c["token_score"]),
        global_score=float(c["global_score"]),
        gate=float(c["gate"]),
        score=float(c["score"]),
    )


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: MetricParams, backbone_id: str, path: str | Path) -> None:
    doc = {
        "kind": CHECKPOINT_KIND,
        "version": CHECKPOINT_VERSION,
        "backbone_id": backbone_id,
        "n_groups": len(params.group_partition),
        "group_partition": [list(g) for g in params.group_partition],
        "group_logits": [float(v) for v in params.group_logits],
        "gate_logit": float(params.gate_logit),
        "branch": params.branch,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n")


def load_checkpoint(path: str | Path) -> tuple[MetricParams, str]:
    """Read a checkpoint back; returns (params, backbone_id), bit-exact."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"{path}: unreadable checkpoint: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("kind") != CHECKPOINT_KIND:
        raise CheckpointCorruptError(f"{path}: not a metric checkpoint")
    version = doc.get("version")
    if not isinstance(version, int) or version > CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {version!r} not supported "
            f"(this build reads <= {CHECKPOINT_VERSION})"
        )
    try:
        params = MetricParams(
            group_logits=torch.tensor(doc["group_logits"], dtype=torch.float64),
            gate_logit=float(doc["gate_logit"]),
            group_partition=tuple(tuple(g) for g in doc["group_partition"]),
            branch=doc.get("branch", "both"),
        )
        backbone_id = str(doc["backbone_id"])
        if "n_groups" in doc and int(doc["n_groups"]) != len(params.group_partition):
            raise ValueError("n_groups disagrees with the partition")
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointCorruptError(f"{path}: malformed checkpoint: {exc}") from exc
    return params, backbone_id
