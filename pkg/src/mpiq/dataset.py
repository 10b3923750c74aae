"""PSNR-matched pair sampling, labeling, and dataset manifests.

The builder walks a set of reference images, distorts each with the
configured library, samples pairs of variants whose PSNR values agree within
a tolerance, labels every pair with the voter pool, and writes a JSONL
manifest plus PNG images and a stats sidecar. All sampling randomness flows
from the configured seed, so rebuilding with the same inputs is
byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .distortions import (
    DistortionSpec,
    VariantSet,
    generate_variants,
    save_image,
)
from .validation import check_unit_interval
from .voting import (
    EmptyReferenceError,
    VoteResult,
    VoterModel,
    VoterVote,
    cast_vote,
    prediction_discrepancy,
)

logger = logging.getLogger(__name__)

MANIFEST_KIND = "mpiq-pair-manifest"
MANIFEST_VERSION = 1


class DatasetError(Exception):
    pass


class AllVotersSkippedError(DatasetError):
    """No voter produced usable predictions for a pair."""


class EmptyDatasetError(DatasetError):
    """The build finished but no pair survived sampling and labeling."""


@dataclass(frozen=True)
class SamplerConfig:
    """PSNR tolerance and per-reference sampling budget."""

    delta_db: float = 0.5
    max_pairs_per_reference: int | None = None
    rng_seed: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.delta_db) and self.delta_db > 0):
            raise ValueError(f"delta_db must be finite and positive, got {self.delta_db}")
        if self.max_pairs_per_reference is not None and self.max_pairs_per_reference < 1:
            raise ValueError("max_pairs_per_reference must be >= 1 or None")

    def to_dict(self) -> dict:
        return {
            "delta_db": self.delta_db,
            "max_pairs_per_reference": self.max_pairs_per_reference,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        return cls(
            delta_db=float(d["delta_db"]),
            max_pairs_per_reference=d.get("max_pairs_per_reference"),
            rng_seed=int(d.get("rng_seed", 0)),
        )


@dataclass
class PairRecord:
    """One labeled PSNR-matched pair."""

    reference_id: str
    ref_path: str
    variant_id_0: str
    path_0: str
    psnr_0: float
    variant_id_1: str
    path_1: str
    psnr_1: float
    per_voter: list[VoterVote]
    y: float

    def __post_init__(self):
        if not (np.isfinite(self.psnr_0) and np.isfinite(self.psnr_1)):
            raise ValueError("pair records require finite PSNR on both sides")
        check_unit_interval(self.y, "y")
        votes = [v.vote for v in self.per_voter]
        if abs(self.y - float(np.mean(votes))) > 1e-12:
            raise ValueError("y must equal the vote ratio of per_voter")

    def to_dict(self) -> dict:
        return {
            "reference_id": self.reference_id,
            "ref_path": self.ref_path,
            "variant_id_0": self.variant_id_0,
            "path_0": self.path_0,
            "psnr_0": self.psnr_0,
            "variant_id_1": self.variant_id_1,
            "path_1": self.path_1,
            "psnr_1": self.psnr_1,
            "per_voter": [
                {"voter": v.voter_id, "d0": v.d0, "d1": v.d1, "vote": v.vote}
                for v in self.per_voter
            ],
            "y": self.y,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PairRecord":
        return cls(
            reference_id=d["reference_id"],
            ref_path=d["ref_path"],
            variant_id_0=d["variant_id_0"],
            path_0=d["path_0"],
            psnr_0=float(d["psnr_0"]),
            variant_id_1=d["variant_id_1"],
            path_1=d["path_1"],
            psnr_1=float(d["psnr_1"]),
            per_voter=[
                VoterVote(v["voter"], float(v["d0"]), float(v["d1"]), int(v["vote"]))
                for v in d["per_voter"]
            ],
            y=float(d["y"]),
        )


@dataclass
class DatasetManifest:
    sampler: SamplerConfig
    voter_ids: list[str]
    records: list[PairRecord]
    version: int = MANIFEST_VERSION
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.records:
            raise EmptyDatasetError("manifest must contain at least one record")
        for r in self.records:
            if abs(r.psnr_0 - r.psnr_1) > self.sampler.delta_db:
                raise ValueError(
                    f"record ({r.reference_id}, {r.variant_id_0}, {r.variant_id_1}) "
                    f"violates the {self.sampler.delta_db} dB tolerance"
                )

    def resolve(self, rel_path: str) -> Path:
        if self.root is None:
            raise DatasetError("manifest has no root directory to resolve paths")
        return self.root / rel_path


# ---------------------------------------------------------------------------
# Sampling and labeling
# ---------------------------------------------------------------------------


def _reference_rng(cfg: SamplerConfig, reference_id: str) -> np.random.Generator:
    # derive a stable per-reference stream so parallel builds stay reproducible
    digest = hashlib.sha256(f"{cfg.rng_seed}:{reference_id}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "big"))


def sample_pairs(
    variants: VariantSet, cfg: SamplerConfig
) -> list[tuple[str, str]]:
    """All unordered variant pairs within the PSNR tolerance.

    Variants with infinite PSNR carry no preference signal and are excluded,
    as are pairs of bit-identical variants. When the per-reference budget
    binds, a seeded uniform subsample is drawn.
    """
    usable = sorted(
        (v for v in variants.variants if np.isfinite(v.psnr_db)),
        key=lambda v: v.variant_id,
    )
    pairs = [
        (a.variant_id, b.variant_id)
        for a, b in combinations(usable, 2)
        if abs(a.psnr_db - b.psnr_db) <= cfg.delta_db and a.digest != b.digest
    ]
    limit = cfg.max_pairs_per_reference
    if limit is not None and len(pairs) > limit:
        rng = _reference_rng(cfg, variants.reference_id)
        keep = rng.choice(len(pairs), size=limit, replace=False)
        pairs = [pairs[i] for i in sorted(keep)]
    return pairs


def _label_from_predictions(
    ref_preds: dict, preds_0: dict, preds_1: dict, voters: list[VoterModel]
) -> VoteResult:
    votes = []
    for voter in voters:
        try:
            d0 = prediction_discrepancy(
                voter.task, ref_preds[voter.voter_id], preds_0[voter.voter_id]
            )
            d1 = prediction_discrepancy(
                voter.task, ref_preds[voter.voter_id], preds_1[voter.voter_id]
            )
        except EmptyReferenceError:
            logger.debug("voter %s skipped: empty reference", voter.voter_id)
            continue
        votes.append(VoterVote(voter.voter_id, d0, d1, cast_vote(d0, d1)))
    if not votes:
        raise AllVotersSkippedError("every voter was skipped for this pair")
    return VoteResult(votes)


def label_pair(
    ref: np.ndarray,
    x0: np.ndarray,
    x1: np.ndarray,
    voters: list[VoterModel],
) -> VoteResult:
    """Vote on one (reference, candidate, candidate) triple with a voter pool."""
    if not voters:
        raise ValueError("voter pool is empty")
    ref_preds = {v.voter_id: v.predict(ref) for v in voters}
    preds_0 = {v.voter_id: v.predict(x0) for v in voters}
    preds_1 = {v.voter_id: v.predict(x1) for v in voters}
    return _label_from_predictions(ref_preds, preds_0, preds_1, voters)


def build_dataset(
    references: list[tuple[str, np.ndarray]],
    library: list[DistortionSpec],
    voters: list[VoterModel],
    cfg: SamplerConfig,
    manifest_path: str | Path,
) -> DatasetManifest:
    """Run the full pipeline and write images, manifest, and stats sidecar.

    Images land in an images/ tree beside the manifest. Per-reference
    failures are logged and skipped; an entirely empty result raises
    EmptyDatasetError. Output is canonically ordered (by reference id, then
    variant ids), so reruns with identical inputs are byte-identical.
    """
    if not references:
        raise ValueError("no reference images given")
    if not library:
        raise ValueError("distortion library is empty")
    if not voters:
        raise ValueError("voter pool is empty")
    ids = [rid for rid, _ in references]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate reference ids")

    manifest_path = Path(manifest_path)
    out_dir = manifest_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)

    records: list[PairRecord] = []
    for rid, image in sorted(references, key=lambda r: r[0]):
        try:
            variant_set, pixels = generate_variants(image, library, reference_id=rid)
        except Exception:
            logger.exception("reference %s failed during distortion, skipping", rid)
            continue
        ref_rel = f"images/{rid}/reference.png"
        save_image(image, out_dir / ref_rel)
        for vid, arr in pixels.items():
            save_image(arr, out_dir / f"images/{rid}/{vid}.png")

        psnr_of = {v.variant_id: v.psnr_db for v in variant_set.variants}
        pair_ids = sample_pairs(variant_set, cfg)
        if not pair_ids:
            continue

        ref_preds = {v.voter_id: v.predict(image) for v in voters}
        needed = sorted({vid for pair in pair_ids for vid in pair})
        variant_preds = {
            vid: {v.voter_id: v.predict(pixels[vid]) for v in voters}
            for vid in needed
        }
        for vid0, vid1 in pair_ids:
            try:
                result = _label_from_predictions(
                    ref_preds, variant_preds[vid0], variant_preds[vid1], voters
                )
            except AllVotersSkippedError:
                logger.warning(
                    "pair (%s, %s, %s) dropped: all voters skipped", rid, vid0, vid1
                )
                continue
            records.append(
                PairRecord(
                    reference_id=rid,
                    ref_path=ref_rel,
                    variant_id_0=vid0,
                    path_0=f"images/{rid}/{vid0}.png",
                    psnr_0=psnr_of[vid0],
                    variant_id_1=vid1,
                    path_1=f"images/{rid}/{vid1}.png",
                    psnr_1=psnr_of[vid1],
                    per_voter=result.per_voter,
                    y=result.soft_label,
                )
            )

    if not records:
        raise EmptyDatasetError(
            "no pairs survived; loosen delta_db or check the library/voters"
        )
    records.sort(key=lambda r: (r.reference_id, r.variant_id_0, r.variant_id_1))
    manifest = DatasetManifest(
        sampler=cfg,
        voter_ids=[v.voter_id for v in voters],
        records=records,
        root=out_dir,
    )
    write_manifest(manifest, manifest_path)
    stats = compute_stats(manifest)
    stats_path = manifest_path.with_name(manifest_path.stem + ".stats.json")
    stats_path.write_text(json.dumps(stats, indent=2) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# Manifest I/O and stats
# ---------------------------------------------------------------------------


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "kind": MANIFEST_KIND,
        "version": manifest.version,
        "sampler": manifest.sampler.to_dict(),
        "voter_ids": manifest.voter_ids,
    }
    with path.open("w") as f:
        f.write(json.dumps(header) + "\n")
        for record in manifest.records:
            f.write(json.dumps(record.to_dict()) + "\n")


def load_manifest(path: str | Path, validate_files: bool = False) -> DatasetManifest:
    path = Path(path)
    with path.open() as f:
        lines = [line for line in f if line.strip()]
    if not lines:
        raise DatasetError(f"{path}: empty manifest")
    header = json.loads(lines[0])
    if header.get("kind") != MANIFEST_KIND:
        raise DatasetError(f"{path}: not a pair manifest (kind={header.get('kind')!r})")
    if int(header.get("version", -1)) > MANIFEST_VERSION:
        raise DatasetError(f"{path}: unsupported manifest version {header.get('version')}")
    records = [PairRecord.from_dict(json.loads(line)) for line in lines[1:]]
    manifest = DatasetManifest(
        sampler=SamplerConfig.from_dict(header["sampler"]),
        voter_ids=list(header["voter_ids"]),
        records=records,
        version=int(header["version"]),
        root=path.parent,
    )
    if validate_files:
        missing = sorted(
            {
                rel
                for r in manifest.records
                for rel in (r.ref_path, r.path_0, r.path_1)
                if not (path.parent / rel).exists()
            }
        )
        if missing:
            raise DatasetError(
                f"{path}: {len(missing)} referenced image files missing, "
                f"first: {missing[0]}"
            )
    return manifest


def compute_stats(manifest: DatasetManifest) -> dict:
    """Label histogram, PSNR-difference histogram, and voter agreement matrix."""
    ys = np.array([r.y for r in manifest.records])
    label_hist: dict[str, int] = {}
    for y in ys:
        key = f"{y:.6f}"
        label_hist[key] = label_hist.get(key, 0) + 1

    diffs = np.array([abs(r.psnr_0 - r.psnr_1) for r in manifest.records])
    edges = np.linspace(0.0, manifest.sampler.delta_db, 11)
    counts, _ = np.histogram(diffs, bins=edges)

    voter_ids = manifest.voter_ids
    index = {vid: i for i, vid in enumerate(voter_ids)}
    k = len(voter_ids)
    agree = np.zeros((k, k))
    seen = np.zeros((k, k))
    for r in manifest.records:
        present = [(index[v.voter_id], v.vote) for v in r.per_voter]
        for i, vi in present:
            for j, vj in present:
                seen[i, j] += 1
                agree[i, j] += vi == vj
    with np.errstate(invalid="ignore"):
        matrix = np.where(seen > 0, agree / np.maximum(seen, 1), np.nan)

    return {
        "n_records": len(manifest.records),
        "n_ties": int(np.sum(ys == 0.5)),
        "label_histogram": dict(sorted(label_hist.items())),
        "psnr_diff_histogram": {
            "edges_db": [round(float(e), 6) for e in edges],
            "counts": [int(c) for c in counts],
        },
        "voter_agreement": {
            "voters": voter_ids,
            "matrix": [[round(float(x), 6) for x in row] for row in matrix],
        },
    }
