from itertools import combinations

import numpy as np
import pytest

from mpiq.dataset import (
    AllVotersSkippedError,
    DatasetError,
    DatasetManifest,
    EmptyDatasetError,
    PairRecord,
    SamplerConfig,
    build_dataset,
    compute_stats,
    label_pair,
    load_manifest,
    sample_pairs,
    write_manifest,
)
from mpiq.distortions import DistortionSpec, VariantEntry, VariantSet
from mpiq.voting import (
    ClassificationPrediction,
    DetectionPrediction,
    VoterModel,
    VoterVote,
)

from conftest import desk_library, make_reference


def variant(vid, psnr_db, digest=None):
    spec = DistortionSpec(vid, "noise", {"sigma": 1}, seed=0)
    return VariantEntry(vid, spec, psnr_db, digest or f"digest-{vid}")


def vset(entries, rid="ref"):
    return VariantSet(rid, entries)


class TestSamplePairs:
    def test_within_tolerance(self):
        pairs = sample_pairs(
            vset([variant("a", 30.0), variant("b", 30.4)]), SamplerConfig(0.5)
        )
        assert pairs == [("a", "b")]

    def test_outside_tolerance(self):
        pairs = sample_pairs(
            vset([variant("a", 30.0), variant("b", 30.6)]), SamplerConfig(0.5)
        )
        assert pairs == []

    def test_matches_bruteforce_enumeration(self):
        values = {"a": 30.0, "b": 30.2, "c": 30.4, "d": 35.0}
        entries = [variant(k, v) for k, v in values.items()]
        expected = sorted(
            tuple(sorted(p))
            for p in combinations(values, 2)
            if abs(values[p[0]] - values[p[1]]) <= 0.5
        )
        got = sorted(sample_pairs(vset(entries), SamplerConfig(0.5)))
        assert got == expected
        assert len(got) == 3
        assert all("d" not in p for p in got)

    def test_infinite_psnr_excluded(self):
        entries = [variant("a", float("inf")), variant("b", 30.0), variant("c", 30.1)]
        assert sample_pairs(vset(entries), SamplerConfig(0.5)) == [("b", "c")]

    def test_bit_identical_variants_dropped(self):
        entries = [variant("a", 30.0, digest="same"), variant("b", 30.0, digest="same")]
        assert sample_pairs(vset(entries), SamplerConfig(0.5)) == []

    def test_budget_subsample_is_seeded(self):
        entries = [variant(f"v{i:02d}", 30.0 + 0.01 * i) for i in range(10)]
        cfg = SamplerConfig(delta_db=0.5, max_pairs_per_reference=5, rng_seed=42)
        first = sample_pairs(vset(entries), cfg)
        second = sample_pairs(vset(entries), cfg)
        assert first == second
        assert len(first) == 5
        other = sample_pairs(
            vset(entries), SamplerConfig(0.5, max_pairs_per_reference=5, rng_seed=43)
        )
        assert other != first  # different stream, overwhelmingly


class FixedLogitsVoter(VoterModel):
    """Returns preset logits keyed by image byte signature; for tests only."""

    def __init__(self, voter_id, table):
        super().__init__(voter_id, "classification")
        self.table = table

    def predict(self, image):
        return ClassificationPrediction(np.array(self.table[image.tobytes()]))


class EmptyRefDetector(VoterModel):
    def __init__(self, voter_id):
        super().__init__(voter_id, "detection")

    def predict(self, image):
        return DetectionPrediction(np.empty((0, 4)), [], [])


def fixed_voters(ref, x0, x1, prefer_first: int, total: int):
    """prefer_first voters see x0 closer to ref; the rest see x1 closer."""
    voters = []
    for k in range(total):
        if k < prefer_first:
            table = {
                ref.tobytes(): [0.0, 1.0],
                x0.tobytes(): [0.0, 1.0],   # d0 = 0
                x1.tobytes(): [1.0, 0.0],   # d1 > 0
            }
        else:
            table = {
                ref.tobytes(): [0.0, 1.0],
                x0.tobytes(): [1.0, 0.0],
                x1.tobytes(): [0.0, 1.0],
            }
        voters.append(FixedLogitsVoter(f"v{k}", table))
    return voters


class TestLabelPair:
    def setup_method(self):
        self.ref = make_reference(30)
        self.x0 = make_reference(31)
        self.x1 = make_reference(32)

    def test_unanimous_preference(self):
        voters = fixed_voters(self.ref, self.x0, self.x1, prefer_first=3, total=3)
        result = label_pair(self.ref, self.x0, self.x1, voters)
        assert result.soft_label == 1.0

    def test_identical_candidates_vote_zero(self):
        table = {self.ref.tobytes(): [0.0, 1.0], self.x0.tobytes(): [1.0, 0.0]}
        voters = [FixedLogitsVoter(f"v{k}", table) for k in range(3)]
        result = label_pair(self.ref, self.x0, self.x0, voters)
        assert result.soft_label == 0.0
        assert all(v.d0 == v.d1 for v in result.per_voter)

    def test_five_of_seven(self):
        voters = fixed_voters(self.ref, self.x0, self.x1, prefer_first=5, total=7)
        result = label_pair(self.ref, self.x0, self.x1, voters)
        assert result.soft_label == pytest.approx(5 / 7)

    def test_skipped_voter_excluded_from_k(self):
        voters = fixed_voters(self.ref, self.x0, self.x1, prefer_first=2, total=2)
        voters.append(EmptyRefDetector("det"))
        result = label_pair(self.ref, self.x0, self.x1, voters)
        assert len(result.per_voter) == 2
        assert result.soft_label == 1.0

    def test_all_voters_skipped(self):
        with pytest.raises(AllVotersSkippedError):
            label_pair(self.ref, self.x0, self.x1, [EmptyRefDetector("det")])

    def test_label_symmetry_under_swap(self):
        voters = fixed_voters(self.ref, self.x0, self.x1, prefer_first=2, total=3)
        forward = label_pair(self.ref, self.x0, self.x1, voters)
        backward = label_pair(self.ref, self.x1, self.x0, voters)
        assert backward.soft_label == pytest.approx(1.0 - forward.soft_label)


class TestPairRecord:
    def _record(self, y, votes, psnr_0=30.0, psnr_1=30.2):
        return PairRecord(
            reference_id="r",
            ref_path="images/r/reference.png",
            variant_id_0="a",
            path_0="images/r/a.png",
            psnr_0=psnr_0,
            variant_id_1="b",
            path_1="images/r/b.png",
            psnr_1=psnr_1,
            per_voter=[VoterVote(f"v{i}", 0.1, 0.2, v) for i, v in enumerate(votes)],
            y=y,
        )

    def test_round_trip(self):
        record = self._record(0.5, [1, 0])
        assert PairRecord.from_dict(record.to_dict()) == record

    def test_y_must_match_votes(self):
        with pytest.raises(ValueError, match="vote ratio"):
            self._record(0.9, [1, 0])

    def test_infinite_psnr_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            self._record(0.5, [1, 0], psnr_0=float("inf"))

    def test_manifest_enforces_tolerance(self):
        record = self._record(0.5, [1, 0], psnr_0=30.0, psnr_1=31.0)
        with pytest.raises(ValueError, match="tolerance"):
            DatasetManifest(SamplerConfig(0.5), ["v0", "v1"], [record])


class TestBuildDataset:
    def test_small_build_contents(self, small_manifest):
        # 4 refs x 6 matched cross-family pairs each
        assert len(small_manifest.records) == 24
        for r in small_manifest.records:
            assert abs(r.psnr_0 - r.psnr_1) <= 0.5
            assert len(r.per_voter) == 3
            assert r.variant_id_0.startswith("noise")
            assert r.variant_id_1.startswith("tone")
            # noise side always preferred by the low-pass voters
            assert r.y == 1.0

    def test_files_exist(self, small_manifest):
        for r in small_manifest.records:
            for rel in (r.ref_path, r.path_0, r.path_1):
                assert small_manifest.resolve(rel).exists()

    def test_single_pair_manifest(self, tmp_path):
        refs = [("only", make_reference(50))]
        library = [
            DistortionSpec("noise_a", "noise", {"sigma": 5}, seed=1),
            DistortionSpec("tone_a", "color_tone", {"brightness": 5}),
        ]
        from mpiq.voting import default_voter_pool

        manifest = build_dataset(
            refs, library, default_voter_pool(), SamplerConfig(0.5), tmp_path / "m.jsonl"
        )
        assert len(manifest.records) == 1
        assert len(manifest.records[0].per_voter) == 3

    def test_deterministic_bytes(self, tmp_path):
        refs = [(f"r{i}", make_reference(60 + i)) for i in range(2)]
        from mpiq.voting import default_voter_pool

        outputs = []
        for run in ("one", "two"):
            path = tmp_path / run / "m.jsonl"
            build_dataset(
                refs, desk_library(), default_voter_pool(), SamplerConfig(0.5, rng_seed=3), path
            )
            outputs.append(path.read_bytes())
        assert outputs[0] == outputs[1]

    def test_empty_output_raises(self, tmp_path):
        refs = [("r", make_reference(70))]
        library = [
            DistortionSpec("a", "noise", {"sigma": 2}, seed=1),
            DistortionSpec("b", "noise", {"sigma": 40}, seed=2),
        ]
        from mpiq.voting import default_voter_pool

        with pytest.raises(EmptyDatasetError):
            build_dataset(
                refs, library, default_voter_pool(), SamplerConfig(0.5), tmp_path / "m.jsonl"
            )


class TestManifestIO:
    def test_round_trip(self, small_manifest, tmp_path):
        path = tmp_path / "copy.jsonl"
        write_manifest(small_manifest, path)
        loaded = load_manifest(path)
        assert loaded.records == small_manifest.records
        assert loaded.sampler == small_manifest.sampler
        assert loaded.voter_ids == small_manifest.voter_ids

    def test_validate_files_detects_missing(self, small_manifest, tmp_path):
        path = tmp_path / "orphan.jsonl"
        write_manifest(small_manifest, path)  # images stay in the other directory
        with pytest.raises(DatasetError, match="missing"):
            load_manifest(path, validate_files=True)

    def test_wrong_kind_rejected(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"kind": "other"}\n')
        with pytest.raises(DatasetError, match="not a pair manifest"):
            load_manifest(path)


class TestStats:
    def test_histogram_levels_are_vote_ratios(self, small_manifest):
        stats = compute_stats(small_manifest)
        k = len(small_manifest.voter_ids)
        for key in stats["label_histogram"]:
            level = float(key) * k
            assert abs(level - round(level)) < 1e-6
        assert stats["n_records"] == len(small_manifest.records)

    def test_agreement_matrix_diagonal(self, small_manifest):
        stats = compute_stats(small_manifest)
        matrix = stats["voter_agreement"]["matrix"]
        for i in range(len(matrix)):
            assert matrix[i][i] == pytest.approx(1.0)

    def test_psnr_histogram_counts_cover_records(self, small_manifest):
        stats = compute_stats(small_manifest)
        assert sum(stats["psnr_diff_histogram"]["counts"]) == stats["n_records"]
