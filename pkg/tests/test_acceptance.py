"""Acceptance suite: one test per release criterion, at pinned tolerances.

Each test prints a [PASS] line on success (run with -s or -rA to see them);
a failing criterion fails its test. Criteria 6-8 share one desk-scale
pipeline run (20 synthetic references, a 12-spec two-family library, 3
deterministic voters) executed twice through the real CLI.
"""

import json
import math

import numpy as np
import pytest
import torch

from mpiq.backbones import SyntheticEncoder, to_tensor
from mpiq.cli import main as cli_main
from mpiq.dataset import load_manifest
from mpiq.distortions import psnr, save_image, save_library
from mpiq.evaluation import (
    MachineDistortionLoss,
    RateTaskCurve,
    bd_rate,
    evaluate_metric,
    iter_eval_pairs,
    krcc,
    learned_metric,
    psnr_metric,
    srcc,
)
from mpiq.metric import (
    MetricParams,
    load_checkpoint,
    score,
    score_components,
)
from mpiq.training import (
    PairFeatureTable,
    TrainConfig,
    batch_loss,
    pairwise_bce,
    split_dataset,
)
from mpiq.voting import ClassificationPrediction, VoterModel
from mpiq.dataset import label_pair

from conftest import desk_library, make_reference
from test_evaluation import krcc_oracle, srcc_oracle
from test_voting import (
    _random_scene,
    kl_bruteforce,
    rasterized_matching_oracle,
)
from mpiq.voting import EmptyReferenceError, detection_discrepancy


def report(line: str) -> None:
    print(line)


# ---------------------------------------------------------------------------
# Criterion 1: closed-form suite
# ---------------------------------------------------------------------------


def test_criterion_1_closed_forms():
    ref = np.full((32, 32, 3), 100, dtype=np.uint8)
    dist = np.full((32, 32, 3), 101, dtype=np.uint8)
    assert psnr(ref, dist) == pytest.approx(48.1308, abs=1e-3)

    assert float(pairwise_bce(0.0, 0.5)) == pytest.approx(math.log(2.0), abs=1e-9)

    from mpiq.metric import layer_weights

    params = MetricParams(torch.tensor([math.log(2.0), 0.0, 0.0], dtype=torch.float64), 0.0)
    alpha = layer_weights(params).numpy()
    assert np.all(np.abs(alpha[:4] - 0.125) <= 1e-9)
    assert np.all(np.abs(alpha[4:] - 0.0625) <= 1e-9)

    scores = [0.60, 0.72, 0.80, 0.86, 0.90]
    rates = [0.10, 0.22, 0.45, 0.85, 1.60]
    anchor = RateTaskCurve(list(zip(rates, scores)))
    doubled = RateTaskCurve([(r * 2.0, s) for r, s in anchor.points])
    assert bd_rate(anchor, doubled) == pytest.approx(100.0, abs=0.1)

    report("[PASS] criterion 1: closed-form suite (psnr, bce, weights, bd-rate)")


# ---------------------------------------------------------------------------
# Criterion 2: metric invariants on 200 random image pairs
# ---------------------------------------------------------------------------


def test_criterion_2_metric_invariants():
    encoder = SyntheticEncoder()
    rng = np.random.default_rng(2)
    for trial in range(200):
        a = encoder.extract(make_reference(10_000 + trial))
        b = encoder.extract(make_reference(20_000 + trial))
        params = MetricParams(
            torch.tensor(rng.standard_normal(3) * 4),
            float(rng.standard_normal() * 4),
        )
        fwd = score(a, b, params)
        assert -1.0 <= fwd.score <= 1.0
        assert fwd.score == pytest.approx(score(b, a, params).score, abs=1e-9)
        assert sum(fwd.layer_weights) == pytest.approx(1.0, abs=1e-9)
        assert 0.0 < fwd.gate < 1.0
        assert score(a, a, params).score == pytest.approx(1.0, abs=1e-9)
    report("[PASS] criterion 2: metric invariants on 200 random synthetic pairs")


# ---------------------------------------------------------------------------
# Criterion 3: gradient checks
# ---------------------------------------------------------------------------


def _synthetic_feature_table(seed: int, n_pairs: int = 8) -> PairFeatureTable:
    from mpiq.training import compute_pair_features

    encoder = SyntheticEncoder()
    rng = np.random.default_rng(seed)
    triples = [
        (
            make_reference(int(rng.integers(1e6))),
            make_reference(int(rng.integers(1e6))),
            make_reference(int(rng.integers(1e6))),
        )
        for _ in range(n_pairs)
    ]
    y = rng.integers(0, 2, n_pairs).astype(np.float64)
    return compute_pair_features(triples, y, encoder)


def test_criterion_3_gradient_checks():
    h = 1e-4
    rng = np.random.default_rng(3)
    for batch_index in range(10):
        table = _synthetic_feature_table(300 + batch_index)
        w0 = rng.standard_normal(3)
        g0 = float(rng.standard_normal())
        params = MetricParams(
            torch.tensor(w0, dtype=torch.float64).requires_grad_(True),
            torch.tensor(g0, dtype=torch.float64).requires_grad_(True),
        )
        batch_loss(table, params).backward()

        def value(w, gate):
            return float(batch_loss(table, MetricParams(torch.tensor(w), gate)))

        for k in range(3):
            wp, wm = w0.copy(), w0.copy()
            wp[k] += h
            wm[k] -= h
            fd = (value(wp, g0) - value(wm, g0)) / (2 * h)
            assert float(params.group_logits.grad[k]) == pytest.approx(
                fd, rel=1e-3, abs=1e-10
            )
        fd_gate = (value(w0, g0 + h) - value(w0, g0 - h)) / (2 * h)
        assert float(params.gate_logit.grad) == pytest.approx(fd_gate, rel=1e-3, abs=1e-10)

    # distortion-term gradient w.r.t. pixels on the synthetic backbone
    encoder = SyntheticEncoder()
    loss_fn = MachineDistortionLoss(
        MetricParams(torch.tensor([0.2, -0.1, 0.3], dtype=torch.float64), 0.5), encoder
    )
    ref = make_reference(333)
    dist = to_tensor(make_reference(334)).requires_grad_(True)
    loss_fn(ref, dist).backward()
    h_px = 1e-3
    probe_rng = np.random.default_rng(33)
    for _ in range(6):
        i, j, c = (
            int(probe_rng.integers(0, 64)),
            int(probe_rng.integers(0, 64)),
            int(probe_rng.integers(0, 3)),
        )
        up = dist.detach().clone()
        up[i, j, c] += h_px
        down = dist.detach().clone()
        down[i, j, c] -= h_px
        fd = (float(loss_fn(ref, up)) - float(loss_fn(ref, down))) / (2 * h_px)
        assert float(dist.grad[i, j, c]) == pytest.approx(fd, rel=1e-2, abs=1e-12)
    report("[PASS] criterion 3: head gradients (rel<=1e-3) and pixel gradients (rel<=1e-2)")


# ---------------------------------------------------------------------------
# Criterion 4: oracle equivalence
# ---------------------------------------------------------------------------


def test_criterion_4_oracle_equivalence():
    rng = np.random.default_rng(4)
    checked = 0
    while checked < 50:
        n = int(rng.integers(3, 9))
        a = rng.integers(0, 5, n).astype(float)
        b = rng.integers(0, 5, n).astype(float)
        if np.all(a == a[0]) or np.all(b == b[0]):
            continue
        assert srcc(a, b) == pytest.approx(srcc_oracle(a, b), abs=1e-12)
        assert krcc(a, b) == pytest.approx(krcc_oracle(a, b), abs=1e-12)
        checked += 1

    scene_rng = np.random.default_rng(44)
    checked = 0
    while checked < 20:
        ref = _random_scene(scene_rng)
        dist = _random_scene(scene_rng)
        try:
            expected = rasterized_matching_oracle(ref, dist)
        except EmptyReferenceError:
            continue
        assert detection_discrepancy(ref, dist) == pytest.approx(expected, abs=1e-9)
        checked += 1
    report("[PASS] criterion 4: srcc/krcc and detection matching agree with oracles")


# ---------------------------------------------------------------------------
# Criterion 5: vote-rule fidelity
# ---------------------------------------------------------------------------


class _PresetLogitsVoter(VoterModel):
    def __init__(self, voter_id, table):
        super().__init__(voter_id, "classification")
        self.table = table

    def predict(self, image):
        return ClassificationPrediction(np.array(self.table[image.tobytes()]))


def test_criterion_5_vote_rule_fidelity():
    rng = np.random.default_rng(5)
    sizes = [3, 5, 7]
    for trial in range(100):
        k = sizes[trial % 3]
        ref = make_reference(50_000 + trial, size=32)
        x0 = make_reference(60_000 + trial, size=32)
        x1 = make_reference(70_000 + trial, size=32)
        voters = []
        expected_votes = []
        for v in range(k):
            logits = {
                ref.tobytes(): rng.standard_normal(4),
                x0.tobytes(): rng.standard_normal(4),
                x1.tobytes(): rng.standard_normal(4),
            }
            voters.append(_PresetLogitsVoter(f"v{v}", logits))
            d0 = kl_bruteforce(logits[ref.tobytes()], logits[x0.tobytes()])
            d1 = kl_bruteforce(logits[ref.tobytes()], logits[x1.tobytes()])
            expected_votes.append(1 if d0 < d1 else 0)
        expected_y = sum(expected_votes) / k

        result = label_pair(ref, x0, x1, voters)
        assert [v.vote for v in result.per_voter] == expected_votes
        assert result.soft_label == pytest.approx(expected_y, abs=1e-12)
        assert abs(result.soft_label * k - round(result.soft_label * k)) <= 1e-9
    report("[PASS] criterion 5: label_pair matches direct vote/ratio evaluation, y*K integral")


# ---------------------------------------------------------------------------
# Criteria 6-8: desk-scale end-to-end runs
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    refs = root / "refs"
    refs.mkdir()
    for i in range(20):
        save_image(make_reference(90_000 + i), refs / f"ref{i:02d}.png")
    library_path = root / "library.json"
    save_library(desk_library(), library_path)

    runs = {}
    for run in ("a", "b"):
        out = root / f"run_{run}"
        manifest = out / "manifest.jsonl"
        ckpt = out / "head.json"
        assert (
            cli_main(
                [
                    "build-dataset",
                    "--refs", str(refs),
                    "--library", str(library_path),
                    "--delta", "0.5",
                    "--seed", "0",
                    "--out", str(manifest),
                ]
            )
            == 0
        )
        assert (
            cli_main(
                [
                    "train-metric",
                    "--manifest", str(manifest),
                    "--backbone", "synthetic",
                    "--out", str(ckpt),
                    "--epochs", "5",
                    "--seed", "123",
                ]
            )
            == 0
        )
        runs[run] = {
            "dir": out,
            "manifest": manifest,
            "ckpt": ckpt,
            "report": out / "head.report.json",
        }
    return runs


def test_criterion_6_end_to_end_desk_run(desk_run):
    run = desk_run["a"]
    manifest = load_manifest(run["manifest"], validate_files=True)
    non_tie = [r for r in manifest.records if r.y != 0.5]
    assert len(non_tie) >= 50

    report_doc = json.loads(run["report"].read_text())
    assert report_doc["epochs"][-1]["val_accuracy"] >= 0.95
    assert report_doc["epochs"][-1]["train_loss"] <= report_doc["epochs"][0]["train_loss"]

    # held-out comparison: trained metric vs the PSNR baseline
    cfg = TrainConfig(rng_seed=123)
    _, val_records = split_dataset(manifest, cfg)
    val_manifest_pairs = list(
        iter_eval_pairs(
            type(manifest)(
                sampler=manifest.sampler,
                voter_ids=manifest.voter_ids,
                records=val_records,
                root=manifest.root,
            )
        )
    )
    params, backbone_id = load_checkpoint(run["ckpt"])
    encoder = SyntheticEncoder()
    assert backbone_id == encoder.backbone_id
    learned = evaluate_metric(learned_metric(params, encoder), val_manifest_pairs)
    baseline = evaluate_metric(psnr_metric(), val_manifest_pairs)
    assert 0.2 <= baseline.accuracy <= 0.8  # near chance, by matching construction
    assert learned.accuracy > baseline.accuracy
    report(
        "[PASS] criterion 6: desk run "
        f"({len(non_tie)} non-tie pairs, val_acc={report_doc['epochs'][-1]['val_accuracy']:.3f}, "
        f"learned {learned.accuracy:.3f} > psnr {baseline.accuracy:.3f})"
    )


def test_criterion_7_determinism(desk_run):
    a, b = desk_run["a"], desk_run["b"]
    assert a["manifest"].read_bytes() == b["manifest"].read_bytes()
    assert a["ckpt"].read_bytes() == b["ckpt"].read_bytes()
    assert a["report"].read_bytes() == b["report"].read_bytes()
    stats_a = a["dir"] / "manifest.stats.json"
    stats_b = b["dir"] / "manifest.stats.json"
    assert stats_a.read_bytes() == stats_b.read_bytes()
    report("[PASS] criterion 7: repeated runs are byte-identical (manifest, checkpoint, report)")


ABLATIONS = {
    "global_only": ["--branch", "global"],
    "uniform_weights": ["--layer-weighting", "uniform"],
    "per_layer_weights": ["--layer-weighting", "per_layer"],
    "token_only": ["--branch", "token"],
    "hard_labels": ["--hard-labels"],
}


def test_criterion_8_ablations(desk_run):
    run = desk_run["a"]
    out_dir = run["dir"] / "ablations"
    out_dir.mkdir(exist_ok=True)
    checkpoints = {}
    for name, flags in ABLATIONS.items():
        ckpt = out_dir / f"{name}.json"
        code = cli_main(
            [
                "train-metric",
                "--manifest", str(run["manifest"]),
                "--backbone", "synthetic",
                "--out", str(ckpt),
                "--epochs", "5",
                "--seed", "123",
                *flags,
            ]
        )
        assert code == 0, f"ablation {name} failed to train"
        checkpoints[name] = ckpt.read_bytes()

    names = list(checkpoints)
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            assert checkpoints[names[i]] != checkpoints[names[j]], (
                f"{names[i]} and {names[j]} produced identical checkpoints"
            )

    # global-only must degenerate to the plain global-cosine baseline
    params, _ = load_checkpoint(out_dir / "global_only.json")
    assert params.branch == "global"
    encoder = SyntheticEncoder()
    a = encoder.extract(make_reference(91_000))
    b = encoder.extract(make_reference(91_001))
    breakdown = score(a, b, params)
    assert breakdown.score == breakdown.global_score  # exact, not approximate
    components = score_components(a, b, params)
    assert float(components["score"]) == float(components["global_score"])
    report("[PASS] criterion 8: five ablations train, checkpoints distinct, global-only exact")
