"""Machine-preference image quality.

Builds pairwise supervision from PSNR-matched distortion pairs voted on by
downstream vision models, trains a lightweight multi-layer feature
similarity metric from the soft labels, and evaluates or deploys the metric
as a differentiable distortion term for rate-distortion optimization.
"""

__version__ = "0.1.0"

from .backbones import (
    CachingEncoder,
    ClipVisionEncoder,
    FeatureBundle,
    LayerFeatures,
    SyntheticEncoder,
    get_backbone,
    preprocess,
)
from .dataset import (
    DatasetManifest,
    PairRecord,
    SamplerConfig,
    build_dataset,
    compute_stats,
    label_pair,
    load_manifest,
    sample_pairs,
    write_manifest,
)
from .distortions import (
    DistortionSpec,
    VariantSet,
    apply_distortion,
    generate_variants,
    load_image,
    load_library,
    psnr,
    save_image,
)
from .estimator import MachinePreferenceMetric
from .evaluation import (
    MachineDistortionLoss,
    MetricUnderTest,
    RateTaskCurve,
    bd_rate,
    evaluate_metric,
    krcc,
    ms_ssim,
    pairwise_accuracy,
    plcc,
    rate_distortion_loss,
    rd_distortion,
    srcc,
)
from .metric import (
    MetricParams,
    ScoreBreakdown,
    global_similarity,
    layer_similarity,
    layer_weights,
    load_checkpoint,
    save_checkpoint,
    score,
    token_score,
)
from .training import (
    TrainConfig,
    TrainReport,
    pair_logit,
    pairwise_bce,
    split_dataset,
    train,
)
from .voting import (
    VoteResult,
    VoterModel,
    aggregate_votes,
    cast_vote,
    classification_discrepancy,
    detection_discrepancy,
    segmentation_discrepancy,
)
