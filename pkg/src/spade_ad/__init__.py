"""Spatially-weighted anomaly detection: a VAE's per-pixel reconstruction error
weighted by a normalized dual-branch Grad-CAM region of interest, plus the
plain-VAE, classifier-likelihood, and unnormalized-ROI baselines, a seeded
noisy-digit benchmark generator, and an AUROC evaluation harness."""

from .dataset import (
    ClassRole,
    DatasetSplit,
    ImageSample,
    NoiseConfig,
    SourceCorpus,
    SplitSpec,
    build_splits,
    generate_noisy_sample,
    load_corpus,
    load_source_corpus,
    save_corpus,
)
from .detector import (
    DetectorConfig,
    ModelSet,
    ScoreRecord,
    classify,
    cnn_score,
    naive_spade_score,
    score_corpus,
    spade_score,
    vae_score,
)
from .evaluation import (
    ExperimentConfig,
    ExperimentReport,
    RocResult,
    export_report,
    roc_auc,
    run_table1_experiment,
)
from .models import (
    CheckpointError,
    CnnConfig,
    CnnModel,
    TrainConfig,
    VaeConfig,
    VaeModel,
    cnn_loss,
    forward_with_features,
    load_checkpoint,
    reconstruct,
    save_checkpoint,
    train_cnn,
    train_vae,
    vae_loss,
)
from .saliency import SaliencyMap, compute_alpha, naive_roi, render_overlay, roi_map, spade_roi

__version__ = "0.1.0"
