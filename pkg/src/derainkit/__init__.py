"""Single-image rain removal: synthetic data generation, a two-branch
decomposition network with adversarial fine-tuning, and evaluation tools."""

from .datastore import Batch, DatasetKind, Entry, Manifest, build_manifest, \
    sample_batch, sample_pool, write_triplets
from .errors import DerainError
from .images import load_image, save_image
from .metrics import EvalReport, TimingRecord, bench_inference, \
    evaluate_corpus, psnr, ssim
from .network import DerainModel, NetworkConfig, init_weights, load_model, \
    save_model
from .objectives import AdversarialVariant, LossValue, Reduction, Stage, \
    StageObjective, loss_adversarial_d, loss_adversarial_g, loss_background, \
    loss_rain, loss_reconstruction, stage_total
from .rainsynth import BlendMode, RainParamRanges, RainParams, Triplet, \
    blend, generate_rain_layer, synthesize_dataset
from .trainer import Checkpoint, TrainConfig, finetune, load_checkpoint, \
    pretrain, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "AdversarialVariant", "Batch", "BlendMode", "Checkpoint", "DatasetKind",
    "DerainError", "DerainModel", "Entry", "EvalReport", "LossValue",
    "Manifest", "NetworkConfig", "RainParamRanges", "RainParams", "Reduction",
    "Stage", "StageObjective", "TimingRecord", "TrainConfig", "Triplet",
    "bench_inference", "blend", "build_manifest", "evaluate_corpus",
    "finetune", "generate_rain_layer", "init_weights", "load_checkpoint",
    "load_image", "load_model", "loss_adversarial_d", "loss_adversarial_g",
    "loss_background", "loss_rain", "loss_reconstruction", "pretrain", "psnr",
    "sample_batch", "sample_pool", "save_checkpoint", "save_image",
    "save_model", "ssim", "stage_total", "synthesize_dataset",
    "write_triplets",
]
