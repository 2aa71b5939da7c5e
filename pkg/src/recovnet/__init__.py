"""Two-phase chest X-ray screening pipeline.

Phase I trains a skip-free lung-segmentation autoencoder; phase II
transplants its encoder into a two-class classifier and fine-tunes it end
to end. The package also ships the dataset preparation pipeline, the
metric suite, activation-map extraction, and a CLI covering the full
workflow.
"""

from .augment import augment_to_target, build_training_set, plan_augmentation
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (
    CheckpointError,
    ConfigError,
    ImageIOError,
    ManifestError,
    RecovnetError,
    UndefinedMetricError,
)
from .explain import ActivationMap, gradcam, overlay
from .imaging import AugmentationSpec, augment_image, load_image, load_mask, resize_image
from .losses import (
    binary_focal_loss,
    categorical_cross_entropy,
    dice_loss,
    hybrid_segmentation_loss,
)
from .manifest import (
    DatasetManifest,
    SampleRecord,
    SplitSpec,
    load_manifest,
    save_manifest,
    stratified_split,
)
from .metrics import (
    ConfusionMatrix,
    MetricsReport,
    accuracy,
    confusion_matrix,
    f_score,
    full_report,
    pixel_confusion,
    precision,
    sensitivity,
    specificity,
)
from .networks import (
    CLASS_ORDER,
    Classifier,
    DecoderSpec,
    EncoderSpec,
    SegNetwork,
    binarize_mask,
    build_classifier,
    build_decoder,
    build_encoder,
    build_segmentation_network,
    classify,
    detach_encoder,
    predict_label,
    register_encoder,
    seg_forward,
)
from .training import (
    PHASE_I_DEFAULTS,
    PHASE_II_DEFAULTS,
    TrainConfig,
    TrainHistory,
    train_classifier,
    train_segmentation,
)

__version__ = "0.1.0"
