"""Anomalous-stain detection on tissue slides.

A reconstruction autoencoder is trained on healthy tissue patches only; at
inference, staining the model cannot reproduce is revealed by comparing
brown-hue pixel counts between a patch and its reconstruction.  Thresholds
at patch and slide level are calibrated from ROC curves, and slide-level
diagnosis aggregates the per-patch decisions along the tissue border.
"""

from .ae import (
    Autoencoder,
    GradCheckReport,
    TrainConfig,
    TrainingLog,
    build_autoencoder,
    check_operator,
    gradient_check,
    load_model,
    reconstruct,
    save_model,
    train_autoencoder,
)
from .calibration import (
    ConfusionMatrix,
    FoldResult,
    FoldSummary,
    MetricsReport,
    PatientRecord,
    RocCurve,
    average_roc,
    confusion_and_metrics,
    crossval,
    hanley_mcneil_variance,
    metrics_from_confusion,
    optimal_cutpoint,
    roc_curve,
    roc_sample_size,
    slide_probability_from_scores,
    stratified_kfold,
)
from .colornorm import (
    ChannelStats,
    channel_stats,
    histogram_match,
    hsv_brightness_correction,
    mvgd_map,
    mvgd_transfer,
    mvgd_transform_float,
    normalize_staining,
)
from .config import RunConfig, load_config
from .detector import (
    BROWN_BAND,
    BrownBand,
    PatchScore,
    SlideScore,
    Thresholds,
    baseline_red_fraction,
    brown_count,
    classify_patch,
    f_brown,
    score_patches,
    score_slide,
    slide_probability,
)
from .errors import (
    ConfigError,
    CorruptModelError,
    DataError,
    DegenerateFoldError,
    DegenerateLabelsError,
    EmptyBorderError,
    EmptySlideError,
    InvalidInputError,
    ManifestError,
    NumericError,
    PlacementError,
    StainscopeError,
    StratificationError,
)
from .imaging import (
    PATCH_SIZE,
    Patch,
    count_hue_band,
    extract_border_patches,
    grayscale,
    hsv_to_rgb,
    load_image,
    morphological_gradient,
    otsu_threshold,
    random_border_crops,
    rgb_to_hsv,
    save_image,
    tissue_mask,
)
from .manifest import Manifest, PatchRecord, SlideRecord, load_manifest
from .synth import (
    SlideTruth,
    SynthSpec,
    gen_dataset,
    gen_healthy_patch,
    gen_infected_patch,
    gen_synthetic_slide,
)

__version__ = "0.1.0"
