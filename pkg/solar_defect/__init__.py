from .__version__ import __version__
from .enums import Partition, ScheduleMode, Reduction, CurveMode
from .errors import DatasetError, ProtocolViolation, NonFiniteLossError, BackboneUnavailableError, ConfigurationError
from .data_pipeline import (
    SampleRecord,
    DatasetManifest,
    SplitSpec,
    DatasetSplits,
    LeakageReport,
    load_manifest,
    stratified_split,
    balance_by_oversampling,
    verify_no_leakage,
    write_manifest,
    read_manifest,
)
from .augmentation import (
    AugmentationPolicy,
    AugmentationParams,
    PreprocessSpec,
    RecordDataset,
    load_image,
    sample_augmentation,
    apply_augmentation,
    augment,
    preprocess,
)
from .cbam import (
    CBAM,
    ChannelAttention,
    SpatialAttention,
    ChannelAttentionParams,
    SpatialAttentionParams,
    channel_attention,
    spatial_attention,
    cbam_forward,
)
from .model_zoo import (
    Backbone,
    BackboneSpec,
    ModelSpec,
    ClassifierModel,
    build_model,
    build_custom_cnn,
    count_parameters,
    serialized_size_bytes,
)
from .checkpoint import ModelCheckpoint
from .optimization import (
    FocalLossSpec,
    Loss,
    LossConfig,
    ScheduleSpec,
    OptimizerConfig,
    focal_loss,
    cross_entropy,
    lr_at,
    make_criterion,
    build_optimizer,
    set_learning_rate,
)
from .training import (
    TrainConfig,
    Metrics,
    TrainHistory,
    CVResult,
    AblationFactor,
    AblationTable,
    set_determinism,
    compute_metrics,
    training_records,
    predict,
    train,
    evaluate,
    stratified_folds,
    fold_splits,
    kfold_cv,
    run_ablation,
    flatten_config,
    config_diff,
)
from .evaluation import (
    ConfusionMatrix,
    CurveSet,
    EvalReport,
    ComparisonRow,
    PUBLISHED_REFERENCE_ROWS,
    confusion,
    roc_pr_auc,
    mann_whitney_auc,
    most_confused_pairs,
    write_curves_csv,
    emit_comparison_report,
)
from .explainability import (
    Heatmap,
    find_layer,
    grad_cam,
    overlay,
    save_overlay_png,
    save_heatmap_csv,
    quadrant_mask,
    heatmap_mass_inside,
    render_gallery,
)
from .benchmark import BenchmarkResult, TimedRun, exclusive_device, measure_fps, measure_size, time_training
from .synthetic import SynthSpec, class_layout, generate_corpus, load_mask
from .config import RunConfig
