"""Multi-task no-reference image quality assessment.

Joint distortion-type classification and quality-score regression on image
patches, with cross-layer feature fusion, a synthetic distortion lab, the
patch/split training protocol, rank-correlation evaluation, and an ablation
harness.
"""

from .model import (
    BackboneConfig,
    ConfigError,
    FeatureTaps,
    ForwardOutput,
    ModelConfig,
    MultiTaskIQANet,
    build_model,
    full_backbone,
    gap,
    instance_normalize,
    parameter_census,
    predict_patch,
    predict_patches,
    tiny_backbone,
    total_parameter_count,
)
from .checkpoint import (
    CheckpointError,
    import_backbone_weights,
    load_model,
    read_checkpoint,
    save_checkpoint,
)
from .distortions import (
    DistortionError,
    PARAMETER_TABLES,
    apply_distortion,
    severity_to_score,
)
from .dataset import (
    DatasetError,
    DatasetManifest,
    ImageRecord,
    build_dataset,
    load_image,
    make_corpus,
    read_manifest,
    save_image,
    write_manifest,
)
from .patches import (
    PatchError,
    PatchRecord,
    SplitSpec,
    extract_patches,
    hflip_augment,
    iterate_training,
    manifest_patches,
    patch_count,
    record_patches,
    split_by_reference,
)
from .training import (
    Adam,
    DivergenceError,
    MomentumSGD,
    TrainConfig,
    TrainState,
    cross_entropy,
    l2_loss,
    load_train_state,
    lr_at,
    save_train_checkpoint,
    total_loss,
    train,
)
from .metrics import (
    LogisticParams,
    MetricError,
    fit_logistic,
    logistic_fn,
    pcc,
    srocc,
)
from .evaluation import (
    EvalReport,
    ImagePrediction,
    aggregate_image,
    cross_dataset_eval,
    evaluate,
    predict_image,
    predict_manifest,
    report_from_predictions,
    run_repeated_splits,
)
from .experiments import AblationRow, RowResult, default_matrix, run_ablation

__version__ = "0.1.0"
