"""Foggy scene understanding at desk scale: unpaired fog<->clear translation
with cycle consistency, a low-parameter dual-encoder network for joint
semantic segmentation and monocular depth, adversarial output adaptation
between weather domains, and the staged training/evaluation pipeline --
runnable end to end on procedurally generated synthetic scenes.
"""

from .data import (
    DEPTH_MAX,
    DEPTH_MIN,
    IGNORE_LABEL,
    DatasetManifest,
    Domain,
    FogParams,
    SceneSample,
    Split,
    augment,
    build_synthetic_dataset,
    generate_scene,
    load_cityscapes_layout,
    load_manifest,
    load_sample,
    split_refined,
    synthesize_fog,
    to_luminance,
)
from .blocks import (
    DenseBlock,
    Downsampler,
    NonBottleneck1d,
    PatchDiscriminator,
    Transition,
    UpsamplerStage,
    count_parameters,
    fuse,
)
from .models import (
    LdMode,
    NetworkOutput,
    SegDepthConfig,
    SegDepthNet,
    TranslationConfig,
    TranslationGenerator,
    TranslationPair,
    build_ld_encoder,
    build_rgb_encoder,
    build_translation_generator,
    forward_segdepth,
    translate,
)
from .losses import (
    AdvRole,
    LossBreakdown,
    UncertaintyWeights,
    adversarial_loss,
    combined_loss,
    cycle_consistency_loss,
    depth_loss,
    domain_adaptation_loss,
    joint_depth_loss,
    joint_seg_loss,
    segmentation_loss,
)
from .metrics import (
    ConfusionMatrix,
    DepthAccumulator,
    EvalReport,
    depth_metrics,
    evaluate,
    segmentation_metrics,
)
from .train import (
    InferenceEngine,
    PipelineState,
    Stage,
    TrainConfig,
    TrainLog,
    finetune,
    infer,
    train_depth,
    train_domain_adaptation,
    train_segmentation,
    translation_mae,
)
from .config import RunConfig
from .pipeline import PipelineResult, run_pipeline
from .errors import (
    ConfigurationError,
    ContractError,
    DatasetError,
    FoggySceneError,
    FormatError,
    MetricsError,
    PipelineError,
)

__version__ = "0.1.0"
