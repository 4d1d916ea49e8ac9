"""Two-parallel-stream structure-guided image inpainting."""

from .blocks import (
    AdaptiveFusionBlock,
    ChannelAttention,
    ConcatFusion,
    GatedUnit,
    ResidualDilatedBlock,
    SpatialAttention,
)
from .data import (
    MASK_BINS,
    ImageSample,
    InpaintingDataset,
    build_pyramid,
    generate_irregular_mask,
    load_image,
    load_mask,
    save_image,
    save_mask,
    structure_label,
    synthesize_scene,
)
from .errors import (
    CheckpointError,
    ConfigurationError,
    InputError,
    MaskGenerationError,
    TrainingError,
)
from .losses import (
    LossReport,
    LossWeights,
    RandomFeaturePyramid,
    VGG16Features,
    discriminator_loss,
    generator_adversarial_loss,
    gram_matrix,
    perceptual_loss,
    pyramid_loss,
    style_loss,
    total_generator_loss,
)
from .metrics import (
    EvalReport,
    evaluate,
    fid_from_features,
    frechet_distance,
    l1_percent,
    psnr,
    ssim,
)
from .network import (
    ForwardResult,
    NetworkConfig,
    PatchDiscriminator,
    TwoStreamGenerator,
    build_discriminator,
    build_generator,
)
from .serialization import load_tensors, save_tensors
from .training import (
    TrainConfig,
    TrainState,
    init_state,
    load_checkpoint,
    load_generator,
    save_checkpoint,
    train_loop,
    train_step,
)

__version__ = "0.1.0"

__all__ = [
    "AdaptiveFusionBlock", "ChannelAttention", "ConcatFusion", "GatedUnit",
    "ResidualDilatedBlock", "SpatialAttention",
    "MASK_BINS", "ImageSample", "InpaintingDataset", "build_pyramid",
    "generate_irregular_mask", "load_image", "load_mask", "save_image",
    "save_mask", "structure_label", "synthesize_scene",
    "CheckpointError", "ConfigurationError", "InputError",
    "MaskGenerationError", "TrainingError",
    "LossReport", "LossWeights", "RandomFeaturePyramid", "VGG16Features",
    "discriminator_loss", "generator_adversarial_loss", "gram_matrix",
    "perceptual_loss", "pyramid_loss", "style_loss", "total_generator_loss",
    "EvalReport", "evaluate", "fid_from_features", "frechet_distance",
    "l1_percent", "psnr", "ssim",
    "ForwardResult", "NetworkConfig", "PatchDiscriminator",
    "TwoStreamGenerator", "build_discriminator", "build_generator",
    "load_tensors", "save_tensors",
    "TrainConfig", "TrainState", "init_state", "load_checkpoint",
    "load_generator", "save_checkpoint", "train_loop", "train_step",
    "__version__",
]
