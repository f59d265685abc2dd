"""PCA-distilled encoders and decoders for photorealistic style transfer.

The toolkit covers the full workflow: explained-variance analysis of a
teacher's features, image-independent eigenbasis fitting, blockwise
encoder/decoder distillation, coarse-to-fine ZCA stylization with
high-frequency residuals, and quantitative evaluation.
"""

from .eigenbasis import (
    Eigenbasis,
    global_eigenbasis_sgd,
    local_eigenbasis,
    random_orthonormal,
    reconstruction_loss,
    trace_objective,
)
from .errors import (
    ContainerError,
    ConvergenceError,
    ImageReadError,
    MissingBlockError,
    NumericalError,
    PcakdError,
    ShapeError,
    TrainingDivergence,
)
from .eval_nst import (
    NstConfig,
    NstResult,
    content_loss,
    evaluate_pair,
    feature_stat,
    nst_optimize,
    ssim,
    style_loss,
)
from .feature_stats import (
    FeatureMap,
    FeatureStats,
    VarianceProfile,
    centralize,
    channel_mean,
    covariance,
    gram,
    profiles_from_table,
    profiles_to_table,
    scatter,
    select_channel_lengths,
    variance_profile,
)
from .nets import (
    Model,
    NetworkSpec,
    TapFeatures,
    TrainConfig,
    Weights,
    autoencode,
    bench_autoencoder,
    bench_forward,
    build_vgg_shaped_spec,
    forward_collect,
    init_model,
    init_weights,
    spec_param_count,
    train_autoencoder,
    train_block_pair,
)
from .stylize import (
    StylizeConfig,
    capture_hfr,
    coloring_matrix,
    reconstruct,
    stylize,
    whitening_matrix,
    zca_transform,
)
from .tensor_math import SymEigResult, sym_eig

__version__ = "0.1.0"

__all__ = [
    "ContainerError",
    "ConvergenceError",
    "Eigenbasis",
    "FeatureMap",
    "FeatureStats",
    "ImageReadError",
    "MissingBlockError",
    "Model",
    "NetworkSpec",
    "NstConfig",
    "NstResult",
    "NumericalError",
    "PcakdError",
    "ShapeError",
    "StylizeConfig",
    "SymEigResult",
    "TapFeatures",
    "TrainConfig",
    "TrainingDivergence",
    "VarianceProfile",
    "Weights",
    "autoencode",
    "bench_autoencoder",
    "bench_forward",
    "build_vgg_shaped_spec",
    "capture_hfr",
    "centralize",
    "channel_mean",
    "coloring_matrix",
    "content_loss",
    "covariance",
    "evaluate_pair",
    "feature_stat",
    "forward_collect",
    "global_eigenbasis_sgd",
    "gram",
    "init_model",
    "init_weights",
    "local_eigenbasis",
    "nst_optimize",
    "profiles_from_table",
    "profiles_to_table",
    "random_orthonormal",
    "reconstruct",
    "reconstruction_loss",
    "scatter",
    "select_channel_lengths",
    "spec_param_count",
    "ssim",
    "style_loss",
    "stylize",
    "sym_eig",
    "trace_objective",
    "train_autoencoder",
    "train_block_pair",
    "variance_profile",
    "whitening_matrix",
    "zca_transform",
]
