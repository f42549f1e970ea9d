"""Double-contrast semi-supervised learning at desk scale.

A small, fully deterministic training engine that couples supervised
cross-entropy with two InfoNCE-style contrast heads (per-sample features and
per-class assignment profiles), built on an in-package reverse-mode tape, plus
an exact enumeration oracle verifying the mutual-information lower bound that
justifies the contrastive objective.
"""

from .numerics import (
    ConfigError,
    DomainError,
    Rng,
    ShapeError,
    Tensor,
    l2_normalize_rows,
    matmul,
    row_softmax,
)
from .autodiff import GradCheckReport, Tape, backward, finite_diff_grad, grad_check
from .losses import (
    LossBreakdown,
    cross_entropy_loss,
    feature_contrast_loss,
    semantic_contrast_loss,
    total_loss,
)
from .mibound import (
    BoundReport,
    DiscreteJoint,
    EnumerationSizeError,
    critic_value,
    exact_infonce,
    mutual_information,
    sweep_bound,
    verify_bound,
)
from .model import (
    CheckpointError,
    ModelDims,
    ModelParams,
    classify,
    encode,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .augment import AugmentPolicy, gaussian_blur, make_view_pair, rotate90
from .data import (
    Batch,
    CifarFormatError,
    Dataset,
    SemiSplit,
    batch_iter,
    load_cifar10,
    split_semi,
    synth_blobs,
)
from .trainer import (
    MetricsRow,
    SgdState,
    TrainConfig,
    evaluate,
    export_features,
    fit,
    lr_at,
    sgd_step,
    train_step,
)

__version__ = "0.1.0"
