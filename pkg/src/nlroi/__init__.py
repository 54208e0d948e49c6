"""Inter-RoI attention block: exact kernels, gradients, and a training harness.

The top-level namespace re-exports the core surface: the block and its
kernels, the gradient machinery, persistence, the toy task, and the
benchmark. The sklearn adapters stay behind ``nlroi.estimator`` so that
importing the package never pulls in scikit-learn.
"""

from .autodiff import (
    Gradients,
    Tape,
    backward,
    finite_diff_grad,
    forward_traced,
    grad_check,
)
from .bench import fit_slope, run_bench
from .blobio import FormatError, load_blob, load_params, save_blob, save_params
from .block import (
    NlRoiOutput,
    NlRoiParams,
    attention_mix,
    correlation,
    default_dims,
    forward_many,
    g_transform,
    init_params,
    nlroi_forward,
)
from .ops import (
    concat_channels,
    conv1x1,
    conv3x3,
    flatten_rois,
    global_avg_pool,
    matmul,
    relu,
    row_softmax,
    tile_spatial,
)
from .selftest import run_selftest
from .toytask import (
    Head,
    Scene,
    TrainConfig,
    TrainResult,
    analytic_positive_rate,
    bce_with_logits,
    constant_prediction_rate,
    evaluate,
    gen_scene,
    init_head,
    sgd_step,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "NlRoiOutput",
    "NlRoiParams",
    "attention_mix",
    "correlation",
    "default_dims",
    "forward_many",
    "g_transform",
    "init_params",
    "nlroi_forward",
    "concat_channels",
    "conv1x1",
    "conv3x3",
    "flatten_rois",
    "global_avg_pool",
    "matmul",
    "relu",
    "row_softmax",
    "tile_spatial",
    "Gradients",
    "Tape",
    "backward",
    "finite_diff_grad",
    "forward_traced",
    "grad_check",
    "FormatError",
    "load_blob",
    "load_params",
    "save_blob",
    "save_params",
    "Head",
    "Scene",
    "TrainConfig",
    "TrainResult",
    "analytic_positive_rate",
    "bce_with_logits",
    "constant_prediction_rate",
    "evaluate",
    "gen_scene",
    "init_head",
    "sgd_step",
    "train",
    "fit_slope",
    "run_bench",
    "run_selftest",
    "__version__",
]
