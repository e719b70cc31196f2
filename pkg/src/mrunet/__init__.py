"""MultiResUNet and U-Net segmentation models on a minimal NumPy autodiff core."""

from .blocks import BlockWidths, compute_block_widths
from .data import Dataset, Sample, kfold_split, load_dataset, load_sample, resize, synth_generate
from .metrics import binarize, jaccard
from .model import (
    ModelGraph,
    ParamReport,
    build_multiresunet,
    build_unet_baseline,
    count_parameters,
    forward,
    load_checkpoint,
    save_checkpoint,
    summarize,
)
from .ops import BatchNormParams, ConvParams, batchnorm, conv2d, conv_transpose2d, maxpool2d, relu, sigmoid
from .tensor import (
    NumericError,
    Node,
    ShapeError,
    Tensor,
    backward,
    concat_channels,
    elementwise,
    read_tnsr,
    tensor_full,
    write_tnsr,
)
from .train import AdamState, RunReport, TrainConfig, adam_step, batch_loss, bce_image, train

__version__ = "0.1.0"
