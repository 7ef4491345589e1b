"""Dynamic high-frequency convolution (DHiF) for small-target detection, in numpy.

The operator generates a k^2 x k^2 filter bank at every output location from
the normalised, channel-collapsed input, filters the local input patch with
it, and convolves patch plus filtered patch with ordinary weights.  With a
zero projection it is exactly a standard convolution.
"""
from .errors import ContractError, DivergedError, DumpParseError, GenerationError
from .layer import (
    DhifParams,
    FilterBank,
    apply_filter_bank,
    dhif_backward,
    dhif_forward,
    dump_filter_bank,
    generate_filter_bank,
    load_filter_bank,
    param_count,
)
from .metrics import MetricsReport, connected_components, evaluate, threshold
from .net import MiniDetector, NetConfig, ResBlock, adam_step, detector_forward
from .nn import BnParams, ConvParams, collapse_normalize, conv2d_backward, conv2d_forward, soft_iou_loss
from .synth import SceneSpec, add_salt_pepper, generate_dataset, generate_scene
from .tensor import SeededRng, extract_patch, im2col, col2im, output_extent
from .train import TrainConfig, TrainingReport, train

__version__ = "0.1.0"
