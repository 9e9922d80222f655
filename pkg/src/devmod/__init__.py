"""Deterministic NCHW tensor kernel and experiment harness for studying how
feature normalization reshapes residual-feature deviation in image
super-resolution networks, and how multiplicative deviation modulation
restores it."""

from .tensor import (
    Tensor,
    Rng,
    no_grad,
    rand_normal,
    add,
    sub,
    mul,
    scalar_mul,
    div,
    exp,
    log,
    sqrt,
    absolute,
    relu,
    sum_all,
    mean_over,
    std_over,
    conv2d,
    pixel_shuffle,
    pixel_unshuffle,
    reshape,
    concat_channels,
    detach,
    modulation_factor,
    backward,
    save_t4d,
    load_t4d,
)
from .gradcheck import finite_diff_check, GradCheckReport
from .layers import Norm, AdaDM, Conv2d, make_conv_layer, normalize, adadm
from .blocks import (
    BLOCK_KINDS,
    BlockConfig,
    build_block,
    block_forward,
    verify_da_identity,
    interior_std,
)
from .models import (
    ModelConfig,
    Model,
    build_model,
    model_forward,
    collect_internal,
    desk_model_config,
    toy_model_config,
)

__version__ = "0.1.0"
