"""Interactive feature fusion network with a minimal reverse-mode tensor engine."""

from .tensor import (
    BatchNormState,
    OpTrace,
    Tensor,
    add,
    affine_combine,
    backward,
    batch_norm,
    concat_channels,
    conv2d,
    ewise,
    finite_diff_check,
    matmul,
    mean,
    mse,
    mul,
    prelu,
    reshape,
    reshape_axis,
    reshape_axis_inv,
    scale,
    sigmoid,
    softmax_rows,
    sub,
    tsum,
)
from .iffio import export_csv, load_tensor, save_tensor, write_pgm
from .features import FbankConfig, compute_fbank, mel_center_freqs, mel_filterbank, read_waveform
from .simulate import (
    FeatureTriple,
    SimConfig,
    gen_dataset,
    gen_triple,
    gen_triples,
    load_dataset,
    oracle_mse,
)
from .model import (
    IffArchConfig,
    IffNetParams,
    desk_arch,
    dn_conv,
    iffnet_forward,
    init_params,
    interaction,
    load_checkpoint,
    merge,
    param_count,
    ra_block,
    residual_block,
    save_checkpoint,
    separable_self_attention,
    up_conv,
)
from .training import (
    OptimizerState,
    TrainConfig,
    TrainResult,
    TrainingDiverged,
    adam_step,
    evaluate,
    init_optimizer,
    lr_schedule,
    multitask_loss,
    train,
    train_run,
)

__version__ = "0.1.0"
