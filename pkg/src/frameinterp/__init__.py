"""Frame interpolation with convolutional networks, flow priors and adversarial training.

Everything runs on a small reverse-mode autodiff engine over numpy.
"""

from .data import (
    FrameTriplet,
    Shape,
    SynthSpec,
    extract_triplets,
    load_image,
    make_synthetic_set,
    random_crop,
    read_manifest,
    save_image,
    split_dataset,
    synth_sequence,
    write_manifest,
)
from .flow import (
    FlowField,
    average_frames,
    bilinear_sample,
    read_flo,
    warp_backward,
    warp_middle,
    write_flo,
)
from .layers import ConvParams, DclParams, conv2d, conv_transpose2d, dcl, dense, maxpool2d
from .metrics import EvalReport, evaluate, format_report, mse_metric, psnr, ssim
from .networks import (
    DiscriminatorConfig,
    FlowPredictorConfig,
    GeneratorConfig,
    NetworkSpec,
    ParamStore,
    build_discriminator,
    build_flow_predictor,
    build_generator,
    build_generator_with_flow_prior,
    checkpoint_load,
    checkpoint_save,
    forward,
)
from .state import TrainState
from .tensor import NonFiniteError, Tape, Tensor, backward, finite_checks, precision
from .training import (
    LossReport,
    TrainConfig,
    alpha_schedule,
    discriminator_loss,
    generator_loss,
    mse_loss,
    predict,
    sgd_adam_update,
    train,
    train_adversarial,
    train_joint_implicit_flow,
    train_mse,
)

__version__ = "0.1.0"
