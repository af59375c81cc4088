"""Multi-scale adaptive denoising network on a small numpy autodiff engine."""

from .blocks import AFeB, AFuB, AMB, ConfigError, ResidualBlock
from .data import SyntheticDataset, add_awgn, load_image, sample_patch_batch, save_image
from .gradcheck import grad_check
from .metrics import MetricReport, evaluate, psnr, ssim
from .model import VARIANTS, MSANet, ModelConfig, build, count_params
from .tensor import ContractError, ShapeError, Tensor, backward, no_grad, set_deterministic
from .train import (
    OptimState,
    TrainSchedule,
    adam_step,
    cosine_lr,
    fit,
    load_checkpoint,
    loss_lp,
    save_checkpoint,
)

__version__ = "0.1.0"


def __getattr__(name):
    # scikit-learn is only imported when the estimator wrapper is used
    if name in ("MSANetDenoiser", "check_images"):
        from . import estimator

        return getattr(estimator, name)
    raise AttributeError(f"module 'msanet' has no attribute {name!r}")
