"""Single-image dehazing with a continuous density mask and a frequency-domain U-Net bottleneck."""

from .density import concat_cdm, dark_channel, ddp
from .network import Falcon, FalconConfig, FfcbConfig, load_weights, save_weights
from .tensor import Tensor, no_grad

__all__ = [
    "Falcon",
    "FalconConfig",
    "FfcbConfig",
    "Tensor",
    "concat_cdm",
    "dark_channel",
    "ddp",
    "load_weights",
    "no_grad",
    "save_weights",
]
