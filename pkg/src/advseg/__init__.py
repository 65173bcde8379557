"""Segmentation networks (fully convolutional and dilated), an
image-conditioned discriminator and adversarial training, on a small
numpy autodiff engine."""
from .nets import Network, NetworkSpec, build, param_count, receptive_field
from .training import TrainingConfig

__all__ = ["Network", "NetworkSpec", "TrainingConfig", "build", "param_count", "receptive_field"]
__version__ = "0.1.0"
