"""Progressive multi-scale attention autoencoder for multi-temporal cloud
removal, built on a self-contained rank-4 autodiff engine."""

from pmaa.tensor import Tensor, backward, finite_diff_check, no_grad

__all__ = ["Tensor", "backward", "finite_diff_check", "no_grad"]
__version__ = "0.1.0"
