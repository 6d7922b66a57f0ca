"""Multi-hypothesis time-series forecasting checked against optimal quantizers."""

from .estimator import MCLForecaster
from .oracles import Codebook, LloydQuantizer, gaussian_quantizer_1d, kl_eigen, lloyd_trajectories, product_codebook
from .processes import ProcessSpec, Trajectory, WindowPair

__version__ = "0.1.0"

__all__ = [
    "Codebook",
    "LloydQuantizer",
    "MCLForecaster",
    "ProcessSpec",
    "Trajectory",
    "WindowPair",
    "gaussian_quantizer_1d",
    "kl_eigen",
    "lloyd_trajectories",
    "product_codebook",
]
