"""Score-distillation image editing engine.

Optimizes the latent code of a source image toward a target prompt using
noise-prediction differences from a denoiser backend, with attention-derived
spatial masking, gradient filtering, and annealed normalization.
"""

__version__ = "0.1.0"

from scoredit.core import EngineConfig, GridTensor, LossMode, NoiseSchedule, RngStream

__all__ = [
    "EngineConfig",
    "GridTensor",
    "LossMode",
    "NoiseSchedule",
    "RngStream",
    "__version__",
]
