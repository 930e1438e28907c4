"""Spatial-spectral fusion of low-resolution hyperspectral and high-resolution
multispectral imagery, built on a small self-contained autodiff core.

Subpackages
-----------
autodiff   tensors + reverse-mode differentiation (NCHW image layout)
hsi        synthetic scenes, the degradation simulator, noise, augmentation
hsc        the HSC1 cube file format
model      the fusion network (multi-branch extractor + gated cross-attention)
training   loss, Adam, cosine schedule, the training loop
metrics    PSNR / SAM / RMSE / ERGAS and the noise robustness benchmark
analysis   channel energy distribution and CKA representation similarity
cli        the ``s3rnet`` command line front end
"""

from .autodiff import Tensor, backward, no_grad
from .hsi import DegradationConfig, HsiCube, SyntheticSceneSpec
from .model import ModelConfig, S3RNet

__all__ = [
    "Tensor",
    "backward",
    "no_grad",
    "HsiCube",
    "DegradationConfig",
    "SyntheticSceneSpec",
    "ModelConfig",
    "S3RNet",
]

__version__ = "0.1.0"
