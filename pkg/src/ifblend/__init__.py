"""Ambient lighting normalization toolkit.

Encoder-decoder restoration model fusing image-domain and wavelet-domain
frequency bands, plus its training loop, evaluation metrics, dataset
readers, and a synthetic paired-data generator.
"""

__version__ = "0.1.0"

from .freqkernels import FrequencyBands, haar_dwt, haar_idwt, lowhigh_split, srgb_to_lab
from .model import IFBlend, ModelConfig, load_checkpoint, save_checkpoint

__all__ = [
    "FrequencyBands",
    "IFBlend",
    "ModelConfig",
    "haar_dwt",
    "haar_idwt",
    "load_checkpoint",
    "lowhigh_split",
    "save_checkpoint",
    "srgb_to_lab",
    "__version__",
]
