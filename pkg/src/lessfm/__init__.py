"""Coherent single-span fiber transmission simulation and learned
split-step digital backpropagation (L-ESSFM equalizer family)."""

__version__ = "0.1.0"

from .dsp import SampleBlock, OlsGeometry, make_freq_grid, overlap_save_apply
from .fiber import FiberSpec, PropagationConfig, beta2_from_dispersion, propagate
from .equalizer import LEssfmModel, ComplexityModel, lessfm_forward, edc, count_rm_per_2d

__all__ = [
    "SampleBlock",
    "OlsGeometry",
    "make_freq_grid",
    "overlap_save_apply",
    "FiberSpec",
    "PropagationConfig",
    "beta2_from_dispersion",
    "propagate",
    "LEssfmModel",
    "ComplexityModel",
    "lessfm_forward",
    "edc",
    "count_rm_per_2d",
]
