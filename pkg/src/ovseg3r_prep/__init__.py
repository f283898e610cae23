"""ovseg3r-prep - deterministic data preparation for open-vocabulary 3D
instance segmentation from multi-view reconstructions."""

__version__ = "0.1.0"
