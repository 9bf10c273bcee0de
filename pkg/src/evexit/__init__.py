"""Uncertainty-aware, resource-aware multi-event detection.

Evidential (Beta/Dirichlet) heads on a shared cascade backbone with
uncertainty-thresholded early exits, plus architecture search, stage-wise
cascade training, int8 post-training quantization, MAC/memory cost models,
calibration metrics and point-prediction baselines.
"""

__version__ = "0.1.0"
