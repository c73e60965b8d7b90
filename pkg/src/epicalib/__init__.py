"""Calibration toolkit for a six-parameter metropolitan epidemic simulator.

Pipeline: deterministic simulator oracle -> Latin-hypercube ensembles ->
PCA curve compression -> neural surrogate -> posterior estimation
(naive filtering / regularized gradient descent / cross-region global
consistency) -> benchmark reports.
"""

__version__ = "0.1.0"
