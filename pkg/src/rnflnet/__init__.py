"""Predict SDOCT average RNFL thickness from optic disc photographs.

A small, dependency-light stack: a float64 autodiff engine sized for
residual CNNs, the network itself, Adam with cosine-annealed warm
restarts and an LR range test, manifest-driven data handling with
patient-level splits, a synthetic phantom cohort generator, Grad-CAM
heatmaps, and the full clustered-bootstrap evaluation statistics.
"""

__version__ = "0.1.0"
