"""Cross-domain few-shot segmentation engine with a spectral ODE feature transform."""

__version__ = "0.1.0"
