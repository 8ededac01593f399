"""Interior sound-source localization from exterior accelerometer spectra.

A physics surrogate manufactures simulation-like ("source") and
pseudo-real ("target") spectral datasets with controllable domain shift;
an auxiliary-classifier CycleGAN is trained on unpaired data from both so
its target discriminator localizes the source octant from observations
alone. Analysis tools (t-SNE, Grad-CAM, transformation-error KDE) expose
what the discriminator relies on.
"""

from . import analysis, cli, data, models, surrogate, training
from .errors import ConfigError, NumericalError

__version__ = "0.1.0"

__all__ = [
    "analysis",
    "cli",
    "data",
    "models",
    "surrogate",
    "training",
    "ConfigError",
    "NumericalError",
    "__version__",
]
