"""Direction finding for MIMO radar under compound-Gaussian clutter.

Library layout:

- :mod:`sirpdoa.specfun` — special functions and half-line quadrature
- :mod:`sirpdoa.model` — array geometry, steering, synthesis, SCR
- :mod:`sirpdoa.clutter` — texture/speckle sampling and density kernels
- :mod:`sirpdoa.estimators` — likelihood estimators and grid MUSIC
- :mod:`sirpdoa.crb` — Cramer-Rao bounds on the angle parameters
- :mod:`sirpdoa.harness` — Monte Carlo runner and config I/O
- :mod:`sirpdoa.cli` — command-line interface
"""

from .clutter import ClutterModel, TextureFamily, TextureKind
from .estimators import EstimateResult, EstimatorConfig
from .model import ArrayGeometry, ObservationBlock, Scene

__all__ = [
    "ArrayGeometry",
    "ClutterModel",
    "EstimateResult",
    "EstimatorConfig",
    "ObservationBlock",
    "Scene",
    "TextureFamily",
    "TextureKind",
]

__version__ = "0.1.0"
