"""Offset-free tracking control for implicit recurrent neural network models.

Velocity-form reformulation, LMI-based synthesis of static and predictive
controllers and of a disturbance observer, invariant ellipsoid levels and a
closed-loop simulation harness.
"""

from .model import RnnModel
from .sector import SectorSpec
from .velocity import VelocityModel, build_velocity

__version__ = "0.1.0"

__all__ = ["RnnModel", "SectorSpec", "VelocityModel", "build_velocity", "__version__"]
