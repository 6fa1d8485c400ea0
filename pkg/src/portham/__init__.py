"""Learning and boundary control of 1-D port-Hamiltonian PDE systems.

Subpackages:

- ``dphs``: grids, structure matrices, boundary ports and the discrete
  structure operator;
- ``gp``: exact squared-exponential Gaussian-process regression;
- ``learn``: energy-surrogate training, structured dynamics kernel and
  model-error bounds;
- ``control``: control by interconnection, Casimir machinery, modified
  passive output and the robust decrement ledger;
- ``swe``: the open-channel benchmark;
- ``sim``: method-of-lines simulation of open and closed loops;
- ``cli``: the config-driven experiment pipeline.
"""

from . import control, dphs, gp, learn, sim, swe  # noqa: F401
from .dphs import SpatialGrid, StateField, StructureMatrices  # noqa: F401
from .gp import GpPosterior, Hyperparams  # noqa: F401
from .learn import LearnedHamiltonian, ObservationSet, UncertaintyBound  # noqa: F401
from .sim import SimConfig, Trajectory  # noqa: F401
from .swe import SweParams  # noqa: F401

__version__ = "0.1.0"
