"""Bayesian conductivity estimation for reflected diffusions observed at low frequency.

The package discretises the generator ``div(f grad .)`` on a disk with P1
finite elements, evaluates spectral transition densities and their exact
gradients, and samples or optimises a Gaussian-prior posterior over ``log(f - f_min)``.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConductivityPositivityError,
    ConfigError,
    ConvergenceError,
    DimensionError,
    DivergenceError,
    IllConditionedPriorError,
    InvalidParameterError,
    LfdiffError,
    NumericalError,
    ParameterOverflowError,
    PointOutsideDomainError,
    SimulationError,
    SolverError,
)
from .mesh import UNIT_AREA_RADIUS, Mesh, build_disk_mesh, locate_point, locate_points  # noqa: E402
from .eigen import EigenBasis, solve_lowest  # noqa: E402
from .kernel import ObservationSet, log_likelihood, transition_density  # noqa: E402
from .prior import (  # noqa: E402
    ConductivityParam,
    PriorSpec,
    build_series_prior,
    build_stationary_prior,
    laplacian_series_basis,
    nodal_basis,
    sample_prior,
)
from .infer import (  # noqa: E402
    ChainRecord,
    LogPosterior,
    RunConfig,
    SpectralLikelihood,
    l2_error,
    map_run,
    pcn_run,
    posterior_mean,
    ula_run,
)
from .sim import GroundTruth, TrajectoryConfig, simulate, truth_catalog  # noqa: E402
