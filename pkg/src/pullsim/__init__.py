"""Pull-based load distribution in heterogeneous many-server systems."""
from .model import (
    Exponential,
    Hyperexponential,
    Pareto,
    PoolSpec,
    ScaledSystem,
    SystemConfig,
    EquilibriumPoint,
    check_subcritical,
    distribution_mean,
    load_config,
    scale,
    solve_equilibrium,
    validate,
)
from .fluid import MeanFieldState, equilibrium_state, fluid_rhs, integrate_fluid, rho
from .policies import make_policy
from .engine import run_replication
from .metrics import MetricsReport, estimate_steady_state

__version__ = "0.1.0"
