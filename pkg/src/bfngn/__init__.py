"""Joint initial-state and parameter estimation by back-and-forth nudging with Gauss-Newton steps."""
from .numerics import (
    InnerProductSpace,
    Propagator,
    StepFailureError,
    TimeGrid,
    observability_constant,
    operator_norm,
    step_lti,
    weighted_adjoint,
)
from .system import BilinearFamily, LtiSystem, NoiseRealization, simulate_truth
from .observer import ObserverConfig, backward_observe, forward_observe
from .linear import (
    CostSpec,
    EstimatorState,
    InstabilityError,
    NonIdentifiableError,
    bfn_gn_step_linear,
    cost_J,
    oracle_minimize,
    run_linear,
)

__version__ = "0.1.0"
