"""Forward and backward Luenberger observers with colocated feedback."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    TimeGrid,
    midpoint_values,
    observability_constant,
    operator_norm,
    propagator,
)
from .system import LtiSystem, Trajectory


@dataclass(frozen=True, eq=False)
class ObserverConfig:
    """Observer gain; ``K = kappa * C^*`` unless ``gain`` overrides it."""

    kappa: float = 0.0
    gain: np.ndarray | None = None

    def __post_init__(self):
        if not self.kappa >= 0:
            raise ValueError(f"kappa must be nonnegative, got {self.kappa}")

    def feedback(self, sys: LtiSystem) -> np.ndarray:
        if self.gain is not None:
            K = np.atleast_2d(np.asarray(self.gain, dtype=float))
            if K.shape != (sys.n, sys.m):
                raise ValueError(f"gain must be {(sys.n, sys.m)}, got {K.shape}")
            return K
        return self.kappa * sys.C_adjoint


def _outputs(y, grid: TimeGrid) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[0] != grid.n_steps + 1:
        raise ValueError(f"y has {y.shape[0]} samples, grid has {grid.n_steps + 1} nodes")
    return y


def _source(source, sys: LtiSystem, grid: TimeGrid) -> np.ndarray:
    if source is None:
        return np.zeros((grid.n_steps + 1, sys.n))
    return np.broadcast_to(np.asarray(source, dtype=float), (grid.n_steps + 1, sys.n))


def forward_observe(sys: LtiSystem, cfg: ObserverConfig, y, source, zeta,
                    grid: TimeGrid) -> Trajectory:
    """Solve ``z' = A z + source + K (y - C z)``, ``z(0) = zeta``."""
    y = _outputs(y, grid)
    K = cfg.feedback(sys)
    load = _source(source, sys, grid) + y @ K.T
    prop = propagator(sys.A - K @ sys.C, grid.dt)
    states = prop.run(np.asarray(zeta, dtype=float), grid.n_steps, midpoint_values(load))
    return Trajectory(states, states @ sys.C.T)


def backward_observe(sys: LtiSystem, cfg: ObserverConfig, y, source, zeta_T,
                     grid: TimeGrid) -> Trajectory:
    """Backward observer run forward in time.

    Solves ``w' = -A w - source(T - t) + K (y(T - t) - C w)``, ``w(0) = zeta_T``;
    entry ``i`` of the result estimates ``z(T - t_i)``.
    """
    y = _outputs(y, grid)
    K = cfg.feedback(sys)
    load = -_source(source, sys, grid)[::-1] + y[::-1] @ K.T
    prop = propagator(-sys.A - K @ sys.C, grid.dt)
    states = prop.run(np.asarray(zeta_T, dtype=float), grid.n_steps, midpoint_values(load))
    return Trajectory(states, states @ sys.C.T)


def lemma1_check(sys: LtiSystem, K, grid: TimeGrid) -> tuple[float, float]:
    """Closed-loop observability constant and its perturbation lower bound.

    Returns ``(gamma, gamma0 * sqrt(2) / (sqrt(2) + T ||C|| ||K||))`` where
    ``gamma`` is measured for ``A - K C`` and ``gamma0`` for ``A``; norms are
    taken between the weighted state and output spaces.
    """
    K = np.atleast_2d(np.asarray(K, dtype=float))
    gamma0 = observability_constant(sys.A, sys.C, grid, sys.G_X, sys.G_Y)
    gamma = observability_constant(sys.A - K @ sys.C, sys.C, grid, sys.G_X, sys.G_Y)
    c_norm = operator_norm(sys.C, sys.G_X, sys.G_Y)
    k_norm = operator_norm(K, sys.G_Y, sys.G_X)
    bound = gamma0 * np.sqrt(2.0) / (np.sqrt(2.0) + grid.t_final * c_norm * k_norm)
    return gamma, float(bound)


def spectral_abscissa(M) -> float:
    return float(np.linalg.eigvals(np.asarray(M, dtype=float)).real.max())


def damping_gains(sys: LtiSystem, gains) -> dict:
    """Closed-loop diagnostics of ``A - kappa C^* C`` over a gain sweep.

    ``decay`` is the distance of the rightmost eigenvalue from the imaginary
    axis; ``overdamped_modes`` counts real eigenvalues (critically damped or
    overdamped modes).
    """
    CC = sys.C_adjoint @ sys.C
    decay, overdamped = [], []
    for kappa in gains:
        lam = np.linalg.eigvals(sys.A - kappa * CC)
        decay.append(-lam.real.max())
        overdamped.append(int(np.sum(np.abs(lam.imag) < 1e-9 * max(1.0, np.abs(lam).max()))))
    gains = np.asarray(gains, dtype=float)
    decay = np.asarray(decay)
    return {
        "gains": gains,
        "decay": decay,
        "overdamped_modes": np.asarray(overdamped),
        "best_decay_gain": float(gains[np.argmax(decay)]),
    }
