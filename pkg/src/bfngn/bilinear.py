"""Joint BFN / Gauss-Newton estimation when the parameter enters the generator.

The plant is ``z' = A(theta) z + f`` with ``A(theta) = A0 + sum_k theta_k dA_k``.
The sensitivity ``Pi = dz/dtheta`` of the forward observer is driven by
``Lambda(z) xi = (sum_k xi_k dA_k) z`` evaluated on the forward trajectory.
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .linear import (
    EstimatorState,
    InstabilityError,
    _fmt,
    _gain_at,
    _joint_step,
    _regularization,
)
from .numerics import TimeGrid
from .observer import ObserverConfig, backward_observe, forward_observe
from .system import BilinearFamily

BLOWUP_FACTOR = 1e6


@dataclass(frozen=True, eq=False)
class BilinearEstimatorConfig:
    """Gain (constant or schedule), step size and regularization.

    ``U0_schedule(j)`` overrides ``U0`` at iteration ``j`` when given.
    ``beta = 0`` freezes the parameter, leaving plain BFN sweeps.
    """

    kappa: float | Sequence[float] | Callable[[int], float]
    U0: np.ndarray
    theta0: np.ndarray
    beta: float = 1.0
    warmup_sweeps: int = 0
    U0_schedule: Callable[[int], np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if int(self.warmup_sweeps) != self.warmup_sweeps or self.warmup_sweeps < 0:
            raise ValueError("warmup_sweeps must be a nonnegative integer")
        theta0 = np.atleast_1d(np.asarray(self.theta0, dtype=float))
        U0 = np.atleast_2d(np.asarray(self.U0, dtype=float))
        if U0.shape != (theta0.size, theta0.size):
            raise ValueError(f"U0 must be {theta0.size}x{theta0.size}, got {U0.shape}")
        object.__setattr__(self, "theta0", theta0)
        object.__setattr__(self, "U0", 0.5 * (U0 + U0.T))

    def gain(self, j: int) -> float:
        kappa = _gain_at(self.kappa, j)
        if kappa < 0:
            raise ValueError(f"negative gain {kappa} at iteration {j}")
        return kappa

    def regularizer(self, j: int) -> np.ndarray:
        if self.U0_schedule is None:
            return self.U0
        U0 = np.atleast_2d(np.asarray(self.U0_schedule(j), dtype=float))
        return 0.5 * (U0 + U0.T)


def lambda_apply(zhat, xi, fam: BilinearFamily) -> np.ndarray:
    """``(sum_k xi_k dA_k) zhat``."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    if xi.size != fam.p:
        raise ValueError(f"xi has {xi.size} entries, family has {fam.p} parameters")
    return fam.lambda_matrix(zhat) @ xi


def _blowup_level(y) -> float:
    scale = float(np.max(np.abs(y))) if np.size(y) else 0.0
    return BLOWUP_FACTOR * max(scale, 1.0)


def _system_at(fam: BilinearFamily, theta):
    try:
        return fam.at(theta)
    except ValueError as exc:
        raise InstabilityError(
            "state norm is not positive definite at the current parameter; "
            "try warmup sweeps or a smaller step size beta"
        ) from exc


def bfn_gn_step_bilinear(state: EstimatorState, cfg: BilinearEstimatorConfig, fam: BilinearFamily,
                         y, grid: TimeGrid, kappa: float | None = None) -> EstimatorState:
    """Forward pass with ``A(theta_j)``, Gauss-Newton update, backward pass with ``A(theta_{j+1})``."""
    j = state.iteration
    kappa = cfg.gain(j) if kappa is None else float(kappa)
    U0 = cfg.regularizer(j)
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    theta = state.theta_hat
    sys_fwd = _system_at(fam, theta)
    load = fam.load_nodes(grid)
    sweep = _joint_step(
        state.zeta_hat, theta, cfg.theta0, U0, y, grid, kappa,
        sys_fwd, load,
        fam.lambda_batch,
        lambda th: (_system_at(fam, th), load),
        beta=cfg.beta, blowup=_blowup_level(y),
    )
    return EstimatorState(
        sweep.zeta_new, sweep.theta_new, j + 1,
        cost=sweep.misfit + _regularization(theta, cfg.theta0, U0),
        step_zeta=fam.gram(sweep.theta_new).norm(sweep.zeta_new - state.zeta_hat),
        step_theta=float(np.linalg.norm(sweep.theta_new - theta)),
        kappa=kappa,
        extras={"U": sweep.U, "xi": sweep.xi, "Pi_T": sweep.Pi_T},
    )


def bfn_sweep(zeta, theta, fam: BilinearFamily, y, kappa: float, grid: TimeGrid) -> np.ndarray:
    """One forward/backward nudging pass with the parameter held fixed."""
    sys = _system_at(fam, theta)
    cfg = ObserverConfig(kappa)
    load = fam.load_nodes(grid)
    level = _blowup_level(y)
    fwd = forward_observe(sys, cfg, y, load, zeta, grid)
    bwd = backward_observe(sys, cfg, y, load, fwd.states[-1], grid)
    if not (np.all(np.abs(fwd.states) < level) and np.all(np.abs(bwd.states) < level)):
        raise InstabilityError("observer blew up during a warmup sweep")
    return bwd.states[-1].copy()


def run_bilinear(cfg: BilinearEstimatorConfig, fam: BilinearFamily, y, grid: TimeGrid,
                 init: EstimatorState | None = None, max_iters: int = 20, tol: float = 0.0,
                 metrics: Callable[[EstimatorState], dict] | None = None):
    """Warmup sweeps followed by joint iterations.

    ``metrics(state)`` may return extra per-iteration records (for instance
    errors against a known truth). History entry ``j`` describes the
    estimates after iteration ``j``.
    """
    state = init or EstimatorState(np.zeros(fam.n), cfg.theta0.copy())
    zeta = state.zeta_hat
    for _ in range(cfg.warmup_sweeps):
        zeta = bfn_sweep(zeta, state.theta_hat, fam, y, cfg.gain(state.iteration), grid)
    state = EstimatorState(zeta, state.theta_hat, state.iteration)
    history = []
    for _ in range(max_iters):
        new = bfn_gn_step_bilinear(state, cfg, fam, y, grid)
        rec = {"iteration": state.iteration, "kappa": new.kappa, "cost": new.cost,
               "step": new.step_zeta + new.step_theta, "theta": new.theta_hat.copy()}
        if metrics is not None:
            rec.update(metrics(new))
        history.append(rec)
        state = new
        if rec["step"] < tol:
            break
    return state, history


def write_parameter_csv(history, path) -> None:
    """One row per iteration: the iteration index then the parameter vector."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        p = len(history[0]["theta"]) if history else 0
        w.writerow(["iteration"] + [f"theta_{k}" for k in range(p)])
        for rec in history:
            w.writerow([rec["iteration"]] + [_fmt(v) for v in rec["theta"]])


def frechet_blocks(point, cfg: BilinearEstimatorConfig, fam: BilinearFamily, y, grid: TimeGrid,
                   h: float = 1e-5, kappa: float | None = None, workers: int = 1):
    """Central-difference Jacobian of the one-step map, split into blocks.

    Returns ``(D, E, F, G)`` with ``D = d zeta'/d zeta``, ``E = d zeta'/d theta``,
    ``F = d theta'/d zeta`` and ``G = d theta'/d theta``. Steps are ``h`` times
    the sup-norm of the respective block of ``point`` (at least ``h``).
    """
    zeta, theta = (np.asarray(v, dtype=float) for v in point)
    n, p = zeta.size, theta.size
    kappa = cfg.gain(1) if kappa is None else float(kappa)
    s_z = h * max(np.abs(zeta).max(initial=0.0), 1.0)
    s_t = h * max(np.abs(theta).max(initial=0.0), 1.0)

    def step(z, t):
        out = bfn_gn_step_bilinear(EstimatorState(z, t), cfg, fam, y, grid, kappa=kappa)
        return np.concatenate([out.zeta_hat, out.theta_hat])

    def column(k):
        dz, dt_ = np.zeros(n), np.zeros(p)
        if k < n:
            dz[k], s = s_z, s_z
        else:
            dt_[k - n], s = s_t, s_t
        return (step(zeta + dz, theta + dt_) - step(zeta - dz, theta - dt_)) / (2 * s)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            cols = list(pool.map(column, range(n + p)))
    else:
        cols = [column(k) for k in range(n + p)]
    J = np.column_stack(cols)
    return J[:n, :n], J[:n, n:], J[n:, :n], J[n:, n:]
