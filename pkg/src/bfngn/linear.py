"""Joint BFN / Gauss-Newton estimation for linear source problems.

The discrete cost is

    J(zeta, xi) = <xi - theta0, U0 (xi - theta0)>
                  + sum_i dt ||y_{i+1/2} - C z_{i+1/2}||^2_{G_Y}

with ``z`` the implicit-midpoint observer trajectory. The sensitivity, the
Gauss-Newton accumulators and the backward pass all use the same steps and
midpoints, so the iteration's fixed point is the exact minimizer of ``J``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla

from .numerics import (
    TimeGrid,
    matrix_sqrt_psd,
    midpoint_values,
    observability_constant,
    operator_norm,
    propagator,
)
from .observer import ObserverConfig, backward_observe, forward_observe
from .system import LtiSystem


_CHUNK = 256  # steps per block of the sensitivity sweep


class NonIdentifiableError(np.linalg.LinAlgError):
    """The Gauss-Newton or normal matrix is singular."""


class InstabilityError(RuntimeError):
    """Observer trajectories blew up during an iteration."""


@dataclass(frozen=True, eq=False)
class CostSpec:
    """Prior, regularizer, data record and observer gain of the cost."""

    theta0: np.ndarray
    U0: np.ndarray
    y: np.ndarray
    kappa: float = 0.0
    delta: float | None = None

    def __post_init__(self):
        theta0 = np.atleast_1d(np.asarray(self.theta0, dtype=float))
        U0 = np.atleast_2d(np.asarray(self.U0, dtype=float))
        if U0.shape != (theta0.size, theta0.size):
            raise ValueError(f"U0 must be {theta0.size}x{theta0.size}, got {U0.shape}")
        scale = max(np.abs(U0).max(), 1e-300)
        if np.abs(U0 - U0.T).max() > 1e-12 * scale:
            raise ValueError("U0 is not symmetric")
        U0 = 0.5 * (U0 + U0.T)
        lam_min = float(np.linalg.eigvalsh(U0)[0]) if U0.size else 0.0
        delta = max(lam_min, 0.0) if self.delta is None else float(self.delta)
        if lam_min < delta - 1e-10:
            raise ValueError(f"U0 has eigenvalue {lam_min} below delta={delta}")
        if self.kappa < 0:
            raise ValueError("kappa must be nonnegative")
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        object.__setattr__(self, "theta0", theta0)
        object.__setattr__(self, "U0", U0)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "y", y)


@dataclass
class EstimatorState:
    zeta_hat: np.ndarray
    theta_hat: np.ndarray
    iteration: int = 1
    cost: float = float("nan")
    step_zeta: float = float("nan")
    step_theta: float = float("nan")
    kappa: float = float("nan")
    extras: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.iteration < 1:
            raise ValueError("iteration counts from 1")
        self.zeta_hat = np.asarray(self.zeta_hat, dtype=float)
        self.theta_hat = np.atleast_1d(np.asarray(self.theta_hat, dtype=float))


def _misfit(y_mid, z_mid, C, G_Y, dt) -> float:
    r = y_mid - z_mid @ C.T
    return float(dt * np.einsum("ti,ij,tj->", r, G_Y.gram, r))


def _regularization(xi, theta0, U0) -> float:
    d = np.asarray(xi, dtype=float) - theta0
    return float(d @ U0 @ d)


def cost_J(spec: CostSpec, zeta, xi, sys: LtiSystem, grid: TimeGrid) -> float:
    """Regularized output-error cost of the observer started at ``zeta`` with parameter ``xi``."""
    traj = forward_observe(sys, ObserverConfig(spec.kappa), spec.y,
                           sys.forcing_nodes(xi, grid), zeta, grid)
    return _regularization(xi, spec.theta0, spec.U0) + _misfit(
        midpoint_values(spec.y), midpoint_values(traj.states), sys.C, sys.G_Y, grid.dt)


def _solve_gn(U, rhs) -> np.ndarray:
    U = 0.5 * (U + U.T)
    lam = np.linalg.eigvalsh(U)
    if lam[0] <= 1e-14 * max(abs(lam[-1]), 1e-300):
        raise NonIdentifiableError(
            "Gauss-Newton matrix U(T) is singular; the parameter is not identifiable "
            "from these data (increase U0)"
        )
    try:
        return sla.cho_solve(sla.cho_factor(U), rhs)
    except np.linalg.LinAlgError as exc:
        raise NonIdentifiableError("Gauss-Newton matrix U(T) is not positive definite") from exc


def _left_multiply(mat, stack) -> np.ndarray:
    """``mat @ stack[t]`` for every ``t`` as a single matrix product."""
    c, a, b = stack.shape
    flat = np.ascontiguousarray(stack.transpose(1, 0, 2)).reshape(a, c * b)
    return (mat @ flat).reshape(mat.shape[0], c, b).transpose(1, 0, 2)


@dataclass
class _Sweep:
    zeta_new: np.ndarray
    theta_new: np.ndarray
    zplus: np.ndarray
    zminus: np.ndarray
    Pi_T: np.ndarray
    U: np.ndarray
    xi: np.ndarray
    misfit: float


def _joint_step(zeta, theta, theta0, U0, y, grid: TimeGrid, kappa: float,
                sys_fwd: LtiSystem, load_fwd, sensitivity_source: Callable,
                backward: Callable, beta: float = 1.0, blowup: float | None = None) -> _Sweep:
    """One forward sweep with Gauss-Newton update followed by a backward sweep.

    ``sensitivity_source`` is either the ``(n_steps, n, p)`` array of midpoint
    sources of the sensitivity equation or a callable mapping a block of
    forward midpoint states ``(c, n)`` to their sources ``(c, n, p)``; ``backward(theta_new)`` returns the
    system and known load for the backward pass.
    """
    dt = grid.dt
    cfg = ObserverConfig(kappa)
    C = sys_fwd.C
    G_Y = sys_fwd.G_Y.gram
    fwd = forward_observe(sys_fwd, cfg, y, load_fwd, zeta, grid)
    zplus = fwd.states
    scale = blowup
    if scale is not None and not np.all(np.abs(zplus) < scale):
        raise InstabilityError(
            "forward observer blew up; try warmup sweeps or a smaller step size beta"
        )
    z_mid = midpoint_values(zplus)
    y_mid = midpoint_values(y)
    r_mid = y_mid - z_mid @ C.T

    K = cfg.feedback(sys_fwd)
    prop = propagator(sys_fwd.A - K @ C, dt)
    p = theta.size
    U = np.array(U0, dtype=float, copy=True)
    xi = np.zeros(p)
    R, S = prop.step_matrix, prop.load_matrix
    Pi = np.zeros((sys_fwd.n, p))
    for i0 in range(0, grid.n_steps, _CHUNK):
        i1 = min(grid.n_steps, i0 + _CHUNK)
        if callable(sensitivity_source):
            src = sensitivity_source(z_mid[i0:i1])
        else:
            src = sensitivity_source[i0:i1]
        forced = _left_multiply(S, src)
        path = np.empty((i1 - i0 + 1,) + Pi.shape)
        path[0] = Pi
        for k in range(i1 - i0):
            path[k + 1] = R @ path[k] + forced[k]
        CPi = _left_multiply(C, midpoint_values(path))
        WCPi = _left_multiply(G_Y, CPi)
        U += dt * np.einsum("tik,til->kl", CPi, WCPi)
        xi += dt * np.einsum("tik,ti->k", WCPi, r_mid[i0:i1])
        Pi = path[-1]

    grad = U0 @ (theta - theta0) - xi
    theta_new = theta - beta * _solve_gn(U, grad)

    sys_bwd, load_bwd = backward(theta_new)
    start = zplus[-1] + Pi @ (theta_new - theta)
    bwd = backward_observe(sys_bwd, cfg, y, load_bwd, start, grid)
    if scale is not None and not np.all(np.abs(bwd.states) < scale):
        raise InstabilityError(
            "backward observer blew up; try warmup sweeps or a smaller step size beta"
        )
    misfit = float(dt * np.einsum("ti,ij,tj->", r_mid, G_Y, r_mid))
    return _Sweep(bwd.states[-1].copy(), theta_new, zplus, bwd.states, Pi, U, xi, misfit)


def bfn_gn_step_linear(state: EstimatorState, spec: CostSpec, sys: LtiSystem, kappa: float,
                       grid: TimeGrid) -> EstimatorState:
    """One iteration: forward observer + Gauss-Newton parameter update + backward observer."""
    if kappa < 0:
        raise ValueError("kappa must be nonnegative")
    B_mid = midpoint_values(sys.source_nodes(grid))
    load = sys.load_nodes(grid)
    sweep = _joint_step(
        state.zeta_hat, state.theta_hat, spec.theta0, spec.U0, spec.y, grid, kappa,
        sys, sys.forcing_nodes(state.theta_hat, grid),
        B_mid,
        lambda th: (sys, load + np.einsum("tij,j->ti", sys.source_nodes(grid), th)),
    )
    return EstimatorState(
        sweep.zeta_new, sweep.theta_new, state.iteration + 1,
        cost=sweep.misfit + _regularization(state.theta_hat, spec.theta0, spec.U0),
        step_zeta=sys.G_X.norm(sweep.zeta_new - state.zeta_hat),
        step_theta=float(np.linalg.norm(sweep.theta_new - state.theta_hat)),
        kappa=float(kappa),
        extras={"U": sweep.U, "xi": sweep.xi, "Pi_T": sweep.Pi_T},
    )


@dataclass(frozen=True, eq=False)
class GammaSystem:
    """Affine least-squares form ``J(zeta, xi) = ||target - matrix @ [zeta; xi] - offset||^2``."""

    matrix: np.ndarray
    offset: np.ndarray
    target: np.ndarray
    n: int
    p: int
    n_data_rows: int

    @property
    def state_block(self) -> np.ndarray:
        return self.matrix[: self.n_data_rows, : self.n]

    @property
    def param_block(self) -> np.ndarray:
        return self.matrix[: self.n_data_rows, self.n:]

    def cost(self, zeta, xi) -> float:
        r = self.target - self.matrix @ np.concatenate([zeta, xi]) - self.offset
        return float(r @ r)


def assemble_gamma(spec: CostSpec, sys: LtiSystem, grid: TimeGrid) -> GammaSystem:
    """Materialize the stacked map ``(zeta, xi) -> (weighted output path, sqrt(U0) xi)``.

    Columns are obtained by propagating unit initial states (closed-loop free
    response) and the sensitivity ``Pi' = (A - kappa C^* C) Pi + B``.
    """
    dt = grid.dt
    N = grid.n_steps
    n, p = sys.n, spec.theta0.size
    K = ObserverConfig(spec.kappa).feedback(sys)
    prop = propagator(sys.A - K @ sys.C, dt)
    LT = np.linalg.cholesky(sys.G_Y.gram).T * np.sqrt(dt)

    free = midpoint_values(prop.run(np.eye(n), N))                       # (N, n, n)
    Pi = midpoint_values(prop.run(np.zeros((n, p)), N,
                                  midpoint_values(sys.source_nodes(grid))))  # (N, n, p)
    base = forward_observe(sys, ObserverConfig(spec.kappa), spec.y,
                           sys.load_nodes(grid), np.zeros(n), grid)

    W = LT @ sys.C
    state_cols = np.einsum("ij,tjk->tik", W, free).reshape(N * W.shape[0], n)
    param_cols = np.einsum("ij,tjk->tik", W, Pi).reshape(N * W.shape[0], p)
    rows = N * W.shape[0]
    sqrtU0 = matrix_sqrt_psd(spec.U0)
    matrix = np.block([[state_cols, param_cols], [np.zeros((p, n)), sqrtU0]])
    offset = np.concatenate([(midpoint_values(base.states) @ W.T).ravel(), np.zeros(p)])
    target = np.concatenate([(midpoint_values(spec.y) @ LT.T).ravel(), sqrtU0 @ spec.theta0])
    return GammaSystem(matrix, offset, target, n, p, rows)


def oracle_minimize(spec: CostSpec, sys: LtiSystem, grid: TimeGrid,
                    gamma: GammaSystem | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Exact minimizer of the discrete cost via the normal equations."""
    gamma = assemble_gamma(spec, sys, grid) if gamma is None else gamma
    G = gamma.matrix
    normal = G.T @ G
    normal = 0.5 * (normal + normal.T)
    rhs = G.T @ (gamma.target - gamma.offset)
    lam = np.linalg.eigvalsh(normal)
    if lam[0] <= 1e-15 * lam[-1]:
        raise NonIdentifiableError(
            "normal matrix is singular: initial state and parameter are not jointly identifiable"
        )
    try:
        sol = sla.cho_solve(sla.cho_factor(normal), rhs)
    except np.linalg.LinAlgError as exc:
        raise NonIdentifiableError("normal matrix is not positive definite") from exc
    return sol[: gamma.n], sol[gamma.n:]


def optimality_residuals(spec: CostSpec, sys: LtiSystem, grid: TimeGrid, zeta, theta,
                         gamma: GammaSystem | None = None) -> tuple[np.ndarray, np.ndarray]:
    """First-order conditions at ``(zeta, theta)``.

    Returns the state-space gradient term (the discrete ``int e^{A^* s} C^* chi``,
    expressed in the ``G_X`` geometry) and ``U0 (theta - theta0) - int (C Pi)^* chi``.
    Both vanish at the minimizer.
    """
    gamma = assemble_gamma(spec, sys, grid) if gamma is None else gamma
    rows = gamma.n_data_rows
    chi = (gamma.target - gamma.matrix @ np.concatenate([zeta, theta]) - gamma.offset)[:rows]
    state = sla.cho_solve((sys.G_X.cholesky, True), gamma.state_block.T @ chi)
    param = spec.U0 @ (np.asarray(theta) - spec.theta0) - gamma.param_block.T @ chi
    return state, param


def _gain_at(schedule, j: int) -> float:
    if callable(schedule):
        return float(schedule(j))
    if np.isscalar(schedule):
        return float(schedule)
    seq = list(schedule)
    if j - 1 >= len(seq):
        raise ValueError(f"gain schedule has {len(seq)} entries, iteration {j} requested")
    return float(seq[j - 1])


def harmonic_schedule(kappa1: float) -> Callable[[int], float]:
    """``kappa_j = kappa1 / j``: divergent sum, convergent sum of squares."""
    return lambda j: kappa1 / j


def run_linear(spec: CostSpec, sys: LtiSystem, schedule: float | Sequence[float] | Callable,
               grid: TimeGrid, max_iters: int = 200, tol: float = 1e-10,
               init: EstimatorState | None = None,
               oracle: tuple[np.ndarray, np.ndarray] | None = None):
    """Iterate :func:`bfn_gn_step_linear` until the step norm drops below ``tol``.

    Starts from ``zeta = 0, theta = theta0`` unless ``init`` is given. Returns
    the final state and a list of per-iteration records.
    """
    state = init or EstimatorState(np.zeros(sys.n), spec.theta0.copy())
    history = []
    for _ in range(max_iters):
        kappa = _gain_at(schedule, state.iteration)
        if kappa < 0:
            raise ValueError(f"negative gain {kappa} at iteration {state.iteration}")
        new = bfn_gn_step_linear(state, spec, sys, kappa, grid)
        rec = {"iteration": state.iteration, "kappa": kappa, "cost": new.cost,
               "step": new.step_zeta + new.step_theta}
        if oracle is not None:
            rec["err_zeta"] = sys.G_X.norm(new.zeta_hat - oracle[0])
            rec["err_theta"] = float(np.linalg.norm(new.theta_hat - oracle[1]))
        history.append(rec)
        state = new
        if rec["step"] < tol:
            break
    return state, history


HISTORY_FIELDS = ("iteration", "kappa", "cost", "err_zeta", "err_theta")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.8e}"


def write_history_csv(history, path, fields=HISTORY_FIELDS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for rec in history:
            w.writerow([_fmt(rec.get(k, float("nan"))) for k in fields])


def contraction_constants(spec: CostSpec, sys: LtiSystem, grid: TimeGrid) -> dict:
    """Observability constant, weighted norms and the first-order rate ``alpha``.

    ``alpha = min(delta gamma^2 / (T^2 ||C||^2 ||B||^2), gamma^2)`` with
    ``||B||`` the ``L^2(0, T)`` norm of the source operator.
    """
    gamma = observability_constant(sys.A, sys.C, grid, sys.G_X, sys.G_Y)
    c_norm = operator_norm(sys.C, None if sys.G_X is None else sys.G_X, sys.G_Y)
    B_mid = midpoint_values(sys.source_nodes(grid))
    b_sq = sum(operator_norm(Bi, None, sys.G_X) ** 2 for Bi in B_mid) * grid.dt
    T = grid.t_final
    first = spec.delta * gamma**2 / (T**2 * c_norm**2 * b_sq) if b_sq > 0 else np.inf
    return {"gamma": gamma, "C_norm": c_norm, "B_norm": float(np.sqrt(b_sq)),
            "delta": spec.delta, "alpha": float(min(first, gamma**2))}


def linear_map_matrix(spec: CostSpec, sys: LtiSystem, kappa: float, grid: TimeGrid) -> np.ndarray:
    """Matrix of the state update ``zeta -> zeta'`` with data and prior removed."""
    p = spec.theta0.size
    zero_spec = CostSpec(np.zeros(p), spec.U0, np.zeros_like(spec.y), spec.kappa, spec.delta)
    bare = LtiSystem(sys.A, sys.C, sys.B, sys.G_X, sys.G_Y)
    cols = []
    for e in np.eye(sys.n):
        st = bfn_gn_step_linear(EstimatorState(e, np.zeros(p)), zero_spec, bare, kappa, grid)
        cols.append(st.zeta_hat)
    return np.column_stack(cols)
