"""Inverse potential problem for the 1-D wave equation ``u_tt = u_xx - theta u + load``.

Space is discretized with P1 hat functions on a uniform mesh with
homogeneous Dirichlet conditions. The state ``z = (u, u_t)`` holds interior
nodal values; the potential ``theta`` holds values at every node. With
stiffness ``K``, mass ``M`` and potential mass ``M_theta``,

    A(theta) = [[0, I], [-M^{-1} (K + M_theta), 0]],
    G_X(theta) = blockdiag(K + M_theta, M),

so ``A(theta)`` is exactly ``G_X(theta)``-skew-adjoint.

Observations are nodal velocities on ``(0, 0.1]`` and the velocity averages
over ``J_k = [0.05 + 0.05 k, 0.1 + 0.05 k]``, ``k = 1..18``. The output norm
is the trapezoid ``L^2(0, 0.1)`` norm on the first block and Euclidean on the
averages.

Random streams per run seed: load signals on channels 1..3, average-channel
noise on 11..28 and velocity-field noise modes on 101..110.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from ..bilinear import BilinearEstimatorConfig, run_bilinear
from ..linear import EstimatorState
from ..numerics import InnerProductSpace, TimeGrid
from ..system import (
    BilinearFamily,
    sample_gp_input,
    sample_ou,
    sample_spatial_noise,
    simulate_truth,
)

AVERAGE_WIDTH = 0.05
N_AVERAGES = 18
FIELD_END = 0.1
LOAD_CHANNELS = (1, 2, 3)
AVERAGE_NOISE_BASE = 10
FIELD_NOISE_BASE = 100


def load_profiles(x) -> np.ndarray:
    """Spatial load shapes, shape ``(len(x), 3)``; the third one tends to 0 at ``x = 0``."""
    x = np.asarray(x, dtype=float)
    safe = np.where(x == 0.0, 1.0, x)
    b3 = np.where(x == 0.0, 0.0, np.sin(6 * np.pi * x) ** 2 / safe)
    return np.column_stack([(1 - x) * np.sin(np.pi * x), 7 * x**2 * (1 - x), b3])


def true_potential(x) -> np.ndarray:
    """Zero outside ``[0.4, 0.85]``, 2 on ``[0.45, 0.8]``, linear in between."""
    x = np.asarray(x, dtype=float)
    return np.interp(x, [0.4, 0.45, 0.8, 0.85], [0.0, 2.0, 2.0, 0.0], left=0.0, right=0.0)


def true_displacement(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return 0.5 * x**0.8 * np.sin(np.pi * x) + np.sin(4 * np.pi * x)


def true_velocity(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return -8 * x * (1 - x) + 1.6 * np.sin(2 * np.pi * x)


def hat_integral(center: float, h: float, a: float, b: float) -> float:
    """Exact integral of the hat function at ``center`` over ``[a, b]``."""

    def ramp_up(lo, hi):  # (x - center + h) / h on [center - h, center]
        lo, hi = max(lo, center - h), min(hi, center)
        if hi <= lo:
            return 0.0
        return ((hi - center + h) ** 2 - (lo - center + h) ** 2) / (2 * h)

    def ramp_down(lo, hi):  # (center + h - x) / h on [center, center + h]
        lo, hi = max(lo, center), min(hi, center + h)
        if hi <= lo:
            return 0.0
        return ((center + h - lo) ** 2 - (center + h - hi) ** 2) / (2 * h)

    return ramp_up(a, b) + ramp_down(a, b)


@dataclass(frozen=True, eq=False)
class Mesh:
    """Uniform P1 mesh on ``[0, 1]`` with ``n_elements`` cells."""

    n_elements: int

    def __post_init__(self):
        if self.n_elements < 2:
            raise ValueError("need at least two elements")

    @classmethod
    def from_h(cls, h: float) -> "Mesh":
        return cls(int(round(1.0 / h)))

    @property
    def h(self) -> float:
        return 1.0 / self.n_elements

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_elements + 1)

    @property
    def interior(self) -> np.ndarray:
        return self.nodes[1:-1]

    @property
    def n_interior(self) -> int:
        return self.n_elements - 1

    @cached_property
    def full_stiffness(self) -> np.ndarray:
        n, h = self.n_elements + 1, self.h
        K = np.zeros((n, n))
        for e in range(self.n_elements):
            K[e:e + 2, e:e + 2] += np.array([[1.0, -1.0], [-1.0, 1.0]]) / h
        return K

    @cached_property
    def full_mass(self) -> np.ndarray:
        n, h = self.n_elements + 1, self.h
        M = np.zeros((n, n))
        for e in range(self.n_elements):
            M[e:e + 2, e:e + 2] += np.array([[2.0, 1.0], [1.0, 2.0]]) * h / 6
        return M

    @property
    def stiffness(self) -> np.ndarray:
        return self.full_stiffness[1:-1, 1:-1]

    @property
    def mass(self) -> np.ndarray:
        return self.full_mass[1:-1, 1:-1]

    @cached_property
    def triple(self) -> sp.csr_matrix:
        """Sparse map ``u -> vec(M_u)`` with ``M_u[i, k] = int u phi_i phi_k``.

        ``i`` runs over interior nodes, ``k`` over all nodes; ``u`` holds
        interior nodal values. Uses ``int phi^3 = h/4`` and
        ``int phi_a^2 phi_b = h/12`` on each cell.
        """
        h, n_int, p = self.h, self.n_interior, self.n_elements + 1
        entries: dict = {}
        for e in range(self.n_elements):
            loc = (e, e + 1)
            for i in loc:
                for j in loc:
                    for k in loc:
                        val = h / 4 if i == j == k else h / 12
                        entries[(i, j, k)] = entries.get((i, j, k), 0.0) + val
        rows, cols, vals = [], [], []
        for (i, j, k), v in entries.items():
            if 1 <= i <= n_int and 1 <= j <= n_int:
                rows.append((i - 1) * p + k)
                cols.append(j - 1)
                vals.append(v)
        return sp.csr_matrix((vals, (rows, cols)), shape=(n_int * p, n_int))

    def potential_mass(self, theta) -> np.ndarray:
        """``int theta phi_i phi_j`` over interior ``i, j`` for nodal ``theta``."""
        n_int, p = self.n_interior, self.n_elements + 1
        T = self.triple.toarray().reshape(n_int, p, n_int)  # [i, k, j]
        return np.einsum("ikj,k->ij", T, np.asarray(theta, dtype=float))

    def project(self, fn: Callable, n_gauss: int = 5) -> np.ndarray:
        """Load vector ``int fn phi_i`` over interior nodes by Gauss quadrature per cell."""
        xg, wg = np.polynomial.legendre.leggauss(n_gauss)
        h = self.h
        out = np.zeros(self.n_elements + 1)
        for e in range(self.n_elements):
            x = e * h + 0.5 * h * (xg + 1)
            w = 0.5 * h * wg
            vals = np.asarray(fn(x), dtype=float)
            left = (e * h + h - x) / h
            out[e] += np.sum(w * vals * left)
            out[e + 1] += np.sum(w * vals * (1 - left))
        return out[1:-1]

    def l1_distance(self, a, b) -> float:
        """Exact ``int |a - b|`` for nodal P1 functions on all nodes."""
        d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
        d0, d1 = d[:-1], d[1:]
        same = d0 * d1 >= 0
        total = np.where(same, 0.5 * np.abs(d0 + d1),
                         0.5 * (d0**2 + d1**2) / np.where(same, 1.0, np.abs(d0 - d1)))
        return float(self.h * total.sum())


@dataclass(frozen=True)
class WaveSetup:
    """Problem constants; everything else is derived."""

    h: float = 0.01
    t_final: float = 20.0
    dt: float = 1e-3
    kappa: float = 2.0
    noise: bool = True
    noise_scale: float = 0.1
    n_noise_modes: int = 10
    smoothness_weight: float = 6e-5
    size_weight: float = 1.5e-5

    @cached_property
    def mesh(self) -> Mesh:
        return Mesh.from_h(self.h)

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid.from_dt(self.t_final, self.dt)

    @property
    def n_state(self) -> int:
        return 2 * self.mesh.n_interior

    @property
    def field_nodes(self) -> np.ndarray:
        """Interior node indices with ``x`` in ``(0, 0.1]``."""
        x = self.mesh.interior
        return np.nonzero(x <= FIELD_END + 1e-12)[0]

    @cached_property
    def average_weights(self) -> np.ndarray:
        """Rows ``w_k`` over all nodes with ``w_k . v`` the mean of the P1 field over ``J_k``."""
        mesh = self.mesh
        W = np.zeros((N_AVERAGES, mesh.n_elements + 1))
        for k in range(1, N_AVERAGES + 1):
            a = AVERAGE_WIDTH + AVERAGE_WIDTH * k
            for i, c in enumerate(mesh.nodes):
                W[k - 1, i] = hat_integral(c, mesh.h, a, a + AVERAGE_WIDTH) / AVERAGE_WIDTH
        return W

    @cached_property
    def output_matrix(self) -> np.ndarray:
        n_int = self.mesh.n_interior
        idx = self.field_nodes
        C = np.zeros((idx.size + N_AVERAGES, 2 * n_int))
        C[np.arange(idx.size), n_int + idx] = 1.0
        C[idx.size:, n_int:] = self.average_weights[:, 1:-1]
        return C

    @cached_property
    def output_gram(self) -> np.ndarray:
        """Trapezoid ``L^2(0, 0.1)`` weights on the field block, identity on the averages."""
        n_field = self.field_nodes.size
        w = np.full(n_field, self.mesh.h)
        w[-1] *= 0.5  # x = 0.1 closes the interval; x = 0 is a Dirichlet node
        return np.diag(np.concatenate([w, np.ones(N_AVERAGES)]))

    @cached_property
    def regularizer(self) -> np.ndarray:
        mesh = self.mesh
        return self.smoothness_weight * mesh.full_stiffness + self.size_weight * mesh.full_mass

    @property
    def theta_true(self) -> np.ndarray:
        return true_potential(self.mesh.nodes)

    @property
    def z0_true(self) -> np.ndarray:
        x = self.mesh.interior
        return np.concatenate([true_displacement(x), true_velocity(x)])

    def load_vectors(self) -> np.ndarray:
        """Columns ``int b_j phi_i`` over interior nodes."""
        return np.column_stack([self.mesh.project(lambda x, j=j: load_profiles(x)[:, j])
                                for j in range(3)])

    def load_signals(self, seed: int) -> np.ndarray:
        grid = self.grid
        return np.column_stack([sample_gp_input(seed, grid, channel=c).values
                                for c in LOAD_CHANNELS])

    def output_noise(self, seed: int) -> np.ndarray:
        """Field noise at the observed nodes and independent noise on each average."""
        grid = self.grid
        x = self.mesh.interior[self.field_nodes]
        field_noise = sample_spatial_noise(seed, grid, x, self.n_noise_modes,
                                           self.noise_scale, FIELD_NOISE_BASE).values
        avg = np.column_stack([
            sample_ou(seed, grid, self.noise_scale, channel=AVERAGE_NOISE_BASE + k).values
            for k in range(1, N_AVERAGES + 1)
        ])
        return np.column_stack([field_noise.reshape(grid.n_steps + 1, -1), avg])


def _lambda_factory(mesh: Mesh):
    n_int, p = mesh.n_interior, mesh.n_elements + 1
    T = mesh.triple
    M = mesh.mass
    # M is tridiagonal: banded Cholesky in upper storage
    banded = np.zeros((2, n_int))
    banded[0, 1:] = np.diag(M, 1)
    banded[1] = np.diag(M)
    chol = sla.cholesky_banded(banded)

    def lambda_fn(Z):
        Z = np.asarray(Z, dtype=float)
        c = Z.shape[0]
        Mu = (T @ Z[:, :n_int].T).reshape(n_int, p, c)  # [i, k, batch]
        sol = sla.cho_solve_banded((chol, False), Mu.reshape(n_int, p * c))
        out = np.zeros((c, 2 * n_int, p))
        out[:, n_int:, :] = -sol.reshape(n_int, p, c).transpose(2, 0, 1)
        return out

    return lambda_fn


def assemble_wave_family(setup: WaveSetup, loads=None) -> BilinearFamily:
    """Bilinear family of the semi-discrete wave equation.

    ``loads`` is the ``(n_steps + 1, n_interior)`` array of nodal load
    integrals ``int load(t) phi_i``; ``None`` means no load.
    """
    mesh = setup.mesh
    n_int, p = mesh.n_interior, mesh.n_elements + 1
    K, M = mesh.stiffness, mesh.mass
    Minv = np.linalg.inv(M)
    Minv = 0.5 * (Minv + Minv.T)
    A0 = np.block([[np.zeros((n_int, n_int)), np.eye(n_int)],
                   [-Minv @ K, np.zeros((n_int, n_int))]])
    T = mesh.triple.toarray().reshape(n_int, p, n_int)
    deltaA = np.zeros((p, 2 * n_int, 2 * n_int))
    deltaA[:, n_int:, :n_int] = -np.einsum("ab,bkj->kaj", Minv, T)

    def gram_of(theta):
        G = np.zeros((2 * n_int, 2 * n_int))
        G[:n_int, :n_int] = K + np.einsum("ikj,k->ij", T, theta)
        G[n_int:, n_int:] = M
        return G

    f = None
    if loads is not None:
        loads = np.asarray(loads, dtype=float)
        f = np.zeros((loads.shape[0], 2 * n_int))
        f[:, n_int:] = loads @ Minv
    return BilinearFamily(A0, deltaA, setup.output_matrix, InnerProductSpace(setup.output_gram),
                          f, gram_of, _lambda_factory(mesh))


@dataclass
class WaveData:
    family: BilinearFamily
    y: np.ndarray
    grid: TimeGrid
    setup: WaveSetup = field(repr=False)


def make_wave_data(setup: WaveSetup, seed: int) -> WaveData:
    """Loads, truth simulation and noisy outputs for one seed."""
    grid = setup.grid
    loads = setup.load_signals(seed) @ setup.load_vectors().T
    fam = assemble_wave_family(setup, loads)
    nu = setup.output_noise(seed) if setup.noise else None
    traj = simulate_truth(fam, setup.z0_true, setup.theta_true, nu=nu, grid=grid)
    return WaveData(fam, traj.outputs, grid, setup)


def wave_errors(setup: WaveSetup, zeta, theta) -> dict:
    """Parameter ``L^1``, displacement ``H^1``-seminorm and velocity ``L^2`` errors."""
    mesh = setup.mesh
    n_int = mesh.n_interior
    e = np.asarray(zeta) - setup.z0_true
    eu, ev = e[:n_int], e[n_int:]
    return {
        "param_err": mesh.l1_distance(theta, setup.theta_true),
        "displ_err": float(np.sqrt(max(eu @ mesh.stiffness @ eu, 0.0))),
        "vel_err": float(np.sqrt(max(ev @ mesh.mass @ ev, 0.0))),
    }


def run_wave_experiment(seed: int, n_iters: int = 4, kappa=None,
                        setup: WaveSetup | None = None, init: str | EstimatorState = "zero",
                        warmup_sweeps: int = 0, beta: float = 1.0, prior: str = "zero"):
    """Run the joint iteration and tabulate the errors after each iteration.

    ``kappa`` is a constant, a sequence or a callable ``j -> kappa_j``
    (default: the setup's constant gain). ``init`` is ``"zero"``,
    ``"truth"`` or an explicit :class:`EstimatorState`. ``prior`` centers the
    regularizer at ``"zero"`` or at the ``"truth"``; only the latter makes the
    truth an exact fixed point for noise-free data. Returns
    ``(table, final_state, history)`` where table rows are
    ``(iteration, param_err, displ_err, vel_err)``.
    """
    setup = setup or WaveSetup()
    data = make_wave_data(setup, seed)
    p = setup.mesh.n_elements + 1
    if prior not in ("zero", "truth"):
        raise ValueError(f"prior must be 'zero' or 'truth', got {prior!r}")
    theta0 = setup.theta_true if prior == "truth" else np.zeros(p)
    cfg = BilinearEstimatorConfig(setup.kappa if kappa is None else kappa,
                                  setup.regularizer, theta0, beta=beta,
                                  warmup_sweeps=warmup_sweeps)
    if isinstance(init, EstimatorState):
        start = init
    elif init == "zero":
        start = EstimatorState(np.zeros(setup.n_state), np.zeros(p))
    elif init == "truth":
        start = EstimatorState(setup.z0_true, setup.theta_true)
    else:
        raise ValueError(f"init must be 'zero' or 'truth', got {init!r}")
    state, history = run_bilinear(
        cfg, data.family, data.y, data.grid, init=start, max_iters=n_iters,
        metrics=lambda st: wave_errors(setup, st.zeta_hat, st.theta_hat),
    )
    table = np.array([[r["iteration"], r["param_err"], r["displ_err"], r["vel_err"]]
                      for r in history]).reshape(-1, 4)
    return table, state, history


def coarse(setup: WaveSetup, h: float, dt: float | None = None) -> WaveSetup:
    """Same problem on another mesh (and optionally another time step)."""
    return replace(setup, h=h, dt=setup.dt if dt is None else dt)
