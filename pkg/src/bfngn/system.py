"""Plant definitions, noise generators and ground-truth simulation."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.signal import lfilter

from .numerics import (
    InnerProductSpace,
    TimeGrid,
    midpoint_values,
    propagator,
    weighted_adjoint,
    _as_space,
)

# drift, diffusion and initial law of the auxiliary input process
GP_DRIFT = np.array([[0.0, 1.0], [-1.9, -2.7]])
GP_DIFFUSION = np.array([0.0, 1.0])
GP_INITIAL_COV = np.array([[4.0, 2.0], [2.0, 11.0]]) / 59.8
GP_OUTPUT = np.array([4.0, 0.0])

OU_RATE = 12.5
OU_DIFFUSION = 2.5
OU_STATIONARY_VAR = OU_DIFFUSION**2 / (2.0 * OU_RATE)


def skew_residual(A, G) -> float:
    """``||A^T G + G A|| / ||G A||`` (Frobenius); zero for G-skew-adjoint ``A``."""
    A = np.asarray(A, dtype=float)
    G = np.asarray(G, dtype=float)
    GA = G @ A
    denom = np.linalg.norm(GA)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(GA.T + GA) / denom)


def _node_array(values, n_nodes: int, trailing: tuple, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.shape == trailing:
        return np.broadcast_to(arr, (n_nodes,) + trailing)
    if arr.shape != (n_nodes,) + trailing:
        raise ValueError(
            f"{name} must have shape {trailing} or {(n_nodes,) + trailing}, got {arr.shape}"
        )
    return arr


@dataclass(frozen=True, eq=False)
class LtiSystem:
    """``z' = A z + B(t) theta + f(t)``, ``y = C z``.

    ``B`` is either a constant ``n x p`` matrix or sampled on the grid nodes
    with shape ``(n_steps + 1, n, p)``; ``f`` likewise ``(n,)`` or
    ``(n_steps + 1, n)``.
    """

    A: np.ndarray
    C: np.ndarray
    B: np.ndarray | None = None
    G_X: InnerProductSpace | None = None
    G_Y: InnerProductSpace | None = None
    f: np.ndarray | None = None
    skew: bool = False

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        if A.shape[0] != A.shape[1] or C.shape[1] != A.shape[0]:
            raise ValueError(f"inconsistent shapes A {A.shape}, C {C.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "G_X", _as_space(self.G_X, A.shape[0]))
        object.__setattr__(self, "G_Y", _as_space(self.G_Y, C.shape[0]))
        if self.B is not None:
            B = np.asarray(self.B, dtype=float)
            if B.ndim == 1:
                B = B[:, None]
            if B.shape[-2] != A.shape[0]:
                raise ValueError(f"B has {B.shape[-2]} rows, state dim is {A.shape[0]}")
            object.__setattr__(self, "B", B)
        if self.skew and skew_residual(A, self.G_X.gram) > 1e-10:
            raise ValueError("A is not skew-adjoint in the G_X inner product")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.C.shape[0]

    @property
    def p(self) -> int:
        return 0 if self.B is None else self.B.shape[-1]

    def source_nodes(self, grid: TimeGrid) -> np.ndarray:
        """``B`` sampled on the nodes, shape ``(n_steps + 1, n, p)``."""
        if self.B is None:
            return np.zeros((grid.n_steps + 1, self.n, 0))
        return _node_array(self.B, grid.n_steps + 1, self.B.shape[-2:], "B")

    def load_nodes(self, grid: TimeGrid) -> np.ndarray:
        if self.f is None:
            return np.zeros((grid.n_steps + 1, self.n))
        return _node_array(self.f, grid.n_steps + 1, (self.n,), "f")

    def forcing_nodes(self, theta, grid: TimeGrid) -> np.ndarray:
        """Known load ``f + B theta`` on the nodes."""
        load = self.load_nodes(grid)
        if self.B is None:
            return np.array(load)
        theta = np.asarray(theta, dtype=float)
        return load + np.einsum("tij,j->ti", self.source_nodes(grid), theta)

    @cached_property
    def C_adjoint(self) -> np.ndarray:
        return weighted_adjoint(self.C, self.G_X, self.G_Y)


@dataclass(frozen=True, eq=False)
class BilinearFamily:
    """``A(theta) = A0 + sum_k theta_k dA_k`` with known load ``f``.

    ``gram_of`` maps a parameter to the state Gram matrix; ``None`` means the
    Euclidean inner product. ``lambda_fn`` optionally replaces the dense
    evaluation of ``z -> [dA_1 z, ..., dA_p z]`` by a structured one; it maps
    a batch of states ``(c, n)`` to ``(c, n, p)``.
    """

    A0: np.ndarray
    deltaA: np.ndarray
    C: np.ndarray
    G_Y: InnerProductSpace | None = None
    f: np.ndarray | None = None
    gram_of: Callable[[np.ndarray], np.ndarray] | None = None
    lambda_fn: Callable[[np.ndarray], np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self):
        A0 = np.atleast_2d(np.asarray(self.A0, dtype=float))
        dA = np.asarray(self.deltaA, dtype=float)
        if dA.ndim == 2:
            dA = dA[None]
        if dA.shape[1:] != A0.shape:
            raise ValueError(f"deltaA blocks {dA.shape[1:]} do not match A0 {A0.shape}")
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        object.__setattr__(self, "A0", A0)
        object.__setattr__(self, "deltaA", dA)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "G_Y", _as_space(self.G_Y, C.shape[0]))

    @property
    def n(self) -> int:
        return self.A0.shape[0]

    @property
    def p(self) -> int:
        return self.deltaA.shape[0]

    @property
    def m(self) -> int:
        return self.C.shape[0]

    def A(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        return self.A0 + np.tensordot(theta, self.deltaA, axes=1)

    def gram(self, theta) -> InnerProductSpace:
        if self.gram_of is None:
            return InnerProductSpace.euclidean(self.n)
        return InnerProductSpace(self.gram_of(np.asarray(theta, dtype=float)))

    def lambda_matrix(self, z) -> np.ndarray:
        """The ``n x p`` matrix ``xi -> (sum_k xi_k dA_k) z``."""
        return self.lambda_batch(np.asarray(z, dtype=float)[None])[0]

    def lambda_batch(self, Z) -> np.ndarray:
        """:meth:`lambda_matrix` for each row of ``Z``, shape ``(c, n, p)``."""
        Z = np.asarray(Z, dtype=float)
        if self.lambda_fn is not None:
            return self.lambda_fn(Z)
        return np.einsum("kij,cj->cik", self.deltaA, Z)

    def load_nodes(self, grid: TimeGrid) -> np.ndarray:
        if self.f is None:
            return np.zeros((grid.n_steps + 1, self.n))
        return _node_array(self.f, grid.n_steps + 1, (self.n,), "f")

    def at(self, theta) -> LtiSystem:
        """The linear system with ``A(theta)`` and the state norm of ``theta``."""
        return LtiSystem(self.A(theta), self.C, None, self.gram(theta), self.G_Y, self.f)

    @cached_property
    def delta_norm(self) -> float:
        """Bound ``M`` with ``||sum_k xi_k dA_k||_2 <= M ||xi||_2`` (stacked-map norm)."""
        stacked = np.einsum("kij,kil->jl", self.deltaA, self.deltaA)
        return float(np.sqrt(max(np.linalg.eigvalsh(stacked)[-1], 0.0)))


@dataclass(frozen=True, eq=False)
class NoiseRealization:
    """A signal sampled on the grid nodes (``values[i]`` at ``t_i``)."""

    values: np.ndarray
    seed: int | None = None
    t: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))

    def to_csv(self, path) -> None:
        vals = self.values.reshape(self.values.shape[0], -1)
        t = self.t if self.t is not None else np.arange(vals.shape[0], dtype=float)
        header = ",".join(["t"] + [f"value_{k}" for k in range(vals.shape[1])])
        if self.seed is not None:
            header = f"seed={self.seed}\n" + header
        np.savetxt(path, np.column_stack([t, vals]), delimiter=",", fmt="%.17g",
                   header=header, comments="# ")

    @classmethod
    def from_csv(cls, path) -> "NoiseRealization":
        seed = None
        with open(path) as fh:
            first = fh.readline()
        if first.startswith("# seed="):
            seed = int(first.split("=", 1)[1])
        data = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
        vals = data[:, 1:]
        if vals.shape[1] == 1:
            vals = vals[:, 0]
        return cls(vals, seed, data[:, 0])


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray
    outputs: np.ndarray

    def __post_init__(self):
        if len(self.states) != len(self.outputs):
            raise ValueError("states and outputs must have equal length")


def rng_stream(seed: int, channel: int = 0) -> np.random.Generator:
    """Independent PCG64 stream for ``(seed, channel)``.

    Streams come from ``SeedSequence(seed, spawn_key=(channel,))``, so
    adding channels never perturbs existing ones.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(channel,))))


def sample_gp_input(seed: int, grid: TimeGrid, channel: int = 0, substeps: int = 10,
                    initial: str = "fixed") -> NoiseRealization:
    """Smooth Gaussian input ``u = [4 0] r`` with ``dr = F r dt + (0, 1) dw``.

    Euler-Maruyama on a grid refined ``substeps`` times, subsampled back.
    ``initial="fixed"`` draws ``r(0)`` from ``N(0, [[4, 2], [2, 11]] / 59.8)``;
    ``initial="stationary"`` uses the Lyapunov solution instead.
    """
    rng = rng_stream(seed, channel)
    if initial == "fixed":
        cov0 = GP_INITIAL_COV
    elif initial == "stationary":
        cov0 = gp_stationary_cov()
    else:
        raise ValueError(f"unknown initial law {initial!r}")
    r1, r2 = np.linalg.cholesky(cov0) @ rng.standard_normal(2)
    h = grid.dt / substeps
    sq = np.sqrt(h)
    dw = rng.standard_normal(grid.n_steps * substeps) * sq
    (a11, a12), (a21, a22) = GP_DRIFT
    u = np.empty(grid.n_steps + 1)
    u[0] = GP_OUTPUT[0] * r1 + GP_OUTPUT[1] * r2
    k = 0
    for i in range(grid.n_steps):
        for _ in range(substeps):
            r1, r2 = (r1 + h * (a11 * r1 + a12 * r2),
                      r2 + h * (a21 * r1 + a22 * r2) + dw[k])
            k += 1
        u[i + 1] = GP_OUTPUT[0] * r1 + GP_OUTPUT[1] * r2
    return NoiseRealization(u, seed, grid.nodes)


def gp_stationary_cov() -> np.ndarray:
    from scipy.linalg import solve_continuous_lyapunov

    b = GP_DIFFUSION[:, None]
    return solve_continuous_lyapunov(GP_DRIFT, -b @ b.T)


def sample_ou(seed: int, grid: TimeGrid, scale: float = 1.0, channel: int = 0) -> NoiseRealization:
    """Stationary ``dv = -12.5 v dt + 2.5 dw`` sampled exactly, times ``scale``."""
    rng = rng_stream(seed, channel)
    a = np.exp(-OU_RATE * grid.dt)
    s = np.sqrt(OU_STATIONARY_VAR * (1.0 - a * a))
    drive = rng.standard_normal(grid.n_steps + 1)
    drive[0] *= np.sqrt(OU_STATIONARY_VAR)
    drive[1:] *= s
    v = lfilter([1.0], [1.0, -a], drive)
    return NoiseRealization(scale * v, seed, grid.nodes)


def spatial_noise_modes(seed: int, grid: TimeGrid, n_modes: int = 10, scale: float = 0.1,
                        channel_base: int = 100) -> np.ndarray:
    """Mode coefficients ``scale / j * v_j(t)``, shape ``(n_steps + 1, n_modes)``."""
    if n_modes < 1:
        raise ValueError("n_modes must be >= 1")
    cols = [sample_ou(seed, grid, scale / j, channel=channel_base + j).values
            for j in range(1, n_modes + 1)]
    return np.column_stack(cols)


def spatial_profiles(x, n_modes: int = 10) -> np.ndarray:
    """``sin((2j - 1) pi x / 0.2)`` for ``j = 1..n_modes``, shape ``(len(x), n_modes)``."""
    x = np.asarray(x, dtype=float)
    j = np.arange(1, n_modes + 1)
    return np.sin(np.outer(x, 2 * j - 1) * np.pi / 0.2)


def sample_spatial_noise(seed: int, grid: TimeGrid, x, n_modes: int = 10, scale: float = 0.1,
                         channel_base: int = 100) -> NoiseRealization:
    """Truncated sine series of independent OU coefficients at points ``x``."""
    modes = spatial_noise_modes(seed, grid, n_modes, scale, channel_base)
    return NoiseRealization(modes @ spatial_profiles(x, n_modes).T, seed, grid.nodes)


def _noise_values(noise, shape) -> np.ndarray | None:
    if noise is None:
        return None
    vals = noise.values if isinstance(noise, NoiseRealization) else np.asarray(noise, dtype=float)
    return vals.reshape(shape)


def simulate_truth(sys, z0, theta, eta=None, nu=None, grid: TimeGrid | None = None) -> Trajectory:
    """Simulate the plant and its measured output.

    For an :class:`LtiSystem` the state obeys ``z' = A z + f + B theta + eta``;
    for a :class:`BilinearFamily` it obeys ``z' = A(theta) z + f + eta``.
    """
    if grid is None:
        raise ValueError("a TimeGrid is required")
    n_nodes = grid.n_steps + 1
    if isinstance(sys, BilinearFamily):
        A = sys.A(theta)
        load = np.array(sys.load_nodes(grid))
    else:
        A = sys.A
        load = sys.forcing_nodes(theta, grid)
    eta_v = _noise_values(eta, (n_nodes, sys.n))
    if eta_v is not None:
        load = load + eta_v
    states = propagator(A, grid.dt).run(np.asarray(z0, dtype=float), grid.n_steps,
                                        midpoint_values(load))
    outputs = states @ sys.C.T
    nu_v = _noise_values(nu, (n_nodes, sys.m))
    if nu_v is not None:
        outputs = outputs + nu_v
    return Trajectory(states, outputs)


def save_trajectory_csv(traj: Trajectory, grid: TimeGrid, path) -> None:
    data = np.column_stack([grid.nodes, traj.states, traj.outputs])
    n, m = traj.states.shape[1], traj.outputs.shape[1]
    header = ",".join(["t"] + [f"z_{i}" for i in range(n)] + [f"y_{i}" for i in range(m)])
    np.savetxt(Path(path), data, delimiter=",", fmt="%.17g", header=header, comments="")
