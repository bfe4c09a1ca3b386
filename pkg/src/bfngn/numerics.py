"""Shared numerical kernels.

Time integration uses the implicit midpoint rule (Crank-Nicolson for linear
generators). It preserves ``||x||_G`` exactly for G-skew-adjoint generators
and is exactly time reversible, so a backward pass with ``-A`` undoes a
forward pass with ``A``.

All time integrals over ``[0, T]`` use the midpoint rule on the step
midpoints ``t_{i+1/2}``, i.e. the points at which the integrator evaluates
the right-hand side. With that pairing the discrete backward observer is
exactly the discrete adjoint of the forward one.
"""
from __future__ import annotations

import warnings
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla


class StepFailureError(RuntimeError):
    """Raised when ``I - dt/2 M`` is singular for the requested step size."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_i = i * dt`` on ``[0, t_final]``."""

    t_final: float
    n_steps: int

    def __post_init__(self):
        if not self.t_final > 0:
            raise ValueError(f"t_final must be positive, got {self.t_final}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")

    @classmethod
    def from_dt(cls, t_final: float, dt: float) -> "TimeGrid":
        return cls(t_final, int(round(t_final / dt)))

    @property
    def dt(self) -> float:
        return self.t_final / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    @property
    def midpoints(self) -> np.ndarray:
        return (np.arange(self.n_steps) + 0.5) * self.dt

    def quadrature_weights(self) -> np.ndarray:
        """Weights of the midpoint rule, one per step."""
        return np.full(self.n_steps, self.dt)

    def trapezoid_weights(self) -> np.ndarray:
        w = np.full(self.n_steps + 1, self.dt)
        w[0] = w[-1] = 0.5 * self.dt
        return w


@dataclass(frozen=True, eq=False)
class InnerProductSpace:
    """R^dim with inner product ``<x, G y>``."""

    gram: np.ndarray
    _chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        g = np.atleast_2d(np.asarray(self.gram, dtype=float))
        if g.shape[0] != g.shape[1]:
            raise ValueError(f"gram must be square, got {g.shape}")
        scale = max(np.abs(g).max(), 1e-300)
        if np.abs(g - g.T).max() > 1e-12 * scale:
            raise ValueError("gram matrix is not symmetric")
        g = 0.5 * (g + g.T)
        try:
            chol = np.linalg.cholesky(g)
        except np.linalg.LinAlgError as exc:
            raise ValueError("gram matrix is not positive definite") from exc
        object.__setattr__(self, "gram", g)
        object.__setattr__(self, "_chol", chol)

    @classmethod
    def euclidean(cls, dim: int) -> "InnerProductSpace":
        return cls(np.eye(dim))

    @property
    def dim(self) -> int:
        return self.gram.shape[0]

    @property
    def cholesky(self) -> np.ndarray:
        """Lower factor ``L`` with ``G = L L^T``."""
        return self._chol

    def inner(self, x, y) -> float:
        return float(np.asarray(x) @ self.gram @ np.asarray(y))

    def norm(self, x) -> float:
        x = np.asarray(x)
        return float(np.sqrt(max(x @ self.gram @ x, 0.0)))


def _as_space(G, dim: int) -> InnerProductSpace:
    if G is None:
        return InnerProductSpace.euclidean(dim)
    if isinstance(G, InnerProductSpace):
        return G
    return InnerProductSpace(np.asarray(G, dtype=float))


class Propagator:
    """Implicit-midpoint stepper for ``x' = M x + load``.

    One step reads ``x_{i+1} = R x_i + dt S load_{i+1/2}`` with
    ``S = (I - dt/2 M)^{-1}`` and ``R = S (I + dt/2 M)``. The state may be a
    vector or an ``n x p`` matrix propagated column-wise.
    """

    def __init__(self, generator: np.ndarray, dt: float):
        M = np.atleast_2d(np.asarray(generator, dtype=float))
        if not dt > 0:
            raise ValueError(f"dt must be positive, got {dt}")
        n = M.shape[0]
        eye = np.eye(n)
        lhs = eye - 0.5 * dt * M
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            lu, piv = sla.lu_factor(lhs, check_finite=True)
        diag = np.abs(np.diag(lu))
        if diag.min() <= 1e-13 * max(diag.max(), 1.0):
            raise StepFailureError(
                "I - dt/2*M is singular; dt is too large for the generator spectrum"
            )
        self.generator = M
        self.dt = float(dt)
        self.step_matrix = sla.lu_solve((lu, piv), eye + 0.5 * dt * M)
        self.load_matrix = sla.lu_solve((lu, piv), dt * eye)

    @property
    def dim(self) -> int:
        return self.generator.shape[0]

    def step(self, x, load_mid=None):
        out = self.step_matrix @ x
        if load_mid is not None:
            out = out + self.load_matrix @ load_mid
        return out

    def run(self, x0, n_steps: int, loads_mid=None) -> np.ndarray:
        """Return the states at all ``n_steps + 1`` nodes.

        ``loads_mid`` holds one load per step (shape ``(n_steps, n)``), or
        ``None`` for a free response.
        """
        x0 = np.asarray(x0, dtype=float)
        out = np.empty((n_steps + 1,) + x0.shape)
        out[0] = x0
        R = self.step_matrix
        if loads_mid is None:
            for i in range(n_steps):
                out[i + 1] = R @ out[i]
            return out
        loads_mid = np.asarray(loads_mid, dtype=float)
        if loads_mid.shape[0] != n_steps:
            raise ValueError(
                f"expected {n_steps} midpoint loads, got {loads_mid.shape[0]}"
            )
        forced = np.einsum("ij,tj...->ti...", self.load_matrix, loads_mid)
        for i in range(n_steps):
            out[i + 1] = R @ out[i] + forced[i]
        return out


_CACHE_SIZE = 32
_propagators: "OrderedDict[tuple, Propagator]" = OrderedDict()


def propagator(generator: np.ndarray, dt: float) -> Propagator:
    """Cached :class:`Propagator` keyed on the generator's bytes and ``dt``."""
    M = np.ascontiguousarray(np.atleast_2d(generator), dtype=float)
    key = (M.shape, M.tobytes(), float(dt))
    prop = _propagators.get(key)
    if prop is None:
        prop = Propagator(M, dt)
        _propagators[key] = prop
        if len(_propagators) > _CACHE_SIZE:
            _propagators.popitem(last=False)
    else:
        _propagators.move_to_end(key)
    return prop


def midpoint_values(nodes: np.ndarray) -> np.ndarray:
    """Average consecutive node samples onto step midpoints."""
    nodes = np.asarray(nodes, dtype=float)
    return 0.5 * (nodes[:-1] + nodes[1:])


def step_lti(A, load, x, dt: float) -> np.ndarray:
    """One implicit-midpoint step of ``x' = A x + load``.

    ``load`` is ``None`` or a pair of endpoint values ``(load(t), load(t+dt))``;
    their average is used at the midpoint.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    A = np.atleast_2d(np.asarray(A, dtype=float))
    x = np.asarray(x, dtype=float)
    n = A.shape[0]
    lhs = np.eye(n) - 0.5 * dt * A
    rhs = x + 0.5 * dt * (A @ x)
    if load is not None:
        l0, l1 = load
        rhs = rhs + dt * 0.5 * (np.asarray(l0, dtype=float) + np.asarray(l1, dtype=float))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(lhs)
    diag = np.abs(np.diag(lu))
    if diag.min() <= 1e-13 * max(diag.max(), 1.0):
        raise StepFailureError("I - dt/2*A is singular for this dt")
    return sla.lu_solve((lu, piv), rhs)


def weighted_adjoint(Op, G_in=None, G_out=None) -> np.ndarray:
    """Adjoint ``G_in^{-1} Op^T G_out`` of ``Op: (R^n, G_in) -> (R^m, G_out)``."""
    Op = np.atleast_2d(np.asarray(Op, dtype=float))
    m, n = Op.shape
    G_in = _as_space(G_in, n)
    G_out = _as_space(G_out, m)
    if G_in.dim != n or G_out.dim != m:
        raise ValueError(
            f"operator shape {Op.shape} does not match spaces ({G_in.dim}, {G_out.dim})"
        )
    return sla.cho_solve((G_in.cholesky, True), Op.T @ G_out.gram)


def operator_norm(Op, G_in=None, G_out=None) -> float:
    """Induced norm of ``Op`` between weighted spaces."""
    Op = np.atleast_2d(np.asarray(Op, dtype=float))
    m, n = Op.shape
    G_in = _as_space(G_in, n)
    G_out = _as_space(G_out, m)
    gram = Op.T @ G_out.gram @ Op
    lam = sla.eigh(0.5 * (gram + gram.T), G_in.gram, eigvals_only=True)
    return float(np.sqrt(max(lam[-1], 0.0)))


def observability_gramian(A, C, grid: TimeGrid, G_Y=None) -> np.ndarray:
    """``sum_i dt (C Phi_{i+1/2})^T G_Y (C Phi_{i+1/2})`` for the discrete flow of ``A``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    G_Y = _as_space(G_Y, C.shape[0])
    prop = propagator(A, grid.dt)
    n = A.shape[0]
    phi = np.eye(n)
    W = np.zeros((n, n))
    for _ in range(grid.n_steps):
        nxt = prop.step_matrix @ phi
        out = C @ (0.5 * (phi + nxt))
        W += out.T @ G_Y.gram @ out
        phi = nxt
    W *= grid.dt
    return 0.5 * (W + W.T)


def observability_constant(A, C, grid: TimeGrid, G_X=None, G_Y=None) -> float:
    """Largest ``gamma`` with ``int_0^T ||C e^{At} z||^2 >= gamma^2 ||z||^2``.

    Computed from the smallest generalized eigenvalue of the discrete
    observability Gramian against ``G_X``. Zero means unobservable at the
    grid resolution.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    G_X = _as_space(G_X, A.shape[0])
    W = observability_gramian(A, C, grid, G_Y)
    lam = sla.eigh(W, G_X.gram, eigvals_only=True)
    return float(np.sqrt(max(lam[0], 0.0)))


def spectral_radius(M) -> float:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0:
        return 0.0
    return float(np.abs(np.linalg.eigvals(M)).max())


def block_spectral_radius_bound(D, E, F, G) -> tuple[float, float]:
    """Spectral radius of ``[[D, E], [F, G]]`` and the block perturbation bound.

    Returns ``(rho(block), max(rho(D), rho(G)) + sqrt(||E|| ||F||))`` with
    spectral 2-norms.
    """
    D, E, F, G = (np.atleast_2d(np.asarray(X, dtype=float)) for X in (D, E, F, G))
    if D.shape[0] != D.shape[1] or G.shape[0] != G.shape[1]:
        raise ValueError("diagonal blocks must be square")
    if E.shape != (D.shape[0], G.shape[0]) or F.shape != (G.shape[0], D.shape[0]):
        raise ValueError("off-diagonal block shapes are inconsistent")
    lhs = spectral_radius(np.block([[D, E], [F, G]]))
    rhs = max(spectral_radius(D), spectral_radius(G)) + np.sqrt(
        np.linalg.norm(E, 2) * np.linalg.norm(F, 2)
    )
    return lhs, float(rhs)


def matrix_sqrt_psd(U) -> np.ndarray:
    """Symmetric square root of a positive semidefinite matrix."""
    U = np.atleast_2d(np.asarray(U, dtype=float))
    lam, V = np.linalg.eigh(0.5 * (U + U.T))
    return (V * np.sqrt(np.clip(lam, 0.0, None))) @ V.T
