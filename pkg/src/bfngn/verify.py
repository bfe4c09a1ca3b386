"""Randomized verification suites for the lemmas, fixed point, contraction and adjoints."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla
from scipy.stats import ortho_group

from .linear import (
    CostSpec,
    EstimatorState,
    assemble_gamma,
    bfn_gn_step_linear,
    contraction_constants,
    linear_map_matrix,
    oracle_minimize,
)
from .numerics import (
    TimeGrid,
    block_spectral_radius_bound,
    observability_constant,
    operator_norm,
    weighted_adjoint,
)
from .observer import lemma1_check
from .system import LtiSystem, sample_ou, simulate_truth

SUITES = ("lemma1", "lemma2", "lemma4", "fixed_point", "contraction", "adjoint")


@dataclass
class CheckResult:
    name: str
    passed: bool
    cases: int
    worst: float
    detail: str = ""
    failures: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "cases": self.cases,
                "worst_margin": self.worst, "detail": self.detail,
                "failures": self.failures[:5]}


def random_gram(rng, n: int, lo: float = 0.5, hi: float = 2.0) -> np.ndarray:
    V = ortho_group.rvs(n, random_state=rng) if n > 1 else np.ones((1, 1))
    return V @ np.diag(rng.uniform(lo, hi, n)) @ V.T


def random_skew_system(rng, n: int = 4, p: int = 2, m: int = 1, t_final: float = 20.0,
                       n_steps: int = 2000) -> tuple[LtiSystem, TimeGrid]:
    """Conservative system with a random energy norm and modulated sources.

    ``A = G^{-1} S`` with ``S`` skew is ``G``-skew-adjoint. Source columns are
    fixed directions modulated by sinusoids of distinct frequencies, which
    keeps initial state and parameter jointly identifiable.
    """
    G = random_gram(rng, n)
    S = rng.standard_normal((n, n))
    A = np.linalg.solve(G, S - S.T)
    C = rng.standard_normal((m, n))
    grid = TimeGrid(t_final, n_steps)
    freqs = rng.uniform(0.5, 3.0, p)
    phases = rng.uniform(0, 2 * np.pi, p)
    mod = np.sin(np.outer(grid.nodes, freqs) + phases)
    B = rng.standard_normal((n, p))[None] * mod[:, None, :]
    return LtiSystem(A, C, B, G, None, skew=True), grid


def noisy_problem(seed: int, noise_scale: float = 0.1, delta: float = 1e-2, kappa: float = 0.5,
                  **kw) -> tuple[LtiSystem, TimeGrid, CostSpec, np.ndarray, np.ndarray]:
    """Random skew system, random truth and OU output noise (channel 1)."""
    rng = np.random.default_rng(seed)
    sys, grid = random_skew_system(rng, **kw)
    z0 = rng.standard_normal(sys.n)
    theta = rng.standard_normal(sys.p)
    nu = np.column_stack([sample_ou(seed, grid, noise_scale, channel=1 + k).values
                          for k in range(sys.m)])
    y = simulate_truth(sys, z0, theta, nu=nu, grid=grid).outputs
    spec = CostSpec(np.zeros(sys.p), delta * np.eye(sys.p), y, kappa=kappa)
    return sys, grid, spec, z0, theta


def _result(name, margins, detail, tol=0.0) -> CheckResult:
    margins = np.asarray(margins, dtype=float)
    bad = [int(i) for i in np.nonzero(margins < -tol)[0]]
    return CheckResult(name, not bad, margins.size, float(margins.min()), detail, bad)


def check_lemma1(n_cases: int = 50, seed: int = 0) -> CheckResult:
    """Closed-loop observability constant never falls below the perturbation bound."""
    rng = np.random.default_rng(seed)
    margins = []
    for _ in range(n_cases):
        n = int(rng.integers(2, 6))
        sys, grid = random_skew_system(rng, n=n, p=1, m=int(rng.integers(1, 3)),
                                       t_final=10.0, n_steps=500)
        K = rng.uniform(0.0, 2.0) * sys.C_adjoint
        gamma, bound = lemma1_check(sys, K, grid)
        margins.append((gamma - bound) / max(bound, 1e-300))
    return _result("lemma1", margins, "gamma(A - KC) >= gamma0 sqrt2 / (sqrt2 + T|C||K|)", 1e-10)


def coercivity_margin(sys: LtiSystem, spec: CostSpec, grid: TimeGrid) -> tuple[float, float]:
    """``(lambda_min(Gamma^* Gamma), epsilon)`` for one configuration.

    ``Gamma^*`` is taken with respect to ``G_X`` on states and the Euclidean
    parameter space; ``gamma`` is the closed-loop observability constant.
    """
    gam = assemble_gamma(spec, sys, grid)
    metric = sla.block_diag(sys.G_X.gram, np.eye(spec.theta0.size))
    normal = gam.matrix.T @ gam.matrix
    lam_min = sla.eigh(0.5 * (normal + normal.T), metric, eigvals_only=True)[0]
    K = spec.kappa * sys.C_adjoint
    gamma = observability_constant(sys.A - K @ sys.C, sys.C, grid, sys.G_X, sys.G_Y)
    P = np.linalg.norm(gam.param_block, 2)
    d = spec.delta
    eps = 0.5 * min(d, gamma**2 * d / (P**2 + d))
    return float(lam_min), float(eps)


def check_lemma2(n_cases: int = 50, seed: int = 1) -> CheckResult:
    """Strict convexity: ``lambda_min(Gamma^* Gamma) >= epsilon``."""
    rng = np.random.default_rng(seed)
    margins = []
    for _ in range(n_cases):
        sys, grid = random_skew_system(rng, n=int(rng.integers(2, 5)), p=int(rng.integers(1, 3)),
                                       t_final=10.0, n_steps=500)
        delta = 10 ** rng.uniform(-3, 0)
        spec = CostSpec(np.zeros(sys.p), delta * np.eye(sys.p),
                        np.zeros((grid.n_steps + 1, sys.m)), kappa=rng.uniform(0.0, 2.0))
        lam, eps = coercivity_margin(sys, spec, grid)
        margins.append((lam - eps) / eps)
    return _result("lemma2", margins, "lambda_min(Gamma*Gamma) >= 1/2 min(d, g^2 d / (|P|^2 + d))",
                   1e-10)


def check_lemma4(n_cases: int = 200, seed: int = 2) -> CheckResult:
    """``rho([[D, E], [F, G]]) <= max(rho(D), rho(G)) + sqrt(||E|| ||F||)``."""
    rng = np.random.default_rng(seed)
    margins = []
    for _ in range(n_cases):
        a, b = (int(v) for v in rng.integers(1, 7, size=2))
        scale = 10 ** rng.uniform(-3, 1)
        D = rng.standard_normal((a, a))
        G = rng.standard_normal((b, b))
        E = scale * rng.standard_normal((a, b))
        F = scale * rng.standard_normal((b, a))
        lhs, rhs = block_spectral_radius_bound(D, E, F, G)
        margins.append((rhs - lhs) / max(rhs, 1e-300))
    return _result("lemma4", margins, "block spectral radius bound", 1e-12)


def check_fixed_point(n_cases: int = 5, seed: int = 3) -> CheckResult:
    """One step at the oracle minimizer moves the estimate by < 1e-8 relative."""
    margins = []
    for k in range(n_cases):
        sys, grid, spec, _, _ = noisy_problem(seed * 1000 + k, t_final=10.0, n_steps=1000)
        zo, to = oracle_minimize(spec, sys, grid)
        st = bfn_gn_step_linear(EstimatorState(zo, to), spec, sys, spec.kappa, grid)
        x = np.concatenate([zo, to])
        moved = np.linalg.norm(np.concatenate([st.zeta_hat, st.theta_hat]) - x) / np.linalg.norm(x)
        margins.append(1.0 - moved / 1e-8)
    return _result("fixed_point", margins, "oracle minimizer is a fixed point to 1e-8")


def contraction_margins(sys: LtiSystem, spec: CostSpec, grid: TimeGrid,
                        scales=(0.01, 0.02, 0.05)) -> list[dict]:
    """Measured ``G_X`` norm of the state update map against ``1 - 0.75 alpha kappa``.

    Gains are ``c / gamma^2`` for each ``c`` in ``scales``.
    """
    consts = contraction_constants(spec, sys, grid)
    out = []
    for c in scales:
        kappa = c / consts["gamma"] ** 2
        g = linear_map_matrix(spec, sys, kappa, grid)
        factor = operator_norm(g, sys.G_X, sys.G_X)
        bound = 1.0 - 0.75 * consts["alpha"] * kappa
        out.append({"scale": c, "kappa": kappa, "factor": factor, "bound": bound,
                    "alpha": consts["alpha"]})
    return out


def check_contraction(n_cases: int = 3, seed: int = 4) -> CheckResult:
    margins = []
    for k in range(n_cases):
        sys, grid, spec, _, _ = noisy_problem(seed * 1000 + k, t_final=10.0, n_steps=1000)
        for rec in contraction_margins(sys, spec, grid):
            margins.append(rec["bound"] - rec["factor"])
    return _result("contraction", margins, "||g|| <= 1 - 0.75 alpha kappa")


def check_adjoint(n_cases: int = 50, seed: int = 5,
                  adjoint_fn: Callable = weighted_adjoint) -> CheckResult:
    """``<C x, y>_{G_Y} = <x, C^* y>_{G_X}`` for random operators and metrics."""
    rng = np.random.default_rng(seed)
    margins = []
    for _ in range(n_cases):
        n, m = (int(v) for v in rng.integers(1, 6, size=2))
        GX, GY = random_gram(rng, n), random_gram(rng, m)
        C = rng.standard_normal((m, n))
        x, y = rng.standard_normal(n), rng.standard_normal(m)
        Cs = adjoint_fn(C, GX, GY)
        lhs = (C @ x) @ GY @ y
        rhs = x @ GX @ (Cs @ y)
        scale = np.linalg.norm(C) * np.linalg.norm(x) * np.linalg.norm(y) * 10
        margins.append(1.0 - abs(lhs - rhs) / (1e-10 * scale))
    return _result("adjoint", margins, "weighted adjoint identity to 1e-10")


def run_suites(only=None, seed: int = 0, adjoint_fn: Callable = weighted_adjoint) -> list[CheckResult]:
    """Run the named suites (all by default); ``seed`` offsets every suite's stream."""
    names = SUITES if only is None else ([only] if isinstance(only, str) else list(only))
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ValueError(f"unknown suite(s) {unknown}; choose from {', '.join(SUITES)}")
    runners = {
        "lemma1": lambda: check_lemma1(seed=seed),
        "lemma2": lambda: check_lemma2(seed=seed + 1),
        "lemma4": lambda: check_lemma4(seed=seed + 2),
        "fixed_point": lambda: check_fixed_point(seed=seed + 3),
        "contraction": lambda: check_contraction(seed=seed + 4),
        "adjoint": lambda: check_adjoint(seed=seed + 5, adjoint_fn=adjoint_fn),
    }
    return [runners[name]() for name in names]
