import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bfngn.experiments.oscillator import OscillatorSetup
from bfngn.numerics import TimeGrid
from bfngn.observer import (
    ObserverConfig,
    backward_observe,
    damping_gains,
    forward_observe,
    lemma1_check,
    spectral_abscissa,
)
from bfngn.system import LtiSystem, sample_gp_input, simulate_truth
from bfngn.verify import random_skew_system


@pytest.fixture(scope="module")
def oscillator():
    setup = OscillatorSetup()
    grid = setup.grid
    u = sample_gp_input(0, grid, channel=1).values
    plant, _ = setup.systems(u)
    z0 = np.random.default_rng(0).standard_normal(plant.n)
    theta = np.ones(plant.p)
    y = simulate_truth(plant, z0, theta, grid=grid).outputs
    source = plant.forcing_nodes(theta, grid)
    return plant, grid, z0, y, source


def test_open_loop_from_truth_is_exact():
    rng = np.random.default_rng(0)
    sys, grid = random_skew_system(rng)
    z0, theta = rng.standard_normal(sys.n), rng.standard_normal(sys.p)
    traj = simulate_truth(sys, z0, theta, grid=grid)
    est = forward_observe(sys, ObserverConfig(0.0), traj.outputs, sys.forcing_nodes(theta, grid),
                          z0, grid)
    np.testing.assert_array_equal(est.states, traj.states)


def test_feedback_contracts_free_response():
    rng = np.random.default_rng(1)
    sys, grid = random_skew_system(rng)
    zeta = rng.standard_normal(sys.n)
    est = forward_observe(sys, ObserverConfig(0.5), np.zeros((grid.n_steps + 1, 1)), None,
                          zeta, grid)
    assert sys.G_X.norm(est.states[-1]) < sys.G_X.norm(zeta)


def test_oscillator_feedback_reduces_tracking_error(oscillator):
    plant, grid, z0, y, source = oscillator
    zeta = np.zeros(plant.n)
    truth = simulate_truth(plant, z0, np.ones(plant.p), grid=grid).states

    def l2_error(kappa):
        est = forward_observe(plant, ObserverConfig(kappa), y, source, zeta, grid).states
        diff = np.einsum("ti,ij,tj->t", est - truth, plant.G_X.gram, est - truth)
        return np.sqrt(np.sum(0.5 * (diff[:-1] + diff[1:])) * grid.dt)

    assert l2_error(1.0) < l2_error(0.0)


def test_one_sweep_reduces_initial_state_error(oscillator):
    plant, grid, z0, y, source = oscillator
    zeta = np.zeros(plant.n)
    cfg = ObserverConfig(1.0)
    fwd = forward_observe(plant, cfg, y, source, zeta, grid)
    bwd = backward_observe(plant, cfg, y, source, fwd.states[-1], grid)
    assert plant.G_X.norm(bwd.states[-1] - z0) < plant.G_X.norm(zeta - z0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_zero_gain_round_trip(seed):
    rng = np.random.default_rng(seed)
    sys, grid = random_skew_system(rng, t_final=5.0, n_steps=500)
    zeta = rng.standard_normal(sys.n)
    source = rng.standard_normal((grid.n_steps + 1, sys.n))
    y = rng.standard_normal((grid.n_steps + 1, sys.m))
    cfg = ObserverConfig(0.0)
    fwd = forward_observe(sys, cfg, y, source, zeta, grid)
    bwd = backward_observe(sys, cfg, y, source, fwd.states[-1], grid)
    assert np.linalg.norm(bwd.states[-1] - zeta) < 1e-10 * max(np.linalg.norm(zeta), 1.0)
    # the backward path is the forward path read in reverse
    np.testing.assert_allclose(bwd.states, fwd.states[::-1], atol=1e-10)


def test_explicit_gain_overrides_kappa():
    sys = LtiSystem(np.zeros((2, 2)), [[1.0, 0.0]])
    K = np.array([[2.0], [1.0]])
    np.testing.assert_array_equal(ObserverConfig(5.0, gain=K).feedback(sys), K)
    with pytest.raises(ValueError):
        ObserverConfig(0.0, gain=np.ones((3, 1))).feedback(sys)
    with pytest.raises(ValueError):
        ObserverConfig(-1.0)


def test_output_length_is_checked():
    sys = LtiSystem(np.zeros((2, 2)), [[1.0, 0.0]])
    with pytest.raises(ValueError):
        forward_observe(sys, ObserverConfig(1.0), np.zeros(5), None, np.zeros(2), TimeGrid(1.0, 10))


def test_lemma1_without_feedback_is_equality():
    rng = np.random.default_rng(4)
    sys, grid = random_skew_system(rng, t_final=10.0, n_steps=500)
    gamma, bound = lemma1_check(sys, np.zeros((sys.n, sys.m)), grid)
    assert gamma == pytest.approx(bound, rel=1e-12)


def test_lemma1_harmonic_oscillator():
    sys = LtiSystem([[0.0, 1.0], [-1.0, 0.0]], [[1.0, 0.0]])
    grid = TimeGrid(2 * np.pi, 2000)
    gamma, bound = lemma1_check(sys, 0.5 * sys.C_adjoint, grid)
    assert gamma >= bound > 0


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_lemma1_random(seed):
    rng = np.random.default_rng(seed)
    sys, grid = random_skew_system(rng, n=int(rng.integers(2, 7)), p=1, t_final=10.0, n_steps=500)
    gamma, bound = lemma1_check(sys, rng.uniform(0, 2) * sys.C_adjoint, grid)
    assert gamma >= bound * (1 - 1e-10)


def test_oscillator_closed_loop_is_stable():
    setup = OscillatorSetup()
    _, model = setup.systems(np.zeros(setup.n_steps + 1))
    for kappa in np.linspace(0.05, 2.0, 40):
        assert spectral_abscissa(model.A - kappa * model.C_adjoint @ model.C) < 0


def test_damping_report():
    setup = OscillatorSetup()
    _, model = setup.systems(np.zeros(setup.n_steps + 1))
    report = damping_gains(model, [0.0, 0.5, 1.0])
    assert report["decay"][0] == pytest.approx(0.0, abs=1e-10)
    assert np.all(report["decay"][1:] > 0)
    assert report["best_decay_gain"] in (0.5, 1.0)
