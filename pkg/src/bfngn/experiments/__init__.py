"""Oscillator feedback-effect study and wave-equation inverse potential problem."""
from .oscillator import OscillatorSetup, run_oscillator_sweep
from .wave import WaveSetup, assemble_wave_family, run_wave_experiment

__all__ = [
    "OscillatorSetup",
    "WaveSetup",
    "assemble_wave_family",
    "run_oscillator_sweep",
    "run_wave_experiment",
]
