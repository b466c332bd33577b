"""Trapped-ion single-photon source simulator.

A stochastic-wavefunction (quantum-jump) model of a single Ca+ ion driven
through cool / prepare / trigger cycles, with photon wave-packet shaping,
antibunching statistics, optical pumping and polarization analysis, plus
the detection chain and time-tag estimators needed to reproduce the
corresponding measurements numerically.
"""

from .analysis import (FitFailureError, G2Result, Histogram, VisibilityFit,
                       arrival_histogram, depopulation_rate, fit_visibility,
                       g2_correlate, multi_photon_ratio, quantile_duration,
                       wave_packet_length)
from .atom import (LevelScheme, TransitionSpec, ZeemanState,
                   build_level_scheme, coupling_amplitude, decay_channels)
from .config import build_all, paper_config, preset_config
from .constants import AtomicConstants, load_constants
from .detection import (DetectionChain, DetectionRecord, Detector,
                        PolarizationAnalyzer, analyzer_transmission,
                        collection_probability, detect, inject_dark_counts,
                        sample_emission_direction)
from .dynamics import (AtomicStateVector, LaserField, PhotonEvent,
                       assemble_generator, rabi_from_intensity, run_trajectory,
                       solve_master_equation, validate_frames)
from .experiment import run_experiment, scan
from .polarization import spherical_components
from .sequence import PulseSequence, aom_envelope, compile_sequence
from .store import EventStore

__version__ = "0.1.0"
