"""Detection chain: dipole emission geometry, efficiency cascade, polarimetry.

Photons are rays: a spontaneous-emission event gets a direction drawn from
its channel's dipole pattern, then runs a Bernoulli cascade of cone
acceptance, scalar fiber coupling, optional polarization analysis
(quarter-wave plate + polarizing splitter, exact Jones transport of the
off-axis transverse field) and detector quantum efficiency.  Surviving
photons become integer-picosecond time tags with Gaussian timing jitter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import polarization as pol

ORIGIN_SIGNAL = 0
ORIGIN_DARK = 1
ORIGIN_LEAKAGE = 2
ORIGIN_NAMES = {ORIGIN_SIGNAL: "signal", ORIGIN_DARK: "dark",
                ORIGIN_LEAKAGE: "leakage-signal"}


@dataclass(frozen=True)
class PolarizationAnalyzer:
    """Quarter-wave plate + polarizing splitter in front of one detector."""

    retardance: float                 # rad, pi/2 ideal
    fast_axis_angle: float = 0.0      # rad
    port: str = "transmit"

    def __post_init__(self):
        if not 0.0 < self.retardance < math.pi:
            raise ValueError("retardance must be in (0, pi)")
        if self.port not in ("transmit", "reflect"):
            raise ValueError("port must be 'transmit' or 'reflect'")


@dataclass(frozen=True)
class Detector:
    detector_id: int
    axis_sign: int = +1               # +- quantization axis
    numerical_aperture: float = 0.4
    fiber_coupling: float = 1.0
    quantum_efficiency: float = 1.0
    dark_count_hz: float = 0.0
    timing_jitter_ns: float = 0.0
    analyzer: PolarizationAnalyzer = None

    def __post_init__(self):
        if not 0.0 < self.numerical_aperture < 1.0:
            raise ValueError("numerical aperture must be in (0, 1)")
        for name in ("fiber_coupling", "quantum_efficiency"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")

    @property
    def cos_cone(self):
        return math.cos(math.asin(self.numerical_aperture))

    @property
    def axis(self):
        return np.array([0.0, 0.0, float(self.axis_sign)])


@dataclass
class DetectionChain:
    detectors: list
    gate_phase: str = "Trigger"
    gate_labels: tuple = ("393",)

    def detector(self, detector_id):
        for d in self.detectors:
            if d.detector_id == detector_id:
                return d
        raise KeyError(detector_id)


@dataclass(frozen=True)
class DetectionRecord:
    detector_id: int
    timestamp_ps: int
    origin: int

    @property
    def origin_name(self):
        return ORIGIN_NAMES[self.origin]


def two_halo_chain(constants, analyzer_on=None, dark=None):
    """The default two-objective chain from the constants file."""
    det = constants.detection
    analyzers = [None, None]
    if analyzer_on is not None:
        analyzers[analyzer_on] = PolarizationAnalyzer(
            retardance=det.get("analyzer_retardance", math.pi / 2))
    dark_hz = det.get("dark_count_hz", 0.0) if dark is None else dark
    detectors = [
        Detector(detector_id=i, axis_sign=+1 if i == 0 else -1,
                 numerical_aperture=det.get("numerical_aperture", 0.4),
                 fiber_coupling=det.get("fiber_coupling", 1.0),
                 quantum_efficiency=det.get("quantum_efficiency", 1.0),
                 dark_count_hz=dark_hz,
                 timing_jitter_ns=det.get("timing_jitter_ns", 0.0),
                 analyzer=analyzers[i])
        for i in (0, 1)
    ]
    return DetectionChain(detectors=detectors)


def sample_emission_direction(q, rng, size=None):
    """Dipole-pattern direction sampling (see polarization module)."""
    return pol.sample_emission_direction(q, rng, size)


def collection_probability(pattern, half_angle):
    """Closed-form cone-collection probability (see polarization module)."""
    return pol.collection_probability(pattern, half_angle)


def _beam_jones(q, direction, axis_sign):
    """Lab-frame Jones vector of the collimated ray in the detector frame.

    Exact aplanatic transport: the meridional/azimuthal components of the
    transverse dipole field at the sampled direction map onto the radial/
    azimuthal axes of the collimated beam.
    """
    d = np.array([0.0, 0.0, float(axis_sign)])
    x_d, y_d = pol._orthonormal_transverse(d)
    n = np.asarray(direction, float)
    n = n / np.linalg.norm(n)
    e_q = pol.spherical_unit_vectors((0, 0, 1))[q]
    efield = e_q - (n @ e_q) * n

    cos_t = float(np.clip(n @ d, -1.0, 1.0))
    nx, ny = float(n @ x_d), float(n @ y_d)
    phi = math.atan2(ny, nx) if (nx or ny) else 0.0
    sin_t = math.sqrt(max(0.0, 1.0 - cos_t**2))
    theta_hat = cos_t * (math.cos(phi) * x_d + math.sin(phi) * y_d) - sin_t * d
    phi_hat = -math.sin(phi) * x_d + math.cos(phi) * y_d
    e_theta = theta_hat @ efield
    e_phi = phi_hat @ efield
    return np.array([
        e_theta * math.cos(phi) - e_phi * math.sin(phi),
        e_theta * math.sin(phi) + e_phi * math.cos(phi),
    ])


def analyzer_transmission(photon_polarization, analyzer, direction=None,
                          axis_sign=+1):
    """Probability that a photon passes the waveplate + splitter port.

    `photon_polarization` is either a spherical component q in {-1, 0, +1}
    (combined with `direction`; on-axis sigma photons map to circular Jones
    states) or an explicit Jones 2-vector in the detector frame.
    """
    if isinstance(photon_polarization, (int, np.integer)):
        q = int(photon_polarization)
        if direction is None:
            direction = (0.0, 0.0, float(axis_sign))
        jones = _beam_jones(q, direction, axis_sign)
    else:
        jones = np.asarray(photon_polarization, dtype=complex)
    norm2 = float(np.real(np.vdot(jones, jones)))
    if norm2 == 0.0:
        return 0.0
    plate = pol.waveplate_jones(analyzer.retardance, analyzer.fast_axis_angle)
    out = plate @ jones
    k = 0 if analyzer.port == "transmit" else 1
    return float(abs(out[k]) ** 2 / norm2)


def detect(photon_event, chain, rng):
    """Bernoulli detection cascade for one photon event.

    Samples the emission direction from the channel's dipole pattern (and
    stores it on the event), tests the collection cones of all detectors,
    then fiber coupling, analyzer transmission and quantum efficiency.
    Returns a DetectionRecord or None.
    """
    if photon_event.direction is None:
        photon_event.direction = sample_emission_direction(photon_event.q, rng)
    n = photon_event.direction
    for det in chain.detectors:
        if float(n @ det.axis) < det.cos_cone:
            continue
        if rng.uniform() >= det.fiber_coupling:
            return None
        if det.analyzer is not None:
            p = analyzer_transmission(photon_event.q, det.analyzer,
                                      direction=n, axis_sign=det.axis_sign)
            if rng.uniform() >= p:
                return None
        if rng.uniform() >= det.quantum_efficiency:
            return None
        t = photon_event.time_ns
        if det.timing_jitter_ns > 0.0:
            t += det.timing_jitter_ns * rng.standard_normal()
        return DetectionRecord(detector_id=det.detector_id,
                               timestamp_ps=int(round(t * 1000.0)),
                               origin=ORIGIN_SIGNAL)
    return None


def inject_dark_counts(chain, duration_ns, rng):
    """Homogeneous Poisson dark counts per detector over [0, duration)."""
    records = []
    for det in chain.detectors:
        if det.dark_count_hz <= 0.0:
            continue
        mean = det.dark_count_hz * duration_ns * 1e-9
        count = rng.poisson(mean)
        times = rng.uniform(0.0, duration_ns, size=count)
        records.extend(
            DetectionRecord(detector_id=det.detector_id,
                            timestamp_ps=int(round(t * 1000.0)),
                            origin=ORIGIN_DARK)
            for t in times)
    records.sort(key=lambda r: (r.timestamp_ps, r.detector_id))
    return records
