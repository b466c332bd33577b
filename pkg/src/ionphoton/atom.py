"""Fine/Zeeman structure of the Ca+ ion and its dipole coupling algebra.

The level scheme holds the 18 Zeeman sublevels of S12, P12, D32, D52 and
P32, the five dipole transitions between them, and the magnetic field that
defines the quantization axis.  Couplings between sublevels are pure
angular-momentum algebra: amplitude = <J_l m_l; 1 q | J_u m_u>, so the sum
of squared amplitudes over the lower manifold is exactly 1 for every upper
sublevel and spontaneous decay rates are m-independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .constants import TERMS, TRANSITION_LABELS, AtomicConstants, load_constants

# (L, S, J) per term, in units where S, J may be half-integer
TERM_QUANTUM_NUMBERS = {
    "S12": (0, 0.5, 0.5),
    "P12": (1, 0.5, 0.5),
    "P32": (1, 0.5, 1.5),
    "D32": (2, 0.5, 1.5),
    "D52": (2, 0.5, 2.5),
}

METASTABLE_OR_GROUND = ("S12", "D32", "D52")


class NoDecayChannelsError(ValueError):
    """decay_channels was asked for a state that does not decay."""


@dataclass(frozen=True)
class ZeemanState:
    term: str
    m: float          # magnetic quantum number (half-integer)
    energy: float     # Zeeman shift relative to term centroid, rad/ns
    index: int        # position in the global 18-state basis

    def __str__(self):
        sign = "+" if self.m >= 0 else "-"
        num = int(round(abs(self.m) * 2))
        return f"{self.term}:{sign}{num}/2"


@dataclass(frozen=True)
class TransitionSpec:
    upper: str
    lower: str
    label: str            # nm label: 393 / 397 / 850 / 854 / 866
    wavelength_nm: float
    total_rate: float     # partial decay rate upper->lower, 1/ns
    reduced_coupling: float = 1.0


@dataclass
class LevelScheme:
    """Immutable after construction; shared read-only by trajectory workers."""

    states: list
    transitions: list
    magnetic_field_gauss: float
    quantization_axis: np.ndarray
    constants: AtomicConstants
    _index: dict = field(repr=False, default_factory=dict)

    def __post_init__(self):
        self._index = {(s.term, round(2 * s.m)): s for s in self.states}
        self.quantization_axis = np.asarray(self.quantization_axis, dtype=float)
        self.quantization_axis /= np.linalg.norm(self.quantization_axis)

    @property
    def n_states(self):
        return len(self.states)

    def state(self, term, m):
        return self._index[(term, round(2 * m))]

    def states_of(self, term):
        return [s for s in self.states if s.term == term]

    def transition(self, label):
        for t in self.transitions:
            if t.label == str(label):
                return t
        raise KeyError(f"no transition labeled {label!r}")

    def total_decay_rate(self, term):
        return sum(t.total_rate for t in self.transitions if t.upper == term)


@lru_cache(maxsize=None)
def _cg(two_jl, two_ml, q, two_ju, two_mu):
    """<j_l m_l; 1 q | j_u m_u> via sympy, cached on doubled quantum numbers."""
    from sympy.physics.wigner import clebsch_gordan

    val = clebsch_gordan(
        Fraction(two_jl, 2), 1, Fraction(two_ju, 2),
        Fraction(two_ml, 2), q, Fraction(two_mu, 2))
    return float(val)


def coupling_amplitude(scheme, transition, q, m_lower, m_upper):
    """Dimensionless dipole coupling between two Zeeman sublevels.

    Zero unless q in {-1,0,+1}, m_upper = m_lower + q and both m values
    exist in the respective terms; otherwise the Clebsch-Gordan coefficient
    <J_l m_l; 1 q | J_u m_u>.
    """
    if q not in (-1, 0, 1):
        raise ValueError(f"q must be -1, 0 or +1, got {q!r}")
    if abs(m_upper - (m_lower + q)) > 1e-12:
        return 0.0
    j_l = TERM_QUANTUM_NUMBERS[transition.lower][2]
    j_u = TERM_QUANTUM_NUMBERS[transition.upper][2]
    if abs(m_lower) > j_l or abs(m_upper) > j_u:
        return 0.0
    return transition.reduced_coupling * _cg(
        round(2 * j_l), round(2 * m_lower), q, round(2 * j_u), round(2 * m_upper))


def decay_channels(scheme, upper_state):
    """All spontaneous channels (lower_state, q, rate) of an excited sublevel.

    rate = partial rate of the term transition times the squared coupling
    amplitude; the rates of one sublevel sum to 1/tau of its term.
    """
    term = upper_state.term
    if term in METASTABLE_OR_GROUND:
        raise NoDecayChannelsError(
            f"{upper_state} is metastable or ground, it has no decay channels")
    channels = []
    for tr in scheme.transitions:
        if tr.upper != term:
            continue
        for lower in scheme.states_of(tr.lower):
            q = round(upper_state.m - lower.m)
            if q not in (-1, 0, 1):
                continue
            amp = coupling_amplitude(scheme, tr, q, lower.m, upper_state.m)
            if amp != 0.0:
                channels.append((lower, q, tr.total_rate * amp**2))
    return channels


def build_level_scheme(constants=None, magnetic_field_gauss=None,
                       quantization_axis=(0.0, 0.0, 1.0)):
    """Construct the validated 18-level scheme from atomic constants.

    State energies are the linear Zeeman shifts m * g_J * mu_B * B relative
    to each term centroid, in rad/ns.  The quantization axis is the
    magnetic-field direction.
    """
    if constants is None:
        constants = load_constants()
    if magnetic_field_gauss is None:
        magnetic_field_gauss = constants.magnetic_field_gauss
    if magnetic_field_gauss < 0:
        raise ValueError("magnetic field magnitude must be >= 0")

    zeeman_unit = constants.bohr_magneton * magnetic_field_gauss  # rad/ns per (g*m)
    states = []
    for term in TERMS:
        j = TERM_QUANTUM_NUMBERS[term][2]
        g = constants.g_factors[term]
        for two_m in range(-round(2 * j), round(2 * j) + 1, 2):
            m = two_m / 2.0
            states.append(ZeemanState(term=term, m=m,
                                      energy=m * g * zeeman_unit,
                                      index=len(states)))

    transitions = [
        TransitionSpec(upper=u, lower=l, label=label,
                       wavelength_nm=constants.wavelengths_nm[(u, l)],
                       total_rate=constants.partial_rate(u, l))
        for (u, l), label in TRANSITION_LABELS.items()
    ]

    scheme = LevelScheme(states=states, transitions=transitions,
                         magnetic_field_gauss=magnetic_field_gauss,
                         quantization_axis=np.asarray(quantization_axis, float),
                         constants=constants)
    _validate_scheme(scheme)
    return scheme


def _validate_scheme(scheme):
    assert scheme.n_states == 18
    counts = {t: len(scheme.states_of(t)) for t in TERMS}
    assert counts == {"S12": 2, "P12": 2, "D32": 4, "P32": 4, "D52": 6}
    for tr in scheme.transitions:
        j_u = TERM_QUANTUM_NUMBERS[tr.upper][2]
        j_l = TERM_QUANTUM_NUMBERS[tr.lower][2]
        if abs(j_u - j_l) > 1 or tr.total_rate <= 0:
            raise ValueError(f"invalid transition {tr}")
    # channel completeness: every excited sublevel decays at exactly 1/tau
    for term in ("P12", "P32"):
        rate = scheme.constants.decay_rate(term)
        for s in scheme.states_of(term):
            total = sum(r for _, _, r in decay_channels(scheme, s))
            if abs(total - rate) > 1e-9 * rate:
                raise ValueError(f"decay rates of {s} sum to {total}, not {rate}")
