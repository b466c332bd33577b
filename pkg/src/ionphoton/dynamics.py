"""Multi-laser RWA generator and open-system evolution engines.

Two solvers share one generator: a Monte-Carlo wavefunction unraveling
(run_trajectory) that evolves the 18-amplitude state under the effective
non-Hermitian Hamiltonian and collapses it at norm-threshold crossings, and
a deterministic density-matrix solver (solve_master_equation) over the same
jump channels, used as the validation oracle.

Rotating frames: each laser pins the frame-frequency difference of the two
terms it couples, so each term carries one frame offset.  The coupling
graph of the five Ca+ transitions is a tree, hence any set of detunings is
consistent; inconsistencies can only arise from two lasers on the same
transition with different detunings (or synthetic cyclic configs), which
is reported as a frame conflict.

Internal units: time ns, angular frequency rad/ns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.integrate import solve_ivp

from .atom import TERM_QUANTUM_NUMBERS, LevelScheme, coupling_amplitude, decay_channels
from .polarization import spherical_components

INTEGRATOR_RTOL = 1e-9
INTEGRATOR_ATOL = 1e-11


class FrameConflictError(ValueError):
    """Inconsistent rotating-frame assignment for the given laser set."""


class TruncationError(ValueError):
    """A state-space truncation severs an active coupling."""


class IntegrationFailureError(RuntimeError):
    def __init__(self, message, time_ns, norm):
        super().__init__(f"{message} (t={time_ns:.6f} ns, |psi|^2={norm:.3e})")
        self.time_ns = time_ns
        self.norm = norm


@dataclass(frozen=True)
class LaserField:
    """One laser channel addressing a named transition.

    rabi is the reduced peak Rabi frequency in rad/ns (the per-channel
    coupling is rabi * Clebsch-Gordan * spherical component); detuning is
    from the Zeeman-free transition frequency, rad/ns.
    """

    name: str
    transition: str                  # wavelength label: 397/866/850/854
    rabi: float
    detuning: float = 0.0
    direction: tuple = (0.0, 1.0, 0.0)
    polarization: tuple = (1.0, 0.0)
    intensity_w_cm2: float = None    # bookkeeping only; rabi is authoritative

    def spherical_amplitudes(self, quantization_axis):
        return spherical_components(self.direction, self.polarization,
                                    quantization_axis)


def rabi_from_intensity(scheme, label, intensity_w_cm2):
    """Reduced Rabi frequency (rad/ns) for a nominal intensity label.

    Omega = Gamma_partial * sqrt(scale * I / (2 I_sat)); the per-transition
    effective-intensity scale lives in the constants file.
    """
    tr = scheme.transition(str(label))
    consts = scheme.constants
    i_sat = consts.saturation_intensity(tr.upper, tr.lower)      # W/m^2
    scale = consts.intensity_scale.get(str(label), 1.0)
    intensity = scale * intensity_w_cm2 * 1e4                    # -> W/m^2
    return tr.total_rate * math.sqrt(intensity / (2.0 * i_sat))


def laser_from_intensity(scheme, name, label, intensity_w_cm2, **kwargs):
    rabi = rabi_from_intensity(scheme, label, intensity_w_cm2)
    return LaserField(name=name, transition=str(label), rabi=rabi,
                      intensity_w_cm2=intensity_w_cm2, **kwargs)


@dataclass
class PhotonEvent:
    time_ns: float
    upper: str            # e.g. "P32:+3/2"
    lower: str
    wavelength_nm: float
    label: str            # transition label, e.g. "393"
    q: int
    sequence_index: int = 0
    direction: np.ndarray = None

    @property
    def channel(self):
        return (self.upper, self.lower)


@dataclass(frozen=True)
class JumpChannel:
    upper_index: int
    lower_index: int
    q: int
    rate: float           # 1/ns
    label: str
    wavelength_nm: float
    upper_name: str
    lower_name: str


@dataclass
class AtomicStateVector:
    amplitudes: np.ndarray
    time_ns: float

    @property
    def populations(self):
        return np.abs(self.amplitudes) ** 2 / np.vdot(
            self.amplitudes, self.amplitudes).real


def validate_frames(scheme, lasers, tol=1e-9):
    """Assign per-term frame offsets; error on inconsistent laser loops.

    Returns {term: Delta} with Delta the frame-frequency surplus of the
    term (rad/ns); the generator diagonal for state s is Delta(term) +
    zeeman(s).  Consistency requires Delta(lower) - Delta(upper) =
    detuning for every laser; conflicts raise FrameConflictError naming
    the offending channels.
    """
    edges = {}
    for laser in lasers:
        tr = scheme.transition(laser.transition)
        key = (tr.upper, tr.lower)
        edges.setdefault(key, []).append(laser)

    adjacency = {}
    for (upper, lower), ls in edges.items():
        det = ls[0].detuning
        for other in ls[1:]:
            if abs(other.detuning - det) > tol:
                raise FrameConflictError(
                    f"lasers {ls[0].name!r} and {other.name!r} drive the "
                    f"{upper}-{lower} transition with different detunings "
                    f"({det} vs {other.detuning} rad/ns)")
        adjacency.setdefault(upper, []).append((lower, det, +1, ls))
        adjacency.setdefault(lower, []).append((upper, det, -1, ls))

    offsets = {}
    from .constants import TERMS
    for root in TERMS:
        if root not in adjacency or root in offsets:
            continue
        offsets[root] = 0.0
        stack = [root]
        while stack:
            term = stack.pop()
            for other, det, sign, ls in adjacency[term]:
                # Delta_lower - Delta_upper = det; sign=+1 when `term` is upper
                expected = offsets[term] + sign * det
                if other in offsets:
                    if abs(offsets[other] - expected) > tol:
                        names = ", ".join(l.name for l in ls)
                        raise FrameConflictError(
                            f"laser loop through {term}-{other} is inconsistent "
                            f"by {offsets[other] - expected:.3e} rad/ns "
                            f"(channels: {names})")
                else:
                    offsets[other] = expected
                    stack.append(other)
    for term in TERMS:
        offsets.setdefault(term, 0.0)
    return offsets


def three_photon_mismatch(lasers):
    """delta_397 - delta_866 + delta_850, or None if the triple is incomplete."""
    det = {}
    for laser in lasers:
        det.setdefault(laser.transition, laser.detuning)
    if not all(k in det for k in ("397", "866", "850")):
        return None
    return det["397"] - det["866"] + det["850"]


class GeneratorBuilder:
    """Caches the static and per-laser parts of the effective generator.

    H_eff(t) = H_static + sum_k envelope_k(t) * H_k, with H_static holding
    the frame/Zeeman diagonal minus (i/2) * total decay rate, and one H_k
    per laser (coupling + h.c., unit envelope).
    """

    def __init__(self, scheme, lasers):
        self.scheme = scheme
        self.lasers = list(lasers)
        self.frames = validate_frames(scheme, self.lasers)
        n = scheme.n_states

        diag = np.zeros(n, dtype=complex)
        for s in scheme.states:
            diag[s.index] = self.frames[s.term] + s.energy
            if s.term in ("P12", "P32"):
                diag[s.index] -= 0.5j * scheme.total_decay_rate(s.term)
        self.static = np.diag(diag)

        self.laser_parts = []
        axis = scheme.quantization_axis
        for laser in self.lasers:
            tr = scheme.transition(laser.transition)
            amps = laser.spherical_amplitudes(axis)
            h = np.zeros((n, n), dtype=complex)
            for lower in scheme.states_of(tr.lower):
                for qi, q in enumerate((-1, 0, +1)):
                    m_u = lower.m + q
                    cg = coupling_amplitude(scheme, tr, q, lower.m, m_u)
                    if cg == 0.0:
                        continue
                    upper = scheme.state(tr.upper, m_u)
                    h[upper.index, lower.index] += 0.5 * laser.rabi * amps[qi] * cg
            h += h.conj().T
            self.laser_parts.append(h)

        self.channels = build_jump_channels(scheme)
        self._chan_upper = np.array([c.upper_index for c in self.channels])
        self._chan_lower = np.array([c.lower_index for c in self.channels])
        self._chan_rate = np.array([c.rate for c in self.channels])

    def matrix(self, envelopes=None):
        """Dense H_eff for given per-laser envelope amplitude factors."""
        h = self.static.copy()
        if envelopes is None:
            envelopes = [1.0] * len(self.laser_parts)
        for env, part in zip(envelopes, self.laser_parts):
            if env:
                h += env * part
        return h

    def channel_rates(self, psi):
        """Instantaneous jump rates per channel for a (not necessarily
        normalized) state vector."""
        return self._chan_rate * np.abs(psi[self._chan_upper]) ** 2

    def active_mask(self, envelopes=None):
        """Boolean mask of basis states with any outgoing coupling or decay."""
        n = self.scheme.n_states
        mask = np.zeros(n, dtype=bool)
        mask[self._chan_upper] = True
        if envelopes is None:
            envelopes = [1.0] * len(self.laser_parts)
        for env, part in zip(envelopes, self.laser_parts):
            if env:
                mask |= np.abs(part).sum(axis=0) > 0
        return mask


def build_jump_channels(scheme):
    channels = []
    for term in ("P12", "P32"):
        for upper in scheme.states_of(term):
            for lower, q, rate in decay_channels(scheme, upper):
                tr = next(t for t in scheme.transitions
                          if t.upper == term and t.lower == lower.term)
                channels.append(JumpChannel(
                    upper_index=upper.index, lower_index=lower.index, q=q,
                    rate=rate, label=tr.label, wavelength_nm=tr.wavelength_nm,
                    upper_name=str(upper), lower_name=str(lower)))
    channels.sort(key=lambda c: (c.upper_index, c.lower_index))
    return channels


def assemble_generator(scheme, active_lasers, t=0.0, envelopes=None):
    """Effective non-Hermitian generator for the given lasers at time t.

    envelopes: optional {laser name: callable or float} amplitude factors.
    """
    builder = GeneratorBuilder(scheme, active_lasers)
    values = None
    if envelopes is not None:
        values = []
        for laser in builder.lasers:
            env = envelopes.get(laser.name, 1.0)
            values.append(env(t) if callable(env) else float(env))
    return builder.matrix(values)


# ---------------------------------------------------------------------------
# Monte-Carlo wavefunction engine
# ---------------------------------------------------------------------------

def _segment_rhs(builder, env_fns):
    parts = builder.laser_parts

    def rhs(t, y):
        h = builder.static.copy()
        for fn, part in zip(env_fns, parts):
            v = fn(t)
            if v:
                h += v * part
        return -1j * (h @ y)

    return rhs


def evolve_nojump(builder, env_fns, psi, t0, t1, threshold, max_step=np.inf):
    """Integrate the non-Hermitian Schroedinger equation until the squared
    norm crosses `threshold` or t1 is reached.

    Returns (t, psi, jumped).  Jump times are located by the integrator's
    event root-finding on the norm threshold (well below the 1e-3 ns
    bracketing requirement).
    """

    def crossing(t, y):
        return np.vdot(y, y).real - threshold

    crossing.terminal = True
    crossing.direction = -1

    sol = solve_ivp(_segment_rhs(builder, env_fns), (t0, t1), psi,
                    method="RK45", rtol=INTEGRATOR_RTOL, atol=INTEGRATOR_ATOL,
                    events=crossing, max_step=max_step)
    if not sol.success:
        norm = float(np.vdot(sol.y[:, -1], sol.y[:, -1]).real)
        raise IntegrationFailureError(
            f"trajectory integration failed: {sol.message}", sol.t[-1], norm)
    if sol.t_events[0].size:
        return float(sol.t_events[0][0]), sol.y_events[0][0], True
    return float(sol.t[-1]), sol.y[:, -1], False


def draw_channel(builder, psi, rng):
    rates = builder.channel_rates(psi)
    total = rates.sum()
    if total <= 0:
        raise IntegrationFailureError("norm crossing with zero jump rate",
                                      0.0, float(np.vdot(psi, psi).real))
    k = int(np.searchsorted(np.cumsum(rates), rng.uniform(0.0, total),
                            side="right"))
    return min(k, len(builder.channels) - 1)


def cooling_reset(scheme, psi, rng):
    """Internal-state reset at the end of the cooling phase.

    Population outside the D52 manifold is optically recycled on the fast
    cooling transitions and ends up in a uniform S12 mixture (the
    trajectory draws one sublevel); leftover D52 population is untouched
    by the cooling lasers, so the state is first projected D52-vs-rest and
    kept if the projection lands in D52.
    """
    d52 = [s.index for s in scheme.states_of("D52")]
    amp = psi[d52]
    p_keep = float((np.abs(amp) ** 2).sum() / np.vdot(psi, psi).real)
    out = np.zeros_like(psi)
    if rng.uniform() < p_keep:
        out[d52] = amp / math.sqrt((np.abs(amp) ** 2).sum())
        return out
    s12 = [s.index for s in scheme.states_of("S12")]
    out[s12[rng.integers(len(s12))]] = 1.0
    return out


def run_trajectory(scheme, sequence, rng, initial_state=None, t_start=0.0,
                   sequence_index=0, collect=None):
    """One quantum-jump pass through a compiled pulse sequence.

    Standard unraveling: deterministic non-Hermitian evolution between
    jumps, jump times where the squared norm crosses a pre-drawn uniform
    threshold, channel drawn proportional to the instantaneous channel
    rates, state collapsed onto the channel's lower sublevel.  Every jump
    appends a PhotonEvent.  Returns (events, AtomicStateVector).
    """
    n = scheme.n_states
    if initial_state is None:
        psi = np.zeros(n, dtype=complex)
        psi[scheme.state("S12", 0.5).index] = 1.0
    else:
        psi = np.asarray(initial_state, dtype=complex).copy()
        psi /= math.sqrt(np.vdot(psi, psi).real)

    events = []
    t_abs = t_start
    for phase in sequence.phases:
        t_end = t_abs + phase.duration
        if phase.is_reset:
            psi = cooling_reset(scheme, psi, rng)
            t_abs = t_end
            continue
        builder = phase.builder
        env_fns = phase.envelope_fns(t_abs)
        threshold = rng.uniform()
        t = t_abs
        while t < t_end - 1e-12:
            if _is_dark(builder, env_fns, psi, t):
                psi = _advance_dark(builder, psi, t, t_end)
                t = t_end
                break
            t_next, psi, jumped = evolve_nojump(builder, env_fns, psi, t, t_end,
                                                threshold)
            t = t_next
            if not jumped:
                break
            k = draw_channel(builder, psi, rng)
            ch = builder.channels[k]
            events.append(PhotonEvent(
                time_ns=t, upper=ch.upper_name, lower=ch.lower_name,
                wavelength_nm=ch.wavelength_nm, label=ch.label, q=ch.q,
                sequence_index=sequence_index))
            psi = np.zeros(n, dtype=complex)
            psi[ch.lower_index] = 1.0
            threshold = rng.uniform()
        t_abs = t_end
        norm = math.sqrt(np.vdot(psi, psi).real)
        psi /= norm

    return events, AtomicStateVector(amplitudes=psi, time_ns=t_abs)


def _is_dark(builder, env_fns, psi, t, tol=1e-12):
    """True if the current support has no decay and no active coupling."""
    support = np.abs(psi) ** 2 > tol
    if builder.channel_rates(psi).sum() > tol:
        return False
    for fn, part in zip(env_fns, builder.laser_parts):
        if fn(t) and np.abs(part[:, support]).sum() > tol:
            return False
    return True


def _advance_dark(builder, psi, t0, t1):
    phases = np.exp(-1j * np.diag(builder.static).real * (t1 - t0))
    return psi * phases


# ---------------------------------------------------------------------------
# Density-matrix oracle
# ---------------------------------------------------------------------------

def _truncation_indices(scheme, truncation):
    if truncation is None:
        return np.arange(scheme.n_states)
    indices = []
    for item in truncation:
        if isinstance(item, str) and ":" not in item:
            indices.extend(s.index for s in scheme.states_of(item))
        elif isinstance(item, str):
            term, frac = item.split(":")
            num, den = frac.replace("+", "").split("/")
            indices.append(scheme.state(term, int(num) / int(den)).index)
        else:
            term, m = item
            indices.append(scheme.state(term, m).index)
    return np.array(sorted(set(indices)), dtype=int)


def _check_truncation(scheme, builder, keep):
    keep_set = set(int(i) for i in keep)
    names = {s.index: str(s) for s in scheme.states}
    for laser, part in zip(builder.lasers, builder.laser_parts):
        rows, cols = np.nonzero(np.abs(part) > 0)
        for i, j in zip(rows, cols):
            if (int(i) in keep_set) != (int(j) in keep_set):
                raise TruncationError(
                    f"truncation severs laser coupling {laser.name!r} "
                    f"between {names[int(i)]} and {names[int(j)]}")
    for ch in builder.channels:
        u_in, l_in = ch.upper_index in keep_set, ch.lower_index in keep_set
        if u_in != l_in:
            raise TruncationError(
                f"truncation severs decay channel "
                f"{ch.upper_name} -> {ch.lower_name}")


class LindbladPropagator:
    """Vectorized Lindblad generator L with d vec(rho)/dt = L(t) vec(rho)."""

    def __init__(self, scheme, lasers, truncation=None):
        self.scheme = scheme
        self.builder = GeneratorBuilder(scheme, lasers)
        self.keep = _truncation_indices(scheme, truncation)
        if truncation is not None:
            _check_truncation(scheme, self.builder, self.keep)
        self.dim = len(self.keep)
        eye = np.eye(self.dim)

        def liou_hamiltonian(h_eff):
            h = h_eff[np.ix_(self.keep, self.keep)]
            return -1j * (np.kron(h, eye) - np.kron(eye, h.conj()))

        self.static = liou_hamiltonian(self.builder.static)
        pos = {int(i): k for k, i in enumerate(self.keep)}
        for ch in self.builder.channels:
            if ch.upper_index not in pos:
                continue
            op = np.zeros((self.dim, self.dim))
            op[pos[ch.lower_index], pos[ch.upper_index]] = math.sqrt(ch.rate)
            self.static += np.kron(op, op.conj())
        self.laser_liou = [liou_hamiltonian(p) for p in self.builder.laser_parts]

    def matrix(self, envelopes=None):
        liou = self.static.copy()
        if envelopes is None:
            envelopes = [1.0] * len(self.laser_liou)
        for env, part in zip(envelopes, self.laser_liou):
            if env:
                liou += env * part
        return liou

    def project_state(self, psi_or_rho):
        arr = np.asarray(psi_or_rho, dtype=complex)
        if arr.ndim == 1:
            rho = np.outer(arr, arr.conj())
        else:
            rho = arr
        return rho[np.ix_(self.keep, self.keep)]


def solve_master_equation(scheme, sequence, truncation=None, initial_state=None,
                          n_checkpoints=200):
    """Deterministic density-matrix evolution through a compiled sequence.

    Returns (times, populations) with populations[k, i] the diagonal of rho
    at checkpoint k for kept basis state i (order = sorted state indices of
    the truncation, all 18 states if untruncated).  The cooling phase is
    applied as the reset map.  Trace drift beyond 1e-8 per us raises.
    """
    lasers = sequence.all_lasers()
    prop = LindbladPropagator(scheme, lasers, truncation)
    keep = prop.keep
    n = prop.dim

    if initial_state is None:
        rho = np.zeros((n, n), dtype=complex)
        pos = {int(i): k for k, i in enumerate(keep)}
        s = scheme.state("S12", 0.5).index
        d = scheme.state("S12", -0.5).index
        if s in pos and d in pos:
            rho[pos[s], pos[s]] = rho[pos[d], pos[d]] = 0.5
        else:
            rho[0, 0] = 1.0
    else:
        rho = prop.project_state(initial_state)
        tr = np.trace(rho).real
        if tr <= 0:
            raise ValueError("initial state has no weight inside the truncation")
        rho = rho / tr

    laser_index = {laser.name: k for k, laser in enumerate(prop.builder.lasers)}
    times = [0.0]
    pops = [np.diag(rho).real.copy()]
    t_abs = 0.0
    for phase in sequence.phases:
        t_end = t_abs + phase.duration
        if phase.is_reset:
            rho = _reset_density(scheme, keep, rho)
        else:
            rho = _evolve_density(prop, phase, laser_index, rho, t_abs, t_end,
                                  times, pops, n_checkpoints)
        t_abs = t_end
        times.append(t_abs)
        pops.append(np.diag(rho).real.copy())
    return np.array(times), np.array(pops)


def _reset_density(scheme, keep, rho):
    pos = {int(i): k for k, i in enumerate(keep)}
    d52 = [pos[s.index] for s in scheme.states_of("D52") if s.index in pos]
    s12 = [pos[s.index] for s in scheme.states_of("S12") if s.index in pos]
    out = np.zeros_like(rho)
    p_keep = 0.0
    if d52:
        idx = np.ix_(d52, d52)
        out[idx] = rho[idx]
        p_keep = np.trace(rho[idx]).real
    rest = np.trace(rho).real - p_keep
    if s12:
        for k in s12:
            out[k, k] += rest / len(s12)
    elif rest > 1e-12:
        raise TruncationError("reset needs S12 states inside the truncation")
    return out


def _evolve_density(prop, phase, laser_index, rho, t0, t1, times, pops,
                    n_checkpoints):
    env_fns = phase.envelope_fns(t0)
    envmap = {laser.name: fn for laser, fn in zip(phase.builder.lasers, env_fns)}
    fns = [envmap.get(l.name) for l in prop.builder.lasers]

    def env_values(t):
        return [0.0 if fn is None else fn(t) for fn in fns]

    checkpoints = np.linspace(t0, t1, max(2, n_checkpoints))
    if phase.time_independent:
        from scipy.linalg import expm
        liou = prop.matrix(env_values(t0))
        step = expm(liou * (checkpoints[1] - checkpoints[0]))
        vec = rho.reshape(-1)
        for t in checkpoints[1:]:
            vec = step @ vec
            times.append(float(t))
            pops.append(vec.reshape(rho.shape).diagonal().real.copy())
        rho = vec.reshape(rho.shape)
    else:
        def rhs(t, v):
            return prop.matrix(env_values(t)) @ v

        sol = solve_ivp(rhs, (t0, t1), rho.reshape(-1), t_eval=checkpoints[1:],
                        method="RK45", rtol=1e-8, atol=1e-10)
        if not sol.success:
            raise IntegrationFailureError("master equation failed", t1, np.nan)
        for t, v in zip(sol.t, sol.y.T):
            times.append(float(t))
            pops.append(v.reshape(rho.shape).diagonal().real.copy())
        rho = sol.y[:, -1].reshape(rho.shape)

    drift = abs(np.trace(rho).real - 1.0)
    if drift > 1e-8 * max(1.0, (t1 - t0) / 1e3):
        raise IntegrationFailureError(
            f"density-matrix trace drifted by {drift:.2e}", t1,
            float(np.trace(rho).real))
    return rho
