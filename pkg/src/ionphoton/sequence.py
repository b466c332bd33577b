"""Pulse-sequence compilation: phases, AOM envelopes and laser timing.

A sequence config names an ordered list of phases (Cool / Prepare /
Trigger), the lasers switched on in each, and per-laser AOM parameters.
Compilation resolves laser definitions against the level scheme, assigns
one global rotating frame for the whole cycle (so a laser may appear in
several phases only with one detuning), chains the AOM envelope state
across phase boundaries, and validates the resonance condition of the
preparation triple.

The AOM model is a single-pole exponential between full transmission and
an extinction floor.  Extinction ratios are residual *intensity*; envelope
factors multiply the field amplitude, so the floor amplitude is the square
root of the configured ratio.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import polarization as pol
from .dynamics import (GeneratorBuilder, LaserField, laser_from_intensity,
                       rabi_from_intensity, three_photon_mismatch, validate_frames)

PHASE_NAMES = ("Cool", "Prepare", "Trigger")
TRIGGER_RANGE_NS = (800.0, 35000.0)


class SequenceError(ValueError):
    pass


@dataclass(frozen=True)
class EnvelopeParams:
    """AOM switching state of one laser within one phase."""

    on: bool
    floor: float          # residual field-amplitude factor (sqrt extinction)
    rise_ns: float
    fall_ns: float
    entry: float          # amplitude factor at phase start (chained)

    def value(self, t):
        """Amplitude factor at local time t >= 0 within the phase."""
        target = 1.0 if self.on else self.floor
        tau = self.rise_ns if self.on else self.fall_ns
        if tau <= 0.0 or abs(self.entry - target) < 1e-12:
            return target
        return target + (self.entry - target) * math.exp(-t / tau)

    @property
    def constant(self):
        tau = self.rise_ns if self.on else self.fall_ns
        target = 1.0 if self.on else self.floor
        return tau <= 0.0 or abs(self.entry - target) < 1e-12


def aom_envelope(params, t):
    """Amplitude factor in [floor, 1] of a switched laser at local time t."""
    return params.value(t)


@dataclass
class CompiledPhase:
    name: str
    duration: float                     # ns
    builder: GeneratorBuilder = None    # over this phase's active lasers
    envelopes: list = None              # EnvelopeParams, aligned with builder.lasers
    is_reset: bool = False

    @property
    def time_independent(self):
        return self.is_reset or all(e.constant for e in self.envelopes)

    def envelope_values(self):
        """Constant amplitude factors (valid when time_independent)."""
        return [e.value(0.0) if e.constant else None for e in self.envelopes]

    def envelope_fns(self, t_abs_start):
        fns = []
        for e in self.envelopes:
            if e.constant:
                v = e.value(0.0)
                fns.append(lambda t, v=v: v)
            else:
                fns.append(lambda t, e=e: e.value(t - t_abs_start))
        return fns


@dataclass
class PulseSequence:
    phases: list
    repetitions: int
    lasers: list
    warnings: list = field(default_factory=list)

    @property
    def period_ns(self):
        return sum(p.duration for p in self.phases)

    @property
    def repetition_rate_khz(self):
        return 1e6 / self.period_ns

    def all_lasers(self):
        return self.lasers

    def phase(self, name):
        for p in self.phases:
            if p.name.lower() == name.lower():
                return p
        raise KeyError(f"no phase named {name!r}")

    def phase_offset_ns(self, name):
        t = 0.0
        for p in self.phases:
            if p.name.lower() == name.lower():
                return t
            t += p.duration
        raise KeyError(f"no phase named {name!r}")


def _resolve_polarization(spec, direction):
    """Turn a config polarization spec into a Jones 2-vector."""
    if isinstance(spec, (list, tuple)) and len(spec) == 2 \
            and not isinstance(spec[0], str):
        def c(x):
            return complex(x[0], x[1]) if isinstance(x, (list, tuple)) else complex(x)
        jones = np.array([c(spec[0]), c(spec[1])])
        return jones / np.linalg.norm(jones)
    if isinstance(spec, str):
        kind, _, arg = spec.partition(":")
        if kind == "linear":
            chi = math.radians(float(arg or 0.0))
            return np.array([math.cos(chi), math.sin(chi)], dtype=complex)
        if kind == "circular":
            q = int(arg or "+1")
            jones, weight = pol.emission_transverse_field(q, direction)
            if weight < 1e-9:
                raise SequenceError(
                    f"circular:{q} undefined for direction {direction}")
            return jones.conj()
        if kind == "waveplate":
            inp, ret, ang = (float(x) for x in arg.split(","))
            plate = pol.waveplate_jones(ret, math.radians(ang))
            chi = math.radians(inp)
            return plate @ np.array([math.cos(chi), math.sin(chi)], dtype=complex)
    raise SequenceError(f"unknown polarization spec {spec!r}")


def _zeeman_resonant_detuning(scheme, label, sign=+1):
    """Detuning putting the laser on the Zeeman-shifted stretched channel."""
    tr = scheme.transition(str(label))
    from .atom import TERM_QUANTUM_NUMBERS
    j_l = TERM_QUANTUM_NUMBERS[tr.lower][2]
    j_u = TERM_QUANTUM_NUMBERS[tr.upper][2]
    m_l = sign * j_l
    m_u = m_l - sign if j_u < j_l else m_l + sign
    if abs(m_u) > j_u:
        raise SequenceError(f"no stretched channel for {label}")
    return scheme.state(tr.upper, m_u).energy - scheme.state(tr.lower, m_l).energy


def build_laser(scheme, spec):
    """Resolve one laser config entry into a LaserField."""
    name = spec["name"]
    label = str(spec["transition"])
    if label not in [t.label for t in scheme.transitions]:
        raise SequenceError(f"laser {name!r}: unknown transition label {label!r}")

    if spec.get("preset") == "pump45":
        direction, jones = pol.pump_polarization_45deg(int(spec.get("sign", 1)))
    else:
        direction = np.asarray(spec.get("direction", (0.0, 1.0, 0.0)), float)
        if np.linalg.norm(direction) == 0:
            raise SequenceError(f"laser {name!r}: zero direction")
        direction = direction / np.linalg.norm(direction)
        jones = _resolve_polarization(spec.get("polarization", "linear:45"),
                                      direction)

    det = spec.get("detuning_rad_us", 0.0)
    if isinstance(det, str):
        kind, _, arg = det.partition(":")
        if kind != "zeeman":
            raise SequenceError(f"laser {name!r}: unknown detuning {det!r}")
        detuning = _zeeman_resonant_detuning(scheme, label,
                                             +1 if arg in ("", "+", "+1") else -1)
    else:
        detuning = float(det) * 1e-3  # rad/us -> rad/ns

    if "rabi_rad_us" in spec:
        rabi = float(spec["rabi_rad_us"]) * 1e-3
        intensity = None
    elif "intensity_w_cm2" in spec:
        intensity = float(spec["intensity_w_cm2"])
        rabi = rabi_from_intensity(scheme, label, intensity)
    else:
        raise SequenceError(f"laser {name!r}: needs rabi_rad_us or intensity_w_cm2")

    return LaserField(name=name, transition=label, rabi=rabi, detuning=detuning,
                      direction=tuple(direction), polarization=tuple(jones),
                      intensity_w_cm2=intensity)


def compile_sequence(config, scheme):
    """Compile and validate a sequence config against a level scheme.

    Raises SequenceError for structural problems (zero-length or
    overlapping phases, unknown lasers); collects non-fatal findings
    (trigger duration outside the supported range, preparation triple off
    three-photon resonance) as warnings.
    """
    notes = []
    laser_specs = config.get("lasers", [])
    lasers = [build_laser(scheme, spec) for spec in laser_specs]
    by_name = {l.name: l for l in lasers}
    if len(by_name) != len(lasers):
        raise SequenceError("duplicate laser names")

    aom_defaults = dict(config.get("aom", {}))
    floor_default = math.sqrt(max(aom_defaults.get("extinction_ratio", 0.0), 0.0))
    rise_default = aom_defaults.get("rise_ns", 0.0)
    fall_default = aom_defaults.get("fall_ns", 0.0)

    phase_specs = config.get("phases", [])
    if not phase_specs:
        raise SequenceError("sequence has no phases")

    cursor = 0.0
    parsed = []
    for spec in phase_specs:
        name = spec.get("name")
        if name not in PHASE_NAMES:
            raise SequenceError(f"unknown phase name {name!r}")
        duration = float(spec.get("duration_ns", 0.0))
        if duration <= 0.0:
            raise SequenceError(f"phase {name!r}: duration must be > 0")
        if "start_ns" in spec and abs(float(spec["start_ns"]) - cursor) > 1e-9:
            raise SequenceError(
                f"phase {name!r}: start {spec['start_ns']} ns overlaps or leaves "
                f"a gap (expected {cursor} ns)")
        on = list(spec.get("on", []))
        for laser_name in on:
            if laser_name not in by_name:
                raise SequenceError(f"phase {name!r}: unknown laser {laser_name!r}")
        overrides = spec.get("aom", {})
        parsed.append((name, duration, set(on), overrides))
        cursor += duration

    trigger = [p for p in parsed if p[0] == "Trigger"]
    for name, duration, _, _ in trigger:
        if not TRIGGER_RANGE_NS[0] <= duration <= TRIGGER_RANGE_NS[1]:
            notes.append(
                f"trigger duration {duration} ns outside the validated "
                f"{TRIGGER_RANGE_NS[0]:.0f}-{TRIGGER_RANGE_NS[1]:.0f} ns range")

    def laser_aom(laser_name, overrides):
        cfg = dict(aom_defaults)
        cfg.update(overrides.get(laser_name, {}) if overrides else {})
        floor = math.sqrt(max(cfg.get("extinction_ratio",
                                      floor_default**2), 0.0))
        if not 0.0 <= floor <= 1.0:
            raise SequenceError(f"laser {laser_name!r}: extinction out of range")
        return floor, cfg.get("rise_ns", rise_default), cfg.get("fall_ns",
                                                                fall_default)

    # Chain envelope entry amplitudes around the cycle until stable, then
    # build one generator per phase over the lasers actually carrying light
    # there.  Frames are validated per phase: two lasers on one transition
    # conflict only when simultaneously active.
    entry = {}
    for laser in lasers:
        floor, _, _ = laser_aom(laser.name, {})
        entry[laser.name] = floor
    phases = None
    builder_cache = {}
    for _ in range(3):
        phases = []
        for name, duration, on, overrides in parsed:
            params = {}
            for laser in lasers:
                floor, rise, fall = laser_aom(laser.name, overrides)
                p = EnvelopeParams(on=laser.name in on, floor=floor,
                                   rise_ns=rise, fall_ns=fall,
                                   entry=entry[laser.name])
                params[laser.name] = p
                entry[laser.name] = p.value(duration)
            active = [l for l in lasers
                      if params[l.name].on or params[l.name].floor > 0.0
                      or params[l.name].entry > 1e-12]
            key = (name, tuple(l.name for l in active))
            if key not in builder_cache:
                builder_cache[key] = GeneratorBuilder(scheme, active)
            builder = builder_cache[key]
            envs = [params[l.name] for l in builder.lasers]
            phases.append(CompiledPhase(name=name, duration=duration,
                                        builder=builder, envelopes=envs,
                                        is_reset=(name == "Cool")))

    prep_lasers = []
    for phase, (name, _, on, _) in zip(phases, parsed):
        if name == "Prepare":
            prep_lasers = [l for l in lasers if l.name in on]
    mismatch = three_photon_mismatch(prep_lasers)
    threshold = float(config.get("resonance_warn_rad_us", 1.0)) * 1e-3
    if mismatch is not None and abs(mismatch) > threshold:
        notes.append(
            f"preparation triple misses three-photon resonance by "
            f"{mismatch * 1e3:.4g} rad/us")

    for note in notes:
        warnings.warn(note, stacklevel=2)

    return PulseSequence(phases=phases, repetitions=int(config.get(
        "repetitions", 1)), lasers=lasers, warnings=notes)
