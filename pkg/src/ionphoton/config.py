"""Run configuration: JSON schema, validation, builders and presets.

A run config is a JSON-serializable dict with sections "sequence"
(phases/lasers/aom, see sequence module) and "detection" (chain
overrides), plus seed / repetitions / engine.  Presets reproduce the
experimental operating points; every preset keeps the three-photon
resonance condition delta_397 - delta_866 + delta_850 = 0 of the
preparation triple.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

from .atom import build_level_scheme
from .constants import load_constants
from .detection import DetectionChain, Detector, PolarizationAnalyzer
from .sequence import compile_sequence
from .store import config_hash


class ConfigError(ValueError):
    pass


def load_config(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc


def validate_config(config):
    """Structural validation; returns a list of error strings."""
    errors = []
    if not isinstance(config, dict):
        return ["config must be a JSON object"]
    seq = config.get("sequence")
    if not isinstance(seq, dict):
        errors.append("missing 'sequence' section")
    else:
        if not seq.get("phases"):
            errors.append("sequence.phases is empty")
        if not seq.get("lasers"):
            errors.append("sequence.lasers is empty")
    reps = config.get("repetitions", 1)
    if not isinstance(reps, int) or reps < 0:
        errors.append("repetitions must be a non-negative integer")
    if "seed" in config and not isinstance(config["seed"], int):
        errors.append("seed must be an integer")
    cpath = config.get("constants_path")
    if cpath and not Path(cpath).exists():
        errors.append(f"constants file {cpath!r} does not exist")
    return errors


def build_chain(detection_cfg, constants):
    """DetectionChain from the config section plus constants defaults."""
    cfg = dict(detection_cfg or {})
    det = constants.detection

    def get(name, default=None):
        return cfg.get(name, det.get(name, default))

    analyzer_det = cfg.get("analyzer_detector")
    retardance = cfg.get("analyzer_retardance", "calibrated")
    if retardance == "calibrated":
        retardance = det.get("analyzer_retardance", math.pi / 2)
    elif retardance == "ideal":
        retardance = math.pi / 2
    analyzer = None
    if analyzer_det is not None:
        analyzer = PolarizationAnalyzer(
            retardance=float(retardance),
            fast_axis_angle=math.radians(cfg.get("analyzer_fast_axis_deg", 0.0)),
            port=cfg.get("analyzer_port", "transmit"))
    detectors = []
    for i, sign in ((0, +1), (1, -1)):
        detectors.append(Detector(
            detector_id=i, axis_sign=sign,
            numerical_aperture=float(get("numerical_aperture", 0.4)),
            fiber_coupling=float(get("fiber_coupling", 1.0)),
            quantum_efficiency=float(get("quantum_efficiency", 1.0)),
            dark_count_hz=float(get("dark_count_hz", 0.0)),
            timing_jitter_ns=float(get("timing_jitter_ns", 0.0)),
            analyzer=analyzer if analyzer_det == i else None))
    return DetectionChain(detectors=detectors,
                          gate_phase=cfg.get("gate_phase", "Trigger"),
                          gate_labels=tuple(cfg.get("gate_labels", ("393",))))


def build_all(config, constants=None):
    """(scheme, sequence, chain) from a validated config dict."""
    errors = validate_config(config)
    if errors:
        raise ConfigError("; ".join(errors))
    if constants is None:
        constants = load_constants(config.get("constants_path"))
    scheme = build_level_scheme(
        constants, magnetic_field_gauss=config.get("magnetic_field_gauss"))
    sequence = compile_sequence(config["sequence"], scheme)
    chain = build_chain(config.get("detection"), constants)
    return scheme, sequence, chain


def hash_config(config):
    return config_hash(config)


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

# preparation triple: 397/866 red-detuned by the same amount (two-photon
# S-D32 resonance), 850 on resonance => three-photon resonant path to P32.
PREP_DETUNING_RAD_US = -900.0
PREP_RABI_RAD_US = {"397": 700.0, "866": 900.0, "850": 420.0}


def _prep_lasers():
    return [
        {"name": "laser397", "transition": "397",
         "rabi_rad_us": PREP_RABI_RAD_US["397"],
         "detuning_rad_us": PREP_DETUNING_RAD_US,
         "direction": [0, 1, 0], "polarization": "linear:45"},
        {"name": "laser866", "transition": "866",
         "rabi_rad_us": PREP_RABI_RAD_US["866"],
         "detuning_rad_us": PREP_DETUNING_RAD_US,
         "direction": [0, 1, 0], "polarization": "linear:40"},
        {"name": "laser850", "transition": "850",
         "rabi_rad_us": PREP_RABI_RAD_US["850"],
         "detuning_rad_us": 0.0,
         "direction": [0, 1, 0], "polarization": "linear:50"},
    ]


def paper_config(mode="mixture", trigger_intensity_w_cm2=17.0,
                 trigger_rabi_rad_us=None, trigger_polarization=None,
                 cool_ns=600.0, prepare_ns=2000.0, trigger_ns=2254.0,
                 extinction_ratio=0.0, rise_ns=0.0, fall_ns=0.0,
                 pump_sign=+1, pump_rabi_rad_us=350.0, repetitions=1000,
                 seed=1, engine="auto", detection=None):
    """Config dict for the standard cool / prepare / trigger cycle.

    mode 'mixture' prepares the statistical D52 mixture (no 854 pump);
    'pumped' adds the 45-degree pump that empties everything into the
    m = pump_sign * 5/2 stretched state and defaults the trigger to the
    matching circular polarization.
    """
    lasers = _prep_lasers()
    trigger = {"name": "trigger854", "transition": "854",
               "direction": [0, 0, 1]}
    if trigger_rabi_rad_us is not None:
        trigger["rabi_rad_us"] = float(trigger_rabi_rad_us)
    else:
        trigger["intensity_w_cm2"] = float(trigger_intensity_w_cm2)

    on_prepare = ["laser397", "laser866", "laser850"]
    if mode == "mixture":
        trigger["detuning_rad_us"] = 0.0
        trigger["polarization"] = trigger_polarization or "linear:0"
    elif mode == "pumped":
        sign = "+1" if pump_sign > 0 else "-1"
        trigger["detuning_rad_us"] = f"zeeman:{sign}"
        trigger["polarization"] = trigger_polarization or \
            f"circular:{-pump_sign}"
        lasers.append({"name": "pump854", "transition": "854",
                       "rabi_rad_us": float(pump_rabi_rad_us),
                       "detuning_rad_us": f"zeeman:{sign}",
                       "preset": "pump45", "sign": pump_sign})
        on_prepare = on_prepare + ["pump854"]
    else:
        raise ConfigError(f"unknown preparation mode {mode!r}")
    lasers.append(trigger)

    sequence = {
        "phases": [
            {"name": "Cool", "duration_ns": cool_ns,
             "on": ["laser397", "laser866"]},
            {"name": "Prepare", "duration_ns": prepare_ns, "on": on_prepare},
            {"name": "Trigger", "duration_ns": trigger_ns,
             "on": ["trigger854"]},
        ],
        "lasers": lasers,
        "aom": {"extinction_ratio": extinction_ratio, "rise_ns": rise_ns,
                "fall_ns": fall_ns},
    }
    return {
        "sequence": sequence,
        "detection": dict(detection or {}),
        "repetitions": int(repetitions),
        "seed": int(seed),
        "engine": engine,
    }


def g2_campaign_config(constants, duration_s=360.0, repetition_khz=206.0,
                       extinction_ratio=None, seed=7, dark_count_hz=None):
    """The antibunching campaign: mixture mode, calibrated leakage floor."""
    if extinction_ratio is None:
        extinction_ratio = constants.aom.get("extinction_ratio", 0.0)
    period_ns = 1e6 / repetition_khz
    trigger_ns = period_ns - 600.0 - 2000.0
    reps = int(round(duration_s * repetition_khz * 1e3))
    cfg = paper_config(mode="mixture", trigger_intensity_w_cm2=17.0,
                       trigger_ns=trigger_ns,
                       extinction_ratio=extinction_ratio,
                       repetitions=reps, seed=seed, engine="fast")
    cfg["detection"] = {
        "fiber_coupling": constants.detection.get("fiber_coupling", 1.0),
        "quantum_efficiency": constants.detection.get("quantum_efficiency", 1.0),
        "dark_count_hz": constants.detection.get("dark_count_hz", 0.0)
        if dark_count_hz is None else dark_count_hz,
        "timing_jitter_ns": constants.detection.get("timing_jitter_ns", 0.0),
    }
    return cfg


def budget_config(constants, repetition_khz=230.0, prepare_ns=1000.0,
                  repetitions=200_000, seed=11):
    """Rate-bookkeeping operating point: short preparation trades transfer
    efficiency for repetition rate."""
    period_ns = 1e6 / repetition_khz
    trigger_ns = period_ns - 600.0 - prepare_ns
    cfg = paper_config(mode="mixture", trigger_intensity_w_cm2=67.0,
                       prepare_ns=prepare_ns, trigger_ns=trigger_ns,
                       repetitions=repetitions, seed=seed, engine="fast")
    cfg["detection"] = {
        "fiber_coupling": constants.detection.get("fiber_coupling", 1.0),
        "quantum_efficiency": constants.detection.get("quantum_efficiency", 1.0),
    }
    return cfg


PRESETS = {
    "mixture": lambda c: paper_config(),
    "pumped": lambda c: paper_config(mode="pumped"),
    "g2": g2_campaign_config,
    "budget230": budget_config,
}


def preset_config(name, constants=None, **kwargs):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; have {sorted(PRESETS)}")
    if constants is None:
        constants = load_constants()
    fn = PRESETS[name]
    cfg = fn(constants) if not kwargs else _preset_with_kwargs(name, constants,
                                                               **kwargs)
    return cfg


def _preset_with_kwargs(name, constants, **kwargs):
    if name == "mixture":
        return paper_config(**kwargs)
    if name == "pumped":
        return paper_config(mode="pumped", **kwargs)
    if name == "g2":
        return g2_campaign_config(constants, **kwargs)
    if name == "budget230":
        return budget_config(constants, **kwargs)
    raise ConfigError(name)
