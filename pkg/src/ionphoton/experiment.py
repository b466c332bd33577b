"""Campaign orchestration: repeated sequences, detection, stores, scans.

run_experiment streams the photon events of n repetitions through the
detection chain and returns a persisted-ready EventStore plus ground
truth.  Two engines implement the same process: "exact" runs the
quantum-jump integrator repetition by repetition (full state carryover,
arbitrary envelopes), "fast" uses the vectorized renewal engine
(rectangular envelopes, independent repetitions) and handles 1e7+
repetitions in minutes.  Both are deterministic for a fixed (config,
seed): streams are counter-based, and worker count only changes
scheduling, not results.
"""

from __future__ import annotations

import math
from multiprocessing import get_context

import numpy as np

from . import engine as eng
from .detection import ORIGIN_DARK, detect, inject_dark_counts
from .dynamics import run_trajectory
from .store import RECORD_DTYPE, EventStore, TruthRecord

_PLAN_CACHE = {}


def _resolve_engine(engine, sequence, n_repetitions):
    if engine not in ("auto", "fast", "exact"):
        raise ValueError(f"unknown engine {engine!r}")
    fast_ok = all(p.time_independent for p in sequence.phases)
    if engine == "fast" and not fast_ok:
        raise ValueError("fast engine requires rectangular (floor-only) AOM "
                         "envelopes; use engine='exact'")
    if engine == "auto":
        return "fast" if fast_ok and n_repetitions >= 512 else "exact"
    return engine


def run_experiment(sequence, scheme, chain, n_repetitions, seed,
                   engine="auto", workers=1, truth_detail="auto",
                   config_sha="", block_size=eng.BLOCK_SIZE, plan_key=None):
    """Simulate n repetitions; returns a canonical-sorted EventStore.

    truth_detail: 'full' keeps one ground-truth record per gated photon,
    'counts' keeps only per-repetition true photon counts (for very large
    campaigns), 'auto' switches at 200k repetitions.
    """
    n_repetitions = int(n_repetitions)
    engine = _resolve_engine(engine, sequence, n_repetitions)
    if truth_detail == "auto":
        truth_detail = "full" if n_repetitions <= 200_000 else "counts"

    period = sequence.period_ns
    trigger_offset = sequence.phase_offset_ns(chain.gate_phase)
    trigger_duration = sequence.phase(chain.gate_phase).duration

    if engine == "fast":
        results = _run_fast(sequence, scheme, chain, n_repetitions, seed,
                            workers, block_size, plan_key)
        store = _assemble_fast(results, sequence, chain, n_repetitions, seed,
                               truth_detail, scheme)
    else:
        store = _run_exact(sequence, scheme, chain, n_repetitions, seed,
                           truth_detail)

    dark = inject_dark_counts(chain, n_repetitions * period,
                              eng.stream(seed, eng.PURPOSE_DARK, 0))
    if dark:
        darr = np.zeros(len(dark), dtype=RECORD_DTYPE)
        darr["detector"] = [r.detector_id for r in dark]
        darr["origin"] = ORIGIN_DARK
        darr["timestamp_ps"] = [r.timestamp_ps for r in dark]
        store.records = np.concatenate([store.records, darr])
    store.canonical_sort()
    store.config_sha = config_sha
    store.constants_sha = scheme.constants.sha256
    store.trigger_offset_ns = trigger_offset
    store.trigger_duration_ns = trigger_duration
    store.summary["engine"] = engine
    store.summary["dark_counts"] = int(len(dark))
    _budget_summary(store, sequence)
    return store


def _run_fast(sequence, scheme, chain, n_reps, seed, workers, block_size,
              plan_key):
    if plan_key is not None and plan_key in _PLAN_CACHE:
        plan = _PLAN_CACHE[plan_key]
    else:
        plan = eng.build_plan(scheme, sequence, chain)
        if plan_key is not None:
            _PLAN_CACHE[plan_key] = plan
    blocks = [(b, b * block_size, min(block_size, n_reps - b * block_size))
              for b in range((n_reps + block_size - 1) // block_size)]
    args = [(scheme, plan, chain, seed, b, rep0, n) for b, rep0, n in blocks]
    if workers > 1 and len(blocks) > 1:
        with get_context("fork").Pool(workers) as pool:
            results = pool.starmap(eng.run_fast_block, args)
    else:
        results = [eng.run_fast_block(*a) for a in args]
    return results


def _assemble_fast(results, sequence, chain, n_reps, seed, truth_detail,
                   scheme):
    records = np.zeros(sum(r.record_det.size for r in results),
                       dtype=RECORD_DTYPE)
    pos = 0
    stage = {}
    for r in results:
        k = r.record_det.size
        records["detector"][pos:pos + k] = r.record_det
        records["origin"][pos:pos + k] = r.record_origin
        records["timestamp_ps"][pos:pos + k] = r.record_t_ps
        pos += k
        for key, v in r.stage_counts.items():
            stage[key] = stage.get(key, 0) + v

    store = EventStore(records=records, n_repetitions=n_reps,
                       period_ns=sequence.period_ns, trigger_offset_ns=0.0,
                       trigger_duration_ns=0.0, seed=seed)
    store.summary["counts"] = stage
    store.summary["truth_scope"] = "gate-window"
    store.summary["doubles"] = int(sum(r.photon_second.sum() for r in results))

    if truth_detail == "full":
        from .dynamics import build_jump_channels
        table = build_jump_channels(scheme)
        for r in results:
            for i in range(r.photon_rep.size):
                ch = table[r.photon_channel[i]]
                store.truth.append(TruthRecord(
                    rep=int(r.photon_rep[i]), t_ns=float(r.photon_t[i]),
                    q=int(r.photon_q[i]), upper=ch.upper_name,
                    lower=ch.lower_name, label=ch.label,
                    second=bool(r.photon_second[i]),
                    detected=int(r.photon_detected[i]),
                    direction=tuple(np.round(r.photon_dir[i], 9))))
    counts = np.zeros(n_reps, dtype=np.int32)
    for r in results:
        np.add.at(counts, r.photon_rep, 1)
    store.truth_counts = counts
    return store


def _run_exact(sequence, scheme, chain, n_reps, seed, truth_detail):
    period = sequence.period_ns
    gate_offset = sequence.phase_offset_ns(chain.gate_phase)
    gate_end = gate_offset + sequence.phase(chain.gate_phase).duration
    records = []
    truth = []
    counts = np.zeros(n_reps, dtype=np.int32)
    stage = {"generated": 0, "in_cone": 0, "fiber": 0, "analyzer": 0,
             "detected": 0, "reps_with_photon": 0}
    carry = None
    for rep in range(n_reps):
        rng = eng.stream(seed, eng.PURPOSE_DYNAMICS, rep)
        rng_det = eng.stream(seed, eng.PURPOSE_DETECTION, rep)
        events, final = run_trajectory(scheme, sequence, rng,
                                       initial_state=carry,
                                       sequence_index=rep)
        carry = final.amplitudes
        blue_seen = 0
        for ev in events:
            gated = (ev.label in chain.gate_labels
                     and gate_offset <= ev.time_ns < gate_end)
            if not gated:
                if truth_detail == "full":
                    truth.append(TruthRecord(
                        rep=rep, t_ns=ev.time_ns, q=ev.q, upper=ev.upper,
                        lower=ev.lower, label=ev.label, detected=-1))
                continue
            blue_seen += 1
            counts[rep] += 1
            stage["generated"] += 1
            t_in_rep = ev.time_ns
            ev.time_ns = rep * period + t_in_rep
            rec = detect(ev, chain, rng_det)
            ev.time_ns = t_in_rep
            det_id = -1
            if rec is not None:
                det_id = rec.detector_id
                origin = rec.origin if blue_seen == 1 else 2
                records.append((rec.detector_id, origin, rec.timestamp_ps))
                stage["detected"] += 1
            if truth_detail == "full":
                truth.append(TruthRecord(
                    rep=rep, t_ns=t_in_rep, q=ev.q, upper=ev.upper,
                    lower=ev.lower, label=ev.label, second=blue_seen > 1,
                    detected=det_id,
                    direction=None if ev.direction is None
                    else tuple(np.round(ev.direction, 9))))
        if blue_seen:
            stage["reps_with_photon"] += 1

    arr = np.zeros(len(records), dtype=RECORD_DTYPE)
    for i, (d, o, t) in enumerate(records):
        arr["detector"][i], arr["origin"][i], arr["timestamp_ps"][i] = d, o, t
    store = EventStore(records=arr, n_repetitions=n_reps, period_ns=period,
                       trigger_offset_ns=gate_offset,
                       trigger_duration_ns=gate_end - gate_offset, seed=seed)
    store.truth = truth
    store.truth_counts = counts
    store.summary["counts"] = stage
    store.summary["truth_scope"] = "all-phases" if truth_detail == "full" \
        else "gate-window"
    store.summary["doubles"] = int((counts >= 2).sum())
    return store


def _budget_summary(store, sequence):
    """Rate bookkeeping: cascade fractions and their exact product."""
    c = store.summary.get("counts", {})
    duration_s = store.duration_ns * 1e-9
    n = store.n_repetitions

    def rate_khz(count):
        return count / duration_s / 1e3 if duration_s > 0 else 0.0

    gen = c.get("generated", 0)
    fractions = {
        "generation_per_rep": gen / n if n else 0.0,
        "reps_with_photon": c.get("reps_with_photon", 0) / n if n else 0.0,
        "collected_given_generated": c.get("in_cone", 0) / gen if gen else 0.0,
        "fiber_given_collected": (c.get("fiber", 0) / c["in_cone"]
                                  if c.get("in_cone") else 0.0),
        "analyzer_given_fiber": (c.get("analyzer", 0) / c["fiber"]
                                 if c.get("fiber") else 0.0),
        "qe_given_analyzer": (c.get("detected", 0) / c["analyzer"]
                              if c.get("analyzer") else 0.0),
        "detected_given_generated": (c.get("detected", 0) / gen
                                     if gen else 0.0),
    }
    rates = {
        "repetition_khz": 1e6 / sequence.period_ns,
        "generated_khz": rate_khz(gen),
        "collected_khz": rate_khz(c.get("in_cone", 0)),
        "fiber_coupled_khz": rate_khz(c.get("fiber", 0)),
        "detected_khz": rate_khz(c.get("detected", 0)),
    }
    chain_product = rates["generated_khz"]
    for key in ("collected_given_generated", "fiber_given_collected",
                "analyzer_given_fiber", "qe_given_analyzer"):
        chain_product *= fractions[key]
    store.summary["fractions"] = fractions
    store.summary["rates_khz"] = rates
    store.summary["budget_chain_product_khz"] = chain_product


def scan(base_config, campaign, constants=None, workers=1, run_kwargs=None):
    """One run_experiment per grid point of a single swept parameter.

    campaign: {"parameter": name, "values": [...]} with parameter one of
    'intensity_854', 'trigger_qwp_deg', 'analyzer_qwp_deg',
    'extinction_floor'.  Returns a list of (value, store) pairs in grid
    order; summaries are computed by the caller (see analysis module).
    """
    from .config import build_all

    values = list(campaign.get("values", []))
    if not values:
        raise ValueError("campaign grid is empty")
    parameter = campaign.get("parameter")
    run_kwargs = dict(run_kwargs or {})

    points = []
    for v in values:
        cfg = _apply_parameter(base_config, parameter, v)
        scheme, sequence, chain = build_all(cfg, constants)
        seed = int(cfg.get("seed", 0))
        store = run_experiment(
            sequence, scheme, chain, int(cfg.get("repetitions", 1000)),
            seed, engine=cfg.get("engine", "auto"),
            workers=workers, **run_kwargs)
        points.append((v, store))
    return points


def _apply_parameter(base_config, parameter, value):
    import copy
    cfg = copy.deepcopy(base_config)
    seq = cfg["sequence"]
    if parameter == "intensity_854":
        for laser in seq["lasers"]:
            if laser["transition"] == "854" and laser.get("role") != "pump":
                laser.pop("rabi_rad_us", None)
                laser["intensity_w_cm2"] = float(value)
    elif parameter == "trigger_qwp_deg":
        for laser in seq["lasers"]:
            if laser["transition"] == "854" and laser.get("role") != "pump":
                wp = laser.get("waveplate", {})
                inp = wp.get("input_angle_deg", 0.0)
                ret = wp.get("retardance", math.pi / 2)
                laser["polarization"] = f"waveplate:{inp},{ret},{float(value)}"
    elif parameter == "analyzer_qwp_deg":
        det = cfg.setdefault("detection", {})
        det["analyzer_fast_axis_deg"] = float(value)
    elif parameter == "extinction_floor":
        seq.setdefault("aom", {})["extinction_ratio"] = float(value)
    else:
        raise ValueError(f"unknown scan parameter {parameter!r}")
    return cfg
