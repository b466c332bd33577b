"""Vectorized repetition engine built on precomputed no-jump flows.

For phases whose effective generator is time-independent (rectangular
envelopes, constant leakage floors) the Monte-Carlo unraveling has a
renewal structure: every jump collapses onto a basis state, so the
deterministic no-jump evolution from each of the 18 basis states can be
precomputed once (by eigendecomposition of the non-Hermitian generator)
and a repetition reduces to a handful of table lookups: invert the
survival (squared-norm) curve at a pre-drawn uniform threshold, draw the
channel from tabulated excited-state populations, restart the flow from
the channel's lower state.  This samples exactly the same process as
dynamics.run_trajectory, at microseconds per repetition.

The preparation phase is applied as a basis-state transition kernel
derived from the density-matrix propagator (inter-Zeeman coherences
dephase within tens of ns at the default field, well below phase
durations).  Repetitions are treated as independent; the slow exact
engine keeps full state carryover across repetitions instead.

Reproducibility: random numbers come from counter-based Philox streams
keyed by (seed, purpose, block), so results are invariant to worker count
and scheduling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from . import polarization as pol
from .detection import ORIGIN_LEAKAGE, ORIGIN_SIGNAL
from .dynamics import LindbladPropagator

BLOCK_SIZE = 1 << 16
PURPOSE_DYNAMICS, PURPOSE_DETECTION, PURPOSE_DARK = 0, 1, 2
MAX_JUMPS_PER_PHASE = 400


def stream(seed, purpose, block):
    """Counter-based per-(purpose, block) random stream."""
    counter = np.array([0, purpose, block, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=np.uint64(seed),
                                                counter=counter))


def _time_grid(duration, n_points=3200, dt0=0.02):
    dt0 = min(dt0, duration / 64.0)
    grid = np.geomspace(dt0, duration, n_points - 1)
    return np.concatenate(([0.0], grid))


class PhaseFlow:
    """No-jump flow tables from every basis state through one phase."""

    def __init__(self, builder, env_values, duration, n_points=3200):
        self.duration = float(duration)
        h = builder.matrix(env_values)
        n = h.shape[0]
        self.grid = _time_grid(self.duration, n_points)
        amps = self._propagate(h, self.grid)            # (T, n, n): [t, i, b]
        pops = np.abs(amps) ** 2                        # populations
        self.pops = np.ascontiguousarray(pops.transpose(2, 0, 1))  # (b, t, i)
        norm2 = self.pops.sum(axis=2)                   # (b, t)
        norm2 = np.minimum.accumulate(np.clip(norm2, 1e-300, None), axis=1)
        self.neglog = -np.log(norm2)                    # increasing in t
        self.norm2 = norm2

        ch = builder.channels
        self.chan_rate = np.array([c.rate for c in ch])
        self.chan_upper = np.array([c.upper_index for c in ch])
        self.chan_lower = np.array([c.lower_index for c in ch], dtype=np.int16)
        self.chan_q = np.array([c.q for c in ch], dtype=np.int8)
        self.chan_label = [c.label for c in ch]
        self.channels = ch

    @staticmethod
    def _propagate(h, grid):
        lam, vecs = np.linalg.eig(h)
        cond_ok = True
        try:
            vinv = np.linalg.inv(vecs)
            err = np.linalg.norm(vecs @ np.diag(lam) @ vinv - h)
            cond_ok = err <= 1e-8 * max(1.0, np.linalg.norm(h))
        except np.linalg.LinAlgError:
            cond_ok = False
        if cond_ok:
            w = np.exp(-1j * np.outer(grid, lam))       # (T, n)
            return np.einsum("ij,tj,jb->tib", vecs, w, vinv, optimize=True)
        # defective generator: integrate the propagator instead
        from scipy.integrate import solve_ivp
        n = h.shape[0]

        def rhs(t, u):
            return (-1j * h @ u.reshape(n, n)).reshape(-1)

        sol = solve_ivp(rhs, (grid[0], grid[-1]), np.eye(n, dtype=complex).reshape(-1),
                        t_eval=grid, rtol=1e-10, atol=1e-12)
        return sol.y.T.reshape(len(grid), n, n)

    def invert_survival(self, states, u):
        """Jump delays tau with S_b(tau) = u; +inf when no jump on the grid."""
        tau = np.full(states.size, np.inf)
        x = -np.log(u)
        for b in np.unique(states):
            rows = np.nonzero(states == b)[0]
            neg = self.neglog[b]
            idx = np.searchsorted(neg, x[rows], side="left")
            inside = idx < neg.size
            r, i = rows[inside], idx[inside]
            lo = np.maximum(i - 1, 0)
            n1, n2 = neg[lo], neg[i]
            t1, t2 = self.grid[lo], self.grid[i]
            frac = np.where(n2 > n1, (x[r] - n1) / np.where(n2 > n1, n2 - n1, 1.0),
                            0.0)
            tau[r] = t1 + frac * (t2 - t1)
        return tau

    def _interp_pops(self, states, t):
        """Linear-in-time populations (len(states), n_states) at times t."""
        out = np.empty((states.size, self.pops.shape[2]))
        tc = np.clip(t, 0.0, self.duration)
        for b in np.unique(states):
            rows = np.nonzero(states == b)[0]
            idx = np.clip(np.searchsorted(self.grid, tc[rows]), 1,
                          self.grid.size - 1)
            t1, t2 = self.grid[idx - 1], self.grid[idx]
            w = (tc[rows] - t1) / (t2 - t1)
            out[rows] = (1 - w[:, None]) * self.pops[b, idx - 1] \
                + w[:, None] * self.pops[b, idx]
        return out

    def sample_channel(self, states, t, rng):
        pops = self._interp_pops(states, t)
        weights = pops[:, self.chan_upper] * self.chan_rate[None, :]
        cum = np.cumsum(weights, axis=1)
        total = cum[:, -1]
        # rates can only vanish by interpolation noise; guard the draw
        total = np.where(total <= 0, 1.0, total)
        u = rng.uniform(size=states.size) * total
        return (cum < u[:, None]).sum(axis=1).clip(0, len(self.chan_rate) - 1)

    def sample_end_state(self, states, remaining, rng):
        pops = self._interp_pops(states, remaining)
        pops = np.clip(pops, 0.0, None)
        cum = np.cumsum(pops, axis=1)
        total = cum[:, -1]
        u = rng.uniform(size=states.size) * total
        return (cum < u[:, None]).sum(axis=1).clip(0, pops.shape[1] - 1) \
            .astype(np.int16)


def renewal_phase(flow, states, rng):
    """Advance all repetitions through one renewal phase.

    Returns (rep_idx, t_in_phase, channel) arrays of the jumps; `states`
    is updated in place to the end-of-phase basis states.
    """
    n = states.size
    t0 = np.zeros(n)
    active = np.arange(n)
    out_rep, out_t, out_ch = [], [], []
    for _ in range(MAX_JUMPS_PER_PHASE):
        if active.size == 0:
            break
        u = rng.uniform(size=active.size)
        tau = flow.invert_survival(states[active], u)
        remaining = flow.duration - t0[active]
        jumps = tau <= remaining
        done = active[~jumps]
        if done.size:
            end = flow.sample_end_state(states[done], flow.duration - t0[done],
                                        rng)
            states[done] = end
        jid = active[jumps]
        if jid.size:
            tj = tau[jumps]
            ch = flow.sample_channel(states[jid], tj, rng)
            out_rep.append(jid.copy())
            out_t.append(t0[jid] + tj)
            out_ch.append(ch)
            states[jid] = flow.chan_lower[ch]
            t0[jid] += tj
        active = jid
    else:
        raise RuntimeError("jump chain exceeded MAX_JUMPS_PER_PHASE")
    if not out_rep:
        empty = np.array([], dtype=int)
        return empty, np.array([]), empty
    return (np.concatenate(out_rep), np.concatenate(out_t),
            np.concatenate(out_ch))


def cooling_kernel(scheme, states, rng):
    """Vectorized internal-state reset: keep D52, recycle the rest to S12."""
    d52 = np.array([s.index for s in scheme.states_of("D52")])
    s12 = np.array([s.index for s in scheme.states_of("S12")])
    keep = np.isin(states, d52)
    n_reset = int((~keep).sum())
    states[~keep] = s12[rng.integers(0, s12.size, size=n_reset)].astype(np.int16)
    return states


def preparation_kernel(scheme, sequence, phase):
    """Basis-to-basis transition matrix of the preparation phase.

    Row b is the diagonal of the density matrix after evolving |b><b|
    through the phase with its constant envelope values.
    """
    prop = LindbladPropagator(scheme, sequence.all_lasers())
    env = phase.envelope_values()
    liou = prop.matrix(env)
    prop_matrix = expm(liou * phase.duration)
    n = scheme.n_states
    starts = np.zeros((n * n, n))
    for b in range(n):
        starts[b * n + b, b] = 1.0
    finals = prop_matrix @ starts                     # (n*n, n)
    kernel = np.empty((n, n))
    for b in range(n):
        rho = finals[:, b].reshape(n, n)
        kernel[b] = np.clip(np.diag(rho).real, 0.0, None)
    kernel /= kernel.sum(axis=1, keepdims=True)
    return kernel


def apply_kernel(kernel, states, rng):
    cum = np.cumsum(kernel, axis=1)
    u = rng.uniform(size=states.size)
    out = np.empty_like(states)
    for b in np.unique(states):
        rows = np.nonzero(states == b)[0]
        out[rows] = np.searchsorted(cum[b], u[rows], side="right")
    return np.clip(out, 0, kernel.shape[1] - 1).astype(np.int16)


# ---------------------------------------------------------------------------
# vectorized detection
# ---------------------------------------------------------------------------

def sample_directions_by_q(q_values, rng):
    dirs = np.empty((q_values.size, 3))
    for q in (-1, 0, 1):
        mask = q_values == q
        if mask.any():
            dirs[mask] = pol.sample_emission_direction(q, rng,
                                                       size=int(mask.sum()))
    return dirs


def analyzer_probabilities(q_values, directions, detector):
    """Vectorized waveplate+splitter transmission for q-photons."""
    an = detector.analyzer
    d = np.array([0.0, 0.0, float(detector.axis_sign)])
    x_d, y_d = pol._orthonormal_transverse(d)
    basis = pol.spherical_unit_vectors((0, 0, 1))
    n = directions / np.linalg.norm(directions, axis=1, keepdims=True)

    e_q = np.empty((q_values.size, 3), dtype=complex)
    for q in (-1, 0, 1):
        mask = q_values == q
        if mask.any():
            e_q[mask] = basis[q]
    dot = (n * e_q).sum(axis=1)
    efield = e_q - dot[:, None] * n

    cos_t = np.clip(n @ d, -1.0, 1.0)
    nx, ny = n @ x_d, n @ y_d
    phi = np.arctan2(ny, nx)
    sin_t = np.sqrt(np.clip(1.0 - cos_t**2, 0.0, None))
    cphi, sphi = np.cos(phi), np.sin(phi)
    theta_hat = (cos_t * cphi)[:, None] * x_d + (cos_t * sphi)[:, None] * y_d \
        - sin_t[:, None] * d
    phi_hat = (-sphi)[:, None] * x_d + cphi[:, None] * y_d
    e_theta = (theta_hat * efield).sum(axis=1)
    e_phi = (phi_hat * efield).sum(axis=1)
    jones = np.stack([e_theta * cphi - e_phi * sphi,
                      e_theta * sphi + e_phi * cphi], axis=1)
    norm2 = np.real((jones.conj() * jones).sum(axis=1))
    plate = pol.waveplate_jones(an.retardance, an.fast_axis_angle)
    out = jones @ plate.T
    k = 0 if an.port == "transmit" else 1
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.abs(out[:, k]) ** 2 / norm2
    return np.where(norm2 > 0, p, 0.0)


@dataclass
class BlockResult:
    photon_rep: np.ndarray        # global repetition index per photon
    photon_t: np.ndarray          # time within the repetition, ns
    photon_q: np.ndarray
    photon_channel: np.ndarray    # index into flow channel table
    photon_second: np.ndarray     # bool: ordinal >= 2 within its repetition
    photon_detected: np.ndarray   # detector id or -1
    photon_dir: np.ndarray        # sampled directions (gated photons)
    record_det: np.ndarray
    record_t_ps: np.ndarray
    record_origin: np.ndarray
    stage_counts: dict


def run_fast_block(scheme, plan, chain, seed, block_index, rep0, n_reps):
    """Simulate one block of repetitions with the renewal engine."""
    rng = stream(seed, PURPOSE_DYNAMICS, block_index)
    rng_det = stream(seed, PURPOSE_DETECTION, block_index)
    s12_up = scheme.state("S12", 0.5).index
    states = np.full(n_reps, s12_up, dtype=np.int16)

    all_rep, all_t, all_ch, all_q = [], [], [], []
    gate_flow = None
    for kind, phase, payload in plan:
        if kind == "reset":
            cooling_kernel(scheme, states, rng)
        elif kind == "kernel":
            states = apply_kernel(payload, states, rng)
        else:
            flow, offset, gated = payload
            rep_idx, t_in_phase, ch = renewal_phase(flow, states, rng)
            if gated and rep_idx.size:
                all_rep.append(rep_idx)
                all_t.append(t_in_phase + offset)
                all_ch.append(ch)
                all_q.append(flow.chan_q[ch])
                gate_flow = flow

    if all_rep:
        rep = np.concatenate(all_rep)
        t = np.concatenate(all_t)
        ch = np.concatenate(all_ch)
        qv = np.concatenate(all_q).astype(np.int8)
        order = np.lexsort((t, rep))
        rep, t, ch, qv = rep[order], t[order], ch[order], qv[order]
    else:
        rep = np.array([], dtype=int)
        t = np.array([])
        ch = np.array([], dtype=int)
        qv = np.array([], dtype=np.int8)

    # keep only the gate wavelength (e.g. 393) for detection and truth
    if gate_flow is not None and rep.size:
        labels = np.array(gate_flow.chan_label)[ch]
        keep = np.isin(labels, list(chain.gate_labels))
        rep, t, ch, qv = rep[keep], t[keep], ch[keep], qv[keep]

    # ordinal within repetition (leakage flag for 2nd+ photons)
    second = np.zeros(rep.size, dtype=bool)
    if rep.size:
        first_of_rep = np.ones(rep.size, dtype=bool)
        first_of_rep[1:] = rep[1:] != rep[:-1]
        second = ~first_of_rep

    # detection cascade
    dirs = sample_directions_by_q(qv, rng_det)
    detected = np.full(rep.size, -1, dtype=np.int8)
    rec_det, rec_t, rec_origin = [], [], []
    stage = {"generated": int(rep.size), "in_cone": 0, "fiber": 0,
             "analyzer": 0, "detected": 0,
             "reps_with_photon": int(np.unique(rep).size)}
    for det in chain.detectors:
        axis = det.axis
        in_cone = (dirs @ axis >= det.cos_cone) & (detected < 0)
        stage["in_cone"] += int(in_cone.sum())
        alive = in_cone.copy()
        idx = np.nonzero(alive)[0]
        u = rng_det.uniform(size=idx.size)
        idx = idx[u < det.fiber_coupling]
        stage["fiber"] += idx.size
        if det.analyzer is not None and idx.size:
            p = analyzer_probabilities(qv[idx], dirs[idx], det)
            u = rng_det.uniform(size=idx.size)
            idx = idx[u < p]
        stage["analyzer"] += idx.size
        u = rng_det.uniform(size=idx.size)
        idx = idx[u < det.quantum_efficiency]
        stage["detected"] += idx.size
        detected[idx] = det.detector_id
        if idx.size:
            t_abs = (rep0 + rep[idx]) * plan_period(plan) + t[idx]
            if det.timing_jitter_ns > 0:
                t_abs = t_abs + det.timing_jitter_ns * \
                    rng_det.standard_normal(idx.size)
            rec_det.append(np.full(idx.size, det.detector_id, dtype=np.uint8))
            rec_t.append(np.round(t_abs * 1000.0).astype(np.int64))
            rec_origin.append(np.where(second[idx], ORIGIN_LEAKAGE,
                                       ORIGIN_SIGNAL).astype(np.uint8))

    return BlockResult(
        photon_rep=rep0 + rep, photon_t=t, photon_q=qv, photon_channel=ch,
        photon_second=second, photon_detected=detected, photon_dir=dirs,
        record_det=(np.concatenate(rec_det) if rec_det
                    else np.array([], dtype=np.uint8)),
        record_t_ps=(np.concatenate(rec_t) if rec_t
                     else np.array([], dtype=np.int64)),
        record_origin=(np.concatenate(rec_origin) if rec_origin
                       else np.array([], dtype=np.uint8)),
        stage_counts=stage)


def plan_period(plan):
    return sum(phase.duration for _, phase, _ in plan)


def build_plan(scheme, sequence, chain, n_points=3200):
    """Resolve a compiled sequence into the fast engine's phase plan.

    Requires every non-reset phase to have constant envelopes.  Preparation
    phases become density-matrix kernels; the rest become renewal flows.
    """
    plan = []
    offset = 0.0
    for phase in sequence.phases:
        if phase.is_reset:
            plan.append(("reset", phase, None))
        elif not phase.time_independent:
            raise ValueError(
                f"phase {phase.name!r} has time-dependent envelopes; "
                "the fast engine requires rectangular (floor-only) switching")
        elif phase.name == "Prepare":
            plan.append(("kernel", phase,
                         preparation_kernel(scheme, sequence, phase)))
        else:
            flow = PhaseFlow(phase.builder, phase.envelope_values(),
                             phase.duration, n_points=n_points)
            gated = phase.name.lower() == chain.gate_phase.lower()
            plan.append(("renewal", phase, (flow, offset, gated)))
        offset += phase.duration
    return plan
