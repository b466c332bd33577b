"""Estimators over time-tag streams and ground truth.

Wave-packet duration conventions (fixed, used throughout):

* `wave_packet_length` implements the reported "length": for oscillatory
  arrival densities (Rabi regime) it is the 1/e time of the exponential
  envelope fitted through the local maxima; otherwise the 1/e time of an
  exponential fit to the tail.
* `quantile_duration` is the time by which a 1 - 1/e fraction of the
  photons arrived.  For an exponential shape both definitions coincide;
  in the saturated regime the envelope length approaches 2 tau(P32) for
  every intensity, so intensity orderings use the quantile measure.
* `depopulation_rate` is the inverse 1/e time of the exponential tail
  fit, reported in 1/us.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import curve_fit
from scipy.signal import find_peaks

from .detection import ORIGIN_DARK


class FitFailureError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# histograms
# ---------------------------------------------------------------------------

@dataclass
class Histogram:
    bin_width_ns: float
    origin_ns: float
    counts: np.ndarray
    total_events: int

    @property
    def edges(self):
        return self.origin_ns + self.bin_width_ns * np.arange(self.counts.size + 1)

    @property
    def centers(self):
        return self.origin_ns + self.bin_width_ns * (np.arange(self.counts.size) + 0.5)

    def to_rows(self):
        return [(float(c), int(v)) for c, v in zip(self.centers, self.counts)]


def arrival_histogram(store, bin_ns, t_max=None, detectors=None,
                      use_truth=False, include_dark=True):
    """Histogram of detection latencies relative to the trigger-phase start.

    Records are folded by the repetition period; latency 0 is the start of
    the gate phase.  With use_truth=True the true emission times are used
    instead of detections.
    """
    if bin_ns <= 0:
        raise ValueError("bin width must be positive")
    window = store.trigger_duration_ns if t_max is None else float(t_max)
    n_bins = max(1, int(math.ceil(window / bin_ns)))
    if use_truth:
        lat = np.array([t.t_ns for t in store.truth if t.label == "393"]) \
            - store.trigger_offset_ns
    else:
        recs = store.records
        mask = np.ones(recs.size, dtype=bool)
        if not include_dark:
            mask &= recs["origin"] != ORIGIN_DARK
        if detectors is not None:
            mask &= np.isin(recs["detector"], list(detectors))
        t_ns = recs["timestamp_ps"][mask] / 1000.0
        lat = np.mod(t_ns, store.period_ns) - store.trigger_offset_ns
    counts, _ = np.histogram(lat, bins=n_bins, range=(0.0, n_bins * bin_ns))
    return Histogram(bin_width_ns=bin_ns, origin_ns=0.0,
                     counts=counts.astype(np.int64),
                     total_events=int(counts.sum()))


# ---------------------------------------------------------------------------
# two-detector correlation
# ---------------------------------------------------------------------------

@dataclass
class G2Result:
    bin_width_ns: float
    max_lag_ns: float
    lags_ns: np.ndarray            # bin centers, symmetric about 0
    raw: np.ndarray
    accidental: np.ndarray
    period_ns: float = 0.0

    @property
    def corrected(self):
        # signed, deliberately not clipped at zero
        return self.raw - self.accidental

    def peak_window(self, k):
        """Raw/accidental/corrected counts integrated over the full-period
        window centered on lag k * period."""
        if self.period_ns <= 0:
            raise ValueError("peak windows need a repetition period")
        center = k * self.period_ns
        half = self.period_ns / 2.0
        mask = (self.lags_ns >= center - half) & (self.lags_ns < center + half)
        return (float(self.raw[mask].sum()),
                float(self.accidental[mask].sum()),
                float(self.corrected[mask].sum()))


def g2_correlate(stream_a_ns, stream_b_ns, max_lag_ns, bin_ns,
                 period_ns=0.0, accidental_per_bin=None, chunk=1_000_000):
    """All pairwise lags t_b - t_a within +-max_lag, binned symmetrically.

    Streams must be time-sorted.  The accidental floor is uniform in lag;
    pass accidental_per_bin from accidental_floor_from_rates (known
    simulated rates) or estimate it afterwards with sideband_accidental.
    """
    a = np.asarray(stream_a_ns, dtype=float)
    b = np.asarray(stream_b_ns, dtype=float)
    for name, s in (("A", a), ("B", b)):
        if np.any(np.diff(s) < 0):
            raise ValueError(f"stream {name} is not time-sorted")
    k_max = int(math.floor(max_lag_ns / bin_ns))
    n_bins = 2 * k_max + 1
    counts = np.zeros(n_bins, dtype=np.int64)
    limit = (k_max + 0.5) * bin_ns
    for start in range(0, a.size, chunk):
        aa = a[start:start + chunk]
        lo = np.searchsorted(b, aa - limit, side="left")
        hi = np.searchsorted(b, aa + limit, side="right")
        reach = hi - lo
        total = int(reach.sum())
        if total == 0:
            continue
        starts = np.repeat(lo, reach)
        offsets = np.arange(total) - np.repeat(np.cumsum(reach) - reach, reach)
        lags = b[starts + offsets] - np.repeat(aa, reach)
        idx = np.rint(lags / bin_ns).astype(np.int64) + k_max
        np.add.at(counts, np.clip(idx, 0, n_bins - 1), 1)
    lags_ns = bin_ns * (np.arange(n_bins) - k_max)
    accidental = np.zeros(n_bins) if accidental_per_bin is None \
        else np.full(n_bins, float(accidental_per_bin))
    return G2Result(bin_width_ns=bin_ns, max_lag_ns=max_lag_ns,
                    lags_ns=lags_ns, raw=counts, accidental=accidental,
                    period_ns=period_ns)


def accidental_floor_from_rates(rate_a_hz, rate_b_hz, dark_a_hz, dark_b_hz,
                                duration_s, bin_ns):
    """Uniform accidental pairs per lag bin from known rates.

    Counts every pair with at least one dark/stray member: dark_a x all_b +
    all_a x dark_b - dark_a x dark_b, times duration and bin width.
    """
    rate = dark_a_hz * rate_b_hz + rate_a_hz * dark_b_hz - dark_a_hz * dark_b_hz
    return rate * duration_s * bin_ns * 1e-9


def sideband_accidental(g2, fraction=0.25):
    """Estimate the flat floor from lag regions between side peaks."""
    if g2.period_ns <= 0:
        raise ValueError("sideband estimator needs a repetition period")
    phase = np.mod(g2.lags_ns + g2.period_ns / 2.0, g2.period_ns) \
        - g2.period_ns / 2.0
    mask = np.abs(np.abs(phase) - g2.period_ns / 2.0) \
        < fraction * g2.period_ns / 2.0
    if not mask.any():
        raise ValueError("no sideband bins at this binning")
    return float(g2.raw[mask].mean())


def multi_photon_ratio(g2):
    """Zero-peak to mean-side-peak ratio of accidental-corrected counts.

    Peaks are integrated over full repetition-period windows so the broad
    within-repetition lag distribution of double emissions is captured.
    Returns (ratio, uncertainty) with Poisson propagation on raw counts.
    """
    if g2.period_ns <= 0:
        raise ValueError("multi-photon ratio needs a repetition period")
    k_max = int(math.floor((g2.max_lag_ns - g2.period_ns / 2.0) / g2.period_ns))
    if k_max < 2:
        raise ValueError("need at least 2 side peaks on each side")
    raw0, _, corr0 = g2.peak_window(0)
    side_corr, side_raw = [], []
    for k in range(1, k_max + 1):
        for sign in (+1, -1):
            r, _, c = g2.peak_window(sign * k)
            side_raw.append(r)
            side_corr.append(c)
    mean_side = float(np.mean(side_corr))
    if mean_side <= 0:
        raise ValueError("side peaks have no corrected counts")
    ratio = corr0 / mean_side
    var_side = float(np.sum(side_raw)) / len(side_raw) ** 2
    var = raw0 / mean_side**2 + corr0**2 * var_side / mean_side**4
    return ratio, math.sqrt(max(var, 0.0))


# ---------------------------------------------------------------------------
# sinusoid fits
# ---------------------------------------------------------------------------

@dataclass
class VisibilityFit:
    amplitude: float
    offset: float
    phase_deg: float
    period_deg: float
    visibility: float
    se_visibility: float
    se_amplitude: float = 0.0
    se_offset: float = 0.0
    period_fixed: bool = True

    def model(self, angles_deg):
        a = np.asarray(angles_deg, dtype=float)
        return self.offset + self.amplitude * np.cos(
            2 * np.pi * (a - self.phase_deg) / self.period_deg)


def fit_visibility(angles_deg, values, period_deg=None, weights=None):
    """Least-squares sinusoid; visibility = amplitude / offset.

    period_deg fixes the period (linear fit); None frees it (grid search
    plus refinement).  Needs >= 6 distinct angles spanning >= one period.
    """
    angles = np.asarray(angles_deg, dtype=float)
    values = np.asarray(values, dtype=float)
    if np.unique(angles).size < 6:
        raise ValueError("need at least 6 distinct angles")

    if period_deg is None:
        span = angles.max() - angles.min()
        candidates = np.linspace(max(span / 8.0, 1e-6), 2.0 * span, 400)
        best = min(candidates,
                   key=lambda p: _sinusoid_ssr(angles, values, p, weights))
        fit = _linear_sinusoid(angles, values, best, weights)
        p0 = [fit.offset, fit.amplitude, fit.phase_deg, best]

        def model(a, offset, amp, phase, period):
            return offset + amp * np.cos(2 * np.pi * (a - phase) / period)

        sigma = None if weights is None else 1.0 / np.sqrt(weights)
        try:
            popt, pcov = curve_fit(model, angles, values, p0=p0, sigma=sigma,
                                   maxfev=20000)
        except RuntimeError as exc:
            raise FitFailureError(f"free-period sinusoid fit failed: {exc}")
        offset, amp, phase, period = popt
        amp, phase = abs(amp), phase % period
        se = np.sqrt(np.clip(np.diag(pcov), 0, np.inf))
        vis = amp / offset if offset else np.inf
        se_vis = _vis_se(amp, offset, se[1] ** 2, se[0] ** 2, pcov[0, 1])
        return VisibilityFit(amplitude=amp, offset=offset, phase_deg=phase,
                             period_deg=period, visibility=vis,
                             se_visibility=se_vis, se_amplitude=se[1],
                             se_offset=se[0], period_fixed=False)
    span = angles.max() - angles.min()
    if span < 0.98 * period_deg:
        raise ValueError("angles must span at least one period")
    return _linear_sinusoid(angles, values, period_deg, weights)


def _sinusoid_ssr(angles, values, period, weights):
    w = np.ones_like(values) if weights is None else weights
    x = 2 * np.pi * angles / period
    design = np.column_stack([np.ones_like(x), np.cos(x), np.sin(x)])
    wd = design * w[:, None]
    try:
        coef, *_ = np.linalg.lstsq(wd.T @ design, wd.T @ values, rcond=None)
    except np.linalg.LinAlgError:
        return np.inf
    resid = values - design @ coef
    return float(np.sum(w * resid**2))


def _linear_sinusoid(angles, values, period, weights):
    w = np.ones_like(values) if weights is None else np.asarray(weights, float)
    x = 2 * np.pi * angles / period
    design = np.column_stack([np.ones_like(x), np.cos(x), np.sin(x)])
    gram = design.T @ (design * w[:, None])
    rhs = design.T @ (values * w)
    try:
        coef = np.linalg.solve(gram, rhs)
        cov = np.linalg.inv(gram)
    except np.linalg.LinAlgError:
        raise FitFailureError("degenerate design matrix")
    resid = values - design @ coef
    dof = max(values.size - 3, 1)
    scale = float(np.sum(w * resid**2) / dof)
    cov = cov * max(scale, np.finfo(float).tiny)
    offset, a, b = coef
    amp = math.hypot(a, b)
    phase = math.degrees(math.atan2(b, a)) * period / 360.0
    var_amp = (a**2 * cov[1, 1] + b**2 * cov[2, 2]
               + 2 * a * b * cov[1, 2]) / max(amp**2, 1e-300)
    cov_amp_off = (a * cov[0, 1] + b * cov[0, 2]) / max(amp, 1e-300)
    vis = amp / offset if offset else np.inf
    se_vis = _vis_se(amp, offset, var_amp, cov[0, 0], cov_amp_off)
    return VisibilityFit(amplitude=amp, offset=float(offset),
                         phase_deg=phase % period, period_deg=float(period),
                         visibility=vis, se_visibility=se_vis,
                         se_amplitude=math.sqrt(max(var_amp, 0.0)),
                         se_offset=math.sqrt(max(cov[0, 0], 0.0)),
                         period_fixed=True)


def _vis_se(amp, offset, var_amp, var_off, cov_amp_off):
    if offset == 0:
        return np.inf
    v2 = (var_amp / offset**2 + amp**2 * var_off / offset**4
          - 2 * amp * cov_amp_off / offset**3)
    return math.sqrt(max(v2, 0.0))


# ---------------------------------------------------------------------------
# durations
# ---------------------------------------------------------------------------

def _exponential_tail_fit(centers, counts, start_index):
    t = centers[start_index:]
    c = counts[start_index:].astype(float)
    keep = c > 0
    if keep.sum() < 5:
        raise FitFailureError("too few populated bins for a tail fit")
    t, c = t[keep], c[keep]
    slope, intercept = np.polyfit(t, np.log(c), 1, w=np.sqrt(c))
    if slope >= 0:
        raise FitFailureError("histogram tail does not decay")
    p0 = (math.exp(intercept), -1.0 / slope)

    def model(x, a, tau):
        return a * np.exp(-x / tau)

    try:
        popt, _ = curve_fit(model, t, c, p0=p0, sigma=np.sqrt(np.maximum(c, 1.0)),
                            maxfev=10000)
    except RuntimeError:
        popt = p0
    if popt[1] <= 0:
        raise FitFailureError("histogram tail does not decay")
    return float(popt[1])


def depopulation_rate(hist, min_counts=50):
    """Inverse 1/e duration (1/us) from an exponential fit of the tail."""
    if hist.total_events < min_counts:
        raise FitFailureError(
            f"histogram has {hist.total_events} counts, need {min_counts}")
    peak = int(np.argmax(hist.counts))
    tau_ns = _exponential_tail_fit(hist.centers, hist.counts, peak)
    return 1000.0 / tau_ns


def _oscillation_maxima(hist):
    c = hist.counts.astype(float)
    if c.size >= 9:
        kernel = np.ones(3) / 3.0
        c = np.convolve(c, kernel, mode="same")
    floor = max(c.max() * 0.02, 3.0)
    peaks, props = find_peaks(c, height=floor, prominence=0.25 * c.max() * 0.2)
    return peaks, c


def wave_packet_length(hist):
    """Length of the photon wave packet per the documented convention.

    Returns (length_ns, kind) with kind 'envelope' when the density is
    oscillatory (>= 2 clear maxima; 1/e time of the exponential through
    the maxima) or 'exponential' (1/e time of the tail fit).
    """
    peaks, smooth = _oscillation_maxima(hist)
    if peaks.size >= 2:
        t = hist.centers[peaks]
        v = smooth[peaks]
        slope, _ = np.polyfit(t, np.log(v), 1, w=np.sqrt(v))
        if slope < 0:
            return float(-1.0 / slope), "envelope"
    peak = int(np.argmax(hist.counts))
    return _exponential_tail_fit(hist.centers, hist.counts, peak), "exponential"


def quantile_duration(hist, fraction=1.0 - 1.0 / math.e):
    """Time by which `fraction` of the histogram mass has arrived."""
    total = hist.counts.sum()
    if total == 0:
        raise FitFailureError("empty histogram")
    cdf = np.cumsum(hist.counts) / total
    k = int(np.searchsorted(cdf, fraction))
    k = min(k, hist.counts.size - 1)
    c_prev = cdf[k - 1] if k > 0 else 0.0
    frac_in_bin = (fraction - c_prev) / max(cdf[k] - c_prev, 1e-300)
    return float(hist.edges[k] + frac_in_bin * hist.bin_width_ns)


def peak_count(hist, t_max_ns, min_prominence_frac=0.05):
    """Number of local maxima of the (lightly smoothed) density before t_max."""
    mask = hist.centers <= t_max_ns
    c = hist.counts[mask].astype(float)
    if c.size >= 9:
        c = np.convolve(c, np.ones(3) / 3.0, mode="same")
    peaks, _ = find_peaks(c, prominence=min_prominence_frac * max(c.max(), 1.0))
    return int(peaks.size)
