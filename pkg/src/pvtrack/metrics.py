"""Run metrics and the frequency-watt droop mapping."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class RunMetrics:
    irradiance_rmse: float = math.nan  # W/m^2
    temperature_rmse: float = math.nan  # K
    tracking_error: float = math.nan  # fraction of rated power
    max_ripple_ss: float | None = None  # W
    rst_convergence_iters: list[int] = field(default_factory=list)

    def row(self, scenario: str) -> dict:
        d = asdict(self)
        return {
            "scenario": scenario,
            "irr_rmse": d["irradiance_rmse"],
            "temp_rmse": d["temperature_rmse"],
            "tracking_error": d["tracking_error"],
            "max_ripple": math.nan if self.max_ripple_ss is None else self.max_ripple_ss,
            "rst_iters_max": max(self.rst_convergence_iters, default=0),
        }


def rmse(estimates, truth) -> float:
    e = np.asarray(estimates, dtype=float)
    t = np.asarray(truth, dtype=float)
    if e.shape != t.shape:
        raise ValueError(f"series lengths differ: {e.shape} vs {t.shape}")
    if e.size == 0:
        raise ValueError("rmse of an empty series")
    return float(np.sqrt(np.mean((e - t) ** 2)))


def tracking_error(P, Pref, Pmpp_true, rated_power: float) -> float:
    """Mean |P - min(Pref, Pmpp)| normalized by rated power."""
    P = np.asarray(P, dtype=float)
    if P.size == 0:
        raise ValueError("tracking error of an empty trace")
    target = np.minimum(np.asarray(Pref, dtype=float), np.asarray(Pmpp_true, dtype=float))
    return float(np.mean(np.abs(P - target)) / rated_power)


def ripple_ss(t, P, alpha, window: float, settle: float = 0.0) -> float | None:
    """Largest peak-to-peak power over sliding windows inside steady-state runs.

    Only windows lying entirely in a contiguous ``alpha == 1`` stretch count,
    after skipping the first ``settle`` seconds of each stretch.  Returns
    None when no stretch is long enough.
    """
    t = np.asarray(t, dtype=float)
    P = np.asarray(P, dtype=float)
    steady = np.asarray(alpha) == 1
    best = None
    n = len(t)
    eps = 1e-9
    k = 0
    while k < n:
        if not steady[k]:
            k += 1
            continue
        j = k
        while j + 1 < n and steady[j + 1]:
            j += 1
        start = k
        while start <= j and t[start] - t[k] < settle - eps:
            start += 1
        if start <= j and t[j] - t[start] >= window - eps:
            pp = _max_window_range(t[start : j + 1], P[start : j + 1], window)
            best = pp if best is None else max(best, pp)
        k = j + 1
    return best


def _max_window_range(t: np.ndarray, P: np.ndarray, window: float) -> float:
    """Max over full-length sliding windows of max(P) - min(P) (monotonic deques)."""
    eps = 1e-9
    hi_q: deque = deque()
    lo_q: deque = deque()
    lo = 0
    best = 0.0
    for hi in range(len(t)):
        while hi_q and P[hi_q[-1]] <= P[hi]:
            hi_q.pop()
        hi_q.append(hi)
        while lo_q and P[lo_q[-1]] >= P[hi]:
            lo_q.pop()
        lo_q.append(hi)
        while t[hi] - t[lo] > window + eps:
            lo += 1
        while hi_q[0] < lo:
            hi_q.popleft()
        while lo_q[0] < lo:
            lo_q.popleft()
        if t[hi] - t[0] >= window - eps:
            best = max(best, float(P[hi_q[0]] - P[lo_q[0]]))
    return best


def droop_setpoint(
    f: float,
    pmpp_est: float,
    droop: float = 0.05,
    f_nom: float = 60.0,
    deadband: float = 0.0,
    p_base: float = 0.0,
    rated_power: float = 500e3,
) -> float:
    """Frequency-watt power reference.

    Adds ``rated_power * df / (droop * f_nom)`` to the pre-event setpoint
    ``p_base``, where ``df`` is the under-frequency outside the deadband,
    and clamps the result to ``[0, pmpp_est]``.
    """
    if droop <= 0:
        raise ValueError("droop must be positive")
    dev = f_nom - f
    if abs(dev) <= deadband:
        dev = 0.0
    else:
        dev -= math.copysign(deadband, dev)
    p = p_base + rated_power * dev / (droop * f_nom)
    return min(max(p, 0.0), max(pmpp_est, 0.0))


def rst_convergence_iters(controller: dict, dp_th: float) -> list[int]:
    """Controller iterations from each rapid-tracking start until |P - Pref| < dp_th.

    ``controller`` is the controller-rate record of a run.  Row ``k`` holds
    the power measured when reference ``k - 1`` had settled, so the count
    for a start at row ``k`` looks at rows ``k + 1, k + 2, ...``.  An event
    that never enters the band counts every remaining row.
    """
    phase = np.asarray(controller["rst_phase"])
    P = np.asarray(controller["P"], dtype=float)
    Pref = np.asarray(controller["Pref"], dtype=float)
    prev = np.concatenate(([0], phase[:-1]))
    # the record holds the phase after the step, so a start shows as 0 -> nonzero
    starts = np.nonzero((phase != 0) & (prev == 0))[0]
    out = []
    for k in starts:
        n = 1
        j = k + 1
        while j < len(P) and abs(P[j] - Pref[j]) >= dp_th:
            n += 1
            j += 1
        out.append(n)
    return out


def trace_metrics(
    trace, ripple_window: float = 10.0, dp_th: float = 15e3, settle: float = 1.0, T0: float = 298.15
) -> RunMetrics:
    """All run metrics from a simulator trace.

    Estimation errors are taken over samples where the estimates exist.
    Ripple skips the first ``settle`` seconds of each steady stretch so the
    tail of a transient is not counted as ripple.
    """
    cols = trace.columns
    g_hat = np.asarray(cols["G_hat_fast"], dtype=float)
    ok = np.isfinite(g_hat)
    irr = rmse(1000.0 * g_hat[ok], 1000.0 * cols["G_true"][ok]) if ok.any() else math.nan
    lt = np.asarray(cols["lambdaT_hat"], dtype=float)
    ok_t = np.isfinite(lt)
    temp = rmse(T0 * lt[ok_t], T0 * cols["lambdaT_true"][ok_t]) if ok_t.any() else math.nan
    ctrl = trace.controller
    te = tracking_error(cols["P"], cols["Pref"], cols["Pmpp_true"], trace.rated_power) if len(cols["P"]) else math.nan
    rip = ripple_ss(cols["t"], cols["P"], cols["alpha"], ripple_window, settle) if len(cols["t"]) else None
    return RunMetrics(irr, temp, te, rip, rst_convergence_iters(ctrl, dp_th))


def setpoint_lags(controller: dict, dp_th: float, start: int = 0) -> np.ndarray:
    """Per-iteration lag, in control periods, of measured power behind the reference.

    For each row ``k >= start`` the lag is the smallest ``L >= 1`` such that
    the power measured ``L`` rows later is within ``dp_th`` of ``Pref[k]`` or
    has crossed it.  Rows whose reference is never reached get ``-1``.
    """
    P = np.asarray(controller["P"], dtype=float)
    Pref = np.asarray(controller["Pref"], dtype=float)
    n = len(P)
    lags = []
    for k in range(start, n - 1):
        side = math.copysign(1.0, P[k] - Pref[k])
        lag = -1
        for j in range(k + 1, n):
            e = P[j] - Pref[k]
            if abs(e) < dp_th or math.copysign(1.0, e) != side:
                lag = j - k
                break
        lags.append(lag)
    return np.asarray(lags, dtype=int)


def first_rst_row(controller: dict) -> int | None:
    phase = np.asarray(controller["rst_phase"])
    idx = np.nonzero(phase != 0)[0]
    return int(idx[0]) if idx.size else None
