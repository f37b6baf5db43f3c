"""
Real-time maximum power point estimation.

Irradiance and temperature are fitted to streaming (V, I) samples with a
Levenberg-Marquardt iteration over a rolling window.  Between fits the
irradiance is recomputed for every sample from the current temperature
estimate (the "fast" estimate), and the MPP follows in closed form.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .pv_model import (
    IS_TEMP_EXPONENT,
    LAMBDA_T_BAND,
    T0,
    BaseParams,
    EnvState,
    ModuleDatasheet,
    PVModelError,
    is_at,
    iph_temperature_factor,
    mpp,
)

log = logging.getLogger(__name__)

G_FLOOR = 1e-3


class ResidualDomainError(PVModelError):
    """The log argument of the residual is not positive at this estimate."""


# ---------------------------------------------------------------------------
# Residual and Jacobian
# ---------------------------------------------------------------------------


def _point(V, I, G, lt, b, alpha_Isc):
    """(residual, d/dG, d/dlambdaT) at one sample; None outside the domain."""
    Is = b.Is0 * lt**3 * math.exp(IS_TEMP_EXPONENT * (1.0 - 1.0 / lt))
    iph_unit = b.Iph0 * (1.0 + alpha_Isc * T0 * (lt - 1.0))
    vd = V + I * b.Rs0
    dn_dg = iph_unit - vd / b.Rsh0
    N = G * dn_dg - I + Is
    if N <= 0.0:
        return None
    ln_ratio = math.log(N / Is)
    a = b.a0 * lt
    dlnis = 3.0 / lt + IS_TEMP_EXPONENT / (lt * lt)
    r = a * ln_ratio - vd
    jg = a * dn_dg / N
    jt = b.a0 * ln_ratio + a * ((G * b.Iph0 * alpha_Isc * T0 + Is * dlnis) / N - dlnis)
    return r, jg, jt


def _points_array(V, I, G, lt, b, alpha_Isc):
    """Vectorized :func:`_point`; entries are NaN outside the domain."""
    Is = b.Is0 * lt**3 * math.exp(IS_TEMP_EXPONENT * (1.0 - 1.0 / lt))
    iph_unit = b.Iph0 * (1.0 + alpha_Isc * T0 * (lt - 1.0))
    vd = V + I * b.Rs0
    dn_dg = iph_unit - vd / b.Rsh0
    N = G * dn_dg - I + Is
    N = np.where(N > 0.0, N, np.nan)
    ln_ratio = np.log(N / Is)
    a = b.a0 * lt
    dlnis = 3.0 / lt + IS_TEMP_EXPONENT / (lt * lt)
    r = a * ln_ratio - vd
    jg = a * dn_dg / N
    jt = b.a0 * ln_ratio + a * ((G * b.Iph0 * alpha_Isc * T0 + Is * dlnis) / N - dlnis)
    return r, jg, jt


def residual(Vpv: float, Ipv: float, env: EnvState, b: BaseParams, d: ModuleDatasheet) -> float:
    """Voltage-form residual of the single-diode equation; zero on the curve."""
    out = _point(Vpv, Ipv, env.G, env.lambdaT, b, d.alpha_Isc)
    if out is None:
        raise ResidualDomainError(
            f"log argument not positive at V={Vpv:g}, I={Ipv:g}, G={env.G:g}, "
            f"lambdaT={env.lambdaT:g}"
        )
    return out[0]


def jacobian(
    Vpv: float, Ipv: float, env: EnvState, b: BaseParams, d: ModuleDatasheet
) -> tuple[float, float]:
    """Analytic partial derivatives of :func:`residual` w.r.t. G and lambdaT."""
    out = _point(Vpv, Ipv, env.G, env.lambdaT, b, d.alpha_Isc)
    if out is None:
        raise ResidualDomainError(f"residual undefined at V={Vpv:g}, I={Ipv:g}, env={env}")
    return out[1], out[2]


def fast_irradiance(Vpv: float, Ipv: float, lambdaT: float, b: BaseParams, d: ModuleDatasheet) -> float | None:
    """Irradiance that puts (V, I) on the model curve at ``lambdaT``.

    Returns None when the denominator is not positive.  Not clamped.
    """
    vd = Vpv + Ipv * b.Rs0
    den = b.Iph0 * iph_temperature_factor(lambdaT, d.alpha_Isc) - vd / b.Rsh0
    if den <= 0.0:
        return None
    return (Ipv + is_at(b, lambdaT) * math.expm1(vd / (b.a0 * lambdaT))) / den


# ---------------------------------------------------------------------------
# Window and state
# ---------------------------------------------------------------------------

_SUM_NAMES = ("gg", "gt", "tt", "gr", "tr", "rr")


class MeasurementWindow:
    """Ring buffer of samples with running Jacobian/residual sums.

    Each stored sample carries its weight and the (r, jg, jt) entries
    evaluated at the linearization point current when it was pushed or
    last relinearized.  A sample outside the residual domain is stored
    with ``valid=False`` and contributes nothing to the sums.
    """

    def __init__(self, capacity: int = 100):
        if capacity < 2:
            raise ValueError("window capacity must be at least 2")
        self.capacity = capacity
        self.samples: deque = deque()
        self.sums = [0.0] * 6
        self.invalid = 0

    def __len__(self):
        return len(self.samples)

    @property
    def full(self) -> bool:
        return len(self.samples) >= self.capacity

    @staticmethod
    def _terms(w, entries):
        r, jg, jt = entries
        return (w * jg * jg, w * jg * jt, w * jt * jt, w * jg * r, w * jt * r, w * r * r)

    def push(self, t: float, V: float, I: float, weight: float, entries) -> None:
        if self.samples and t <= self.samples[-1][0]:
            raise ValueError(f"sample time {t} not after {self.samples[-1][0]}")
        if len(self.samples) >= self.capacity:
            old = self.samples.popleft()
            if old[4] is None:
                self.invalid -= 1
            else:
                for k, v in enumerate(self._terms(old[3], old[4])):
                    self.sums[k] -= v
        self.samples.append((t, V, I, weight, entries))
        if entries is None:
            self.invalid += 1
        else:
            for k, v in enumerate(self._terms(weight, entries)):
                self.sums[k] += v

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stored (V, I, weight) as arrays."""
        n = len(self.samples)
        V = np.fromiter((x[1] for x in self.samples), float, n)
        I = np.fromiter((x[2] for x in self.samples), float, n)
        w = np.fromiter((x[3] for x in self.samples), float, n)
        return V, I, w

    def relinearize(self, G, lt, b, alpha_Isc) -> None:
        """Re-evaluate every stored sample at a new linearization point."""
        V, I, w = self.arrays()
        r, jg, jt = _points_array(V, I, G, lt, b, alpha_Isc)
        ok = ~np.isnan(r)
        self.samples = deque(
            (x[0], x[1], x[2], x[3], (float(r[k]), float(jg[k]), float(jt[k])) if ok[k] else None)
            for k, x in enumerate(self.samples)
        )
        self.invalid = int(np.count_nonzero(~ok))
        self.sums = [math.fsum(c) for c in (
            (w * jg * jg)[ok], (w * jg * jt)[ok], (w * jt * jt)[ok],
            (w * jg * r)[ok], (w * jt * r)[ok], (w * r * r)[ok],
        )]

    def batch_sums(self) -> list[float]:
        cols = [[] for _ in range(6)]
        for _, _, _, w, e in self.samples:
            if e is not None:
                for k, v in enumerate(self._terms(w, e)):
                    cols[k].append(v)
        return [math.fsum(c) for c in cols]

    def sums_dict(self) -> dict[str, float]:
        return dict(zip(_SUM_NAMES, self.sums))


@dataclass
class LmState:
    """Estimate and Levenberg-Marquardt settings.

    ``dG_max`` is in W/m^2/s and ``dT_max`` in degC/min; both are turned
    into per-iteration caps with ``T_LM``.
    """

    G: float = 1.0
    lambdaT: float = 1.0
    damping: float = 1e-4
    damping_gain: float = 3.0
    damping_range: tuple[float, float] = (1e-6, 1e-3)
    dG_max: float = 200.0
    dT_max: float = 3.0
    T_LM: float = 5.0
    G_fast: float = math.nan
    G_filtered: float = math.nan
    iterations: int = 0
    skipped: int = 0
    rejected_steps: int = 0
    rejected_samples: int = 0
    last_ssr: float = math.nan
    last_step: tuple[float, float] = (0.0, 0.0)
    initialized: bool = False

    @property
    def G_cap(self) -> float:
        return self.dG_max * self.T_LM / 1000.0

    @property
    def lambdaT_cap(self) -> float:
        return self.dT_max / 60.0 * self.T_LM / T0

    @property
    def env(self) -> EnvState:
        return EnvState(self.G, self.lambdaT)


class MppeEstimate(NamedTuple):
    G_fast: float
    G_filtered: float
    G_lm: float
    lambdaT: float
    damping: float


@dataclass
class MppEstimator:
    """Streaming estimator: feed samples with :meth:`push_sample`, fit with
    :meth:`lm_iterate` once the window is full.

    Not thread-safe; callers serialize access.  :meth:`snapshot` returns an
    immutable copy of the current estimate.
    """

    base: BaseParams
    datasheet: ModuleDatasheet
    state: LmState = field(default_factory=LmState)
    capacity: int = 100
    Ts: float = 0.05
    filter_cutoff_hz: float = 1.0

    def __post_init__(self):
        self.window = MeasurementWindow(self.capacity)
        self._alpha = self.datasheet.alpha_Isc
        self._lpf = 1.0 - math.exp(-2.0 * math.pi * self.filter_cutoff_hz * self.Ts)

    # fast loop --------------------------------------------------------------

    def push_sample(self, t: float, Vpv: float, Ipv: float, weight: float = 1.0) -> float:
        """Add a sample; returns the clamped fast irradiance estimate."""
        s = self.state
        g = fast_irradiance(Vpv, Ipv, s.lambdaT, self.base, self.datasheet)
        if g is None:
            s.rejected_samples += 1
            log.debug("sample at t=%g rejected: nonpositive irradiance denominator", t)
            return s.G_fast
        g = min(max(g, 0.0), 1.0)
        if not s.initialized:
            s.G = max(g, G_FLOOR)
            s.G_filtered = g
            s.initialized = True
        else:
            s.G_filtered += self._lpf * (g - s.G_filtered)
        s.G_fast = g
        self.window.push(t, Vpv, Ipv, weight, _point(Vpv, Ipv, s.G, s.lambdaT, self.base, self._alpha))
        return g

    # slow loop --------------------------------------------------------------

    def _ssr(self, G, lt, arrays=None) -> float:
        V, I, w = arrays if arrays is not None else self.window.arrays()
        r = _points_array(V, I, G, lt, self.base, self._alpha)[0]
        if np.isnan(r).any():
            return math.inf
        return float(np.dot(w * r, r))

    def _reseat(self) -> None:
        # Linearization point left the residual domain (typically an
        # irradiance rise): restart G from the samples themselves.
        s = self.state
        gs = [
            fast_irradiance(V, I, s.lambdaT, self.base, self.datasheet)
            for _, V, I, _, _ in self.window.samples
        ]
        gs = [g for g in gs if g is not None]
        if gs:
            target = min(max(max(gs), G_FLOOR), 1.0)
            s.G = min(max(target, self._G0 - s.G_cap), self._G0 + s.G_cap)
        self.window.relinearize(s.G, s.lambdaT, self.base, self._alpha)

    def _rebase_filter(self, lt_old: float, lt_new: float) -> None:
        # A new temperature shifts every fast estimate; move the filter state
        # by the same amount so the shift is not read as an irradiance change.
        if lt_new == lt_old or not self.window.samples or math.isnan(self.state.G_filtered):
            return
        _, V, I, _, _ = self.window.samples[-1]
        g_old = fast_irradiance(V, I, lt_old, self.base, self.datasheet)
        g_new = fast_irradiance(V, I, lt_new, self.base, self.datasheet)
        if g_old is not None and g_new is not None:
            self.state.G_filtered = min(max(self.state.G_filtered + g_new - g_old, 0.0), 1.0)

    def _apply(self, dG: float, dT: float, clip: bool) -> tuple[float, float]:
        s = self.state
        if clip:
            dG = min(max(dG, -s.G_cap), s.G_cap)
            dT = min(max(dT, -s.lambdaT_cap), s.lambdaT_cap)
        # a reseat earlier in the iteration already spent part of the G budget
        G_new = min(max(s.G + dG, self._G0 - s.G_cap), self._G0 + s.G_cap)
        G_new = min(max(G_new, G_FLOOR), 1.0)
        lt_new = min(max(s.lambdaT + dT, LAMBDA_T_BAND[0]), LAMBDA_T_BAND[1])
        return G_new, lt_new

    def _scaled_step(self, raw, best, ssr0, arrs, halvings: int = 12):
        s = self.state
        for mu, (dG, dT) in raw.items():
            scale = min(1.0, s.G_cap / abs(dG) if dG else math.inf, s.lambdaT_cap / abs(dT) if dT else math.inf)
            for _ in range(halvings):
                G_new, lt_new = self._apply(dG * scale, dT * scale, clip=False)
                ssr = self._ssr(G_new, lt_new, arrs)
                if ssr < ssr0:
                    if ssr < best[0]:
                        best = (ssr, mu, G_new, lt_new)
                    break
                scale *= 0.5
        return best

    def lm_iterate(self) -> LmState:
        """One damped Gauss-Newton step on (G, lambdaT) over the window."""
        s = self.state
        if not self.window.full:
            raise RuntimeError("lm_iterate needs a full measurement window")
        self._G0 = G0 = s.G
        if self.window.invalid:
            self._reseat()
        gg, gt, tt, gr, tr, _ = self.window.sums
        lo, hi = s.damping_range
        a = s.damping_gain
        candidates = (s.damping, s.damping * a, s.damping / a)
        arrs = self.window.arrays()
        ssr0 = self._ssr(s.G, s.lambdaT, arrs)

        best = None
        raw = {}
        for mu in candidates:
            o11 = (1.0 + mu) * gg
            o22 = (1.0 + mu) * tt
            det = o11 * o22 - gt * gt
            if not det > 1e-30 * abs(o11 * o22):
                continue
            dG = -(o22 * gr - gt * tr) / det
            dT = -(o11 * tr - gt * gr) / det
            raw[mu] = (dG, dT)
            G_new, lt_new = self._apply(dG, dT, clip=True)
            ssr = self._ssr(G_new, lt_new, arrs)
            if best is None or ssr < best[0]:
                best = (ssr, mu, G_new, lt_new)

        if best is None or (math.isinf(best[0]) and not raw):
            s.last_step = (s.G - G0, 0.0)
            s.skipped += 1
            s.damping = min(s.damping * a, hi)
            log.info("LM iteration skipped (singular system or no valid candidate)")
            return s

        if best[0] > ssr0 * (1.0 + 1e-9):
            # Clipping each component separately can turn the step away from
            # descent; retry along the unclipped direction scaled into the caps.
            best = self._scaled_step(raw, best, ssr0, arrs)
        ssr, mu, G_new, lt_new = best
        if ssr > ssr0 * (1.0 + 1e-9):
            # no candidate improves the fit: keep the estimate, damp harder
            s.rejected_steps += 1
            s.damping = min(s.damping * a, hi)
            s.last_ssr = ssr0
            s.last_step = (s.G - G0, 0.0)
            return s
        s.last_step = (G_new - G0, lt_new - s.lambdaT)
        self._rebase_filter(s.lambdaT, lt_new)
        s.G, s.lambdaT = G_new, lt_new
        s.damping = min(max(mu, lo), hi)
        s.last_ssr = ssr
        s.iterations += 1
        log.debug("LM it=%d G=%.6f lt=%.6f damping=%.2e ssr %.3e -> %.3e",
                  s.iterations, s.G, s.lambdaT, s.damping, ssr0, ssr)
        self.window.relinearize(s.G, s.lambdaT, self.base, self._alpha)
        return s

    # outputs ----------------------------------------------------------------

    def snapshot(self) -> MppeEstimate:
        s = self.state
        return MppeEstimate(s.G_fast, s.G_filtered, s.G, s.lambdaT, s.damping)

    def mpp_estimate(self) -> tuple[float, float, float]:
        return mpp_estimate(self.state, self.base, self.datasheet)


def mpp_estimate(state: LmState, b: BaseParams, d: ModuleDatasheet) -> tuple[float, float, float]:
    """MPP (Vmp, Imp, Pmp) at the fast irradiance and fitted temperature."""
    G = state.G_fast if not math.isnan(state.G_fast) else state.G
    return mpp(b, EnvState(G, state.lambdaT), d)
