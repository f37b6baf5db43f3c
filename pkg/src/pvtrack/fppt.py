"""
Flexible power point tracking.

A perturb-and-observe controller that regulates PV power to a setpoint by
moving the array voltage on the right (high-voltage) side of the MPP.
Steps are sized adaptively per operating mode, irradiance changes are
removed from the measured power difference using the MPP estimator, and
setpoint changes are reached with a three-iteration rapid tracking
sequence.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import NamedTuple

from .mppe import fast_irradiance
from .pv_model import (
    BaseParams,
    EnvState,
    FiveParams,
    ModuleDatasheet,
    diph_dg,
    five_params_at,
    voc_estimate,
)

VOC_GUARD_FACTOR = 1.005
KPH_MAX = 1.2


@dataclass(frozen=True)
class FpptConfig:
    f_step: float = 4.0
    Vstep_min: float = 0.75
    Vstep_base: float = 2.0
    Vstep_max: float = 20.0
    K_tr: float = 0.002  # V/W
    dP_max: float = 5e3
    dPref_th: float = 50e3
    dp_th: float = 15e3
    dpdv_th: float = 667.0
    k_voc: float = 0.99
    rst_enabled: bool = True
    decoupling_enabled: bool = True
    overshoot_guard: bool = True
    steady_step_enabled: bool = True
    reversal_band: float = 0.5  # fraction of dP_max; steady |P - Pref| inside it reverses the last move
    reversal_hold: float = 0.5  # extra band (fraction of dP_max) while a two-level cycle is running

    def __post_init__(self):
        if not 0 < self.Vstep_min <= self.Vstep_base <= self.Vstep_max:
            raise ValueError("need 0 < Vstep_min <= Vstep_base <= Vstep_max")
        if not 0 <= self.reversal_band <= 1:
            raise ValueError("reversal_band must be in [0, 1]")
        if not 0 <= self.reversal_hold <= 1:
            raise ValueError("reversal_hold must be in [0, 1]")
        if self.K_tr <= 0 or min(self.dP_max, self.dPref_th, self.dp_th, self.dpdv_th) <= 0:
            raise ValueError("gains and thresholds must be positive")
        if not 0 < self.k_voc <= 1:
            raise ValueError("k_voc must be in (0, 1]")

    @classmethod
    def baseline(cls, **kw) -> "FpptConfig":
        """Adaptive-step P&O: every step from the error-proportional rule,
        no rapid tracking, no overshoot guard."""
        return cls(rst_enabled=False, overshoot_guard=False, steady_step_enabled=False, **kw)


class RstPhase(IntEnum):
    INACTIVE = 0
    STEP1 = 1
    STEP2 = 2
    STEP3 = 3


# ---------------------------------------------------------------------------
# Pure helpers
# ---------------------------------------------------------------------------


def classify_mode(
    P: float,
    Pref: float,
    Pref_prev: float,
    dP_decoupled: float,
    dV: float,
    cfg: FpptConfig,
    pmpp_est: float = math.inf,
) -> int:
    """Operating mode: 1 for steady state, 0 for transient.

    Transient when the setpoint jumped by more than ``dPref_th``, when the
    power is more than ``dp_th`` away from the achievable reference
    ``min(Pref, pmpp_est)``, or, while tracking the MPP, when the P-V
    slope is still steeper than ``dpdv_th``.
    """
    if abs(Pref - Pref_prev) > cfg.dPref_th:
        return 0
    if abs(P - min(Pref, pmpp_est)) > cfg.dp_th:
        return 0
    if Pref >= pmpp_est and dV != 0.0 and abs(dP_decoupled / dV) > cfg.dpdv_th:
        return 0
    return 1


def steady_step(slope_dV_dP: float | None, cfg: FpptConfig) -> float:
    """Steady-state step limiting the power ripple to ``dP_max``."""
    if slope_dV_dP is None or not math.isfinite(slope_dV_dP):
        return cfg.Vstep_base
    return max(min(abs(slope_dV_dP) * cfg.dP_max, cfg.Vstep_base), cfg.Vstep_min)


def transient_step(P: float, Pref: float, cfg: FpptConfig) -> float:
    return min(cfg.K_tr * abs(P - Pref), cfg.Vstep_max)


def decouple(
    V_n: float,
    I_n: float,
    V_prev: float,
    I_prev: float,
    Kph_prev: float,
    G_n: float,
    G_prev: float,
    b: BaseParams,
    d: ModuleDatasheet,
    lambdaT: float = 1.0,
) -> tuple[float, float]:
    """Current change attributable to the irradiance change, and the power
    difference with that contribution removed."""
    dI = Kph_prev * (G_n - G_prev) * diph_dg(b, lambdaT, d)
    return dI, V_n * (I_n - dI) - V_prev * I_prev


def kph_update(I_n: float, params: FiveParams | None, Kph_prev: float = 1.0) -> float:
    """Ratio of terminal current to photocurrent; held in the dark state."""
    if params is None or params.Iph <= 0.0:
        return Kph_prev
    return min(max(I_n / params.Iph, 0.0), KPH_MAX)


def rst_chord_step(V_n: float, P_n: float, Pref: float, voc_tilde: float) -> float | None:
    """Reference from the chord through (V_n, P_n) and (voc_tilde, 0)."""
    if P_n <= 0.0:
        return None
    return V_n + (voc_tilde - V_n) * (P_n - Pref) / P_n


def rst_slope_step(history, Pref: float) -> float | None:
    """Third-step reference from the last three (V, P) records.

    An artificial step along the latest secant is projected with a
    first-order correction of the slope; the projected slope then sizes
    the actual step.  None when the records are degenerate.
    """
    (V0, P0), (V1, P1), (V2, P2) = history
    if V2 == V1 or V1 == V0 or P2 == P1:
        return None
    s2 = (P2 - P1) / (V2 - V1)
    s1 = (P1 - P0) / (V1 - V0)
    v_delta = (Pref - P2) / s2
    s_delta = s2 + (s2 - s1) / (V2 - V1) * v_delta
    if s_delta == 0.0 or not math.isfinite(s_delta):
        return None
    return V2 + (P2 - Pref) / abs(s_delta)


class RstGuardResult(NamedTuple):
    Vref: float
    terminate: bool
    voc_tilde: float


def rst_guards(alpha: int, Vref_candidate: float, Vmpp_est: float, Vpv: float, voc_tilde: float) -> RstGuardResult:
    """Termination and open-circuit guards of the rapid tracking sequence."""
    if Vpv > voc_tilde:
        voc_tilde = VOC_GUARD_FACTOR * Vpv
    if alpha == 1:
        return RstGuardResult(Vref_candidate, True, voc_tilde)
    if Vref_candidate <= Vmpp_est:
        return RstGuardResult(Vmpp_est, True, voc_tilde)
    return RstGuardResult(Vref_candidate, False, voc_tilde)


# ---------------------------------------------------------------------------
# Controller
# ---------------------------------------------------------------------------


class StepRecord(NamedTuple):
    Vref: float
    alpha: int
    rst_phase: int
    Vstep: float
    dP_raw: float
    dP_decoupled: float
    Kph: float
    by_rst: bool = False


@dataclass
class FpptState:
    alpha: int = 1
    Vref: float = math.nan
    V_prev: float = math.nan
    I_prev: float = math.nan
    P_prev: float = math.nan
    dV_cmd: float = 0.0
    Kph_prev: float = 1.0
    G_prev: float = math.nan
    lambdaT_prev: float = math.nan
    Pref_prev: float = math.nan
    Pref_anchor: float = math.nan
    rst_phase: RstPhase = RstPhase.INACTIVE
    history: deque = field(default_factory=lambda: deque(maxlen=3))
    direction: int = 1
    dithering: bool = False  # steady two-level cycle around Pref in progress
    returning: bool = False  # last move was an exact return to the cycle's home level
    iterations: int = 0
    rst_starts: int = 0
    last: StepRecord | None = None


@dataclass
class FpptController:
    """Setpoint tracker called once per control period.

    ``update`` takes the latest (V, I) measurement, the power reference and
    the current estimator outputs, and returns the new voltage reference.
    """

    base: BaseParams
    datasheet: ModuleDatasheet
    cfg: FpptConfig = field(default_factory=FpptConfig)
    state: FpptState = field(default_factory=FpptState)

    def update(
        self,
        V: float,
        I: float,
        Pref: float,
        G_est: float,
        lambdaT_est: float,
        Vmpp_est: float,
        Pmpp_est: float,
        G_inst: float | None = None,
    ) -> float:
        """New voltage reference.

        ``G_est`` is the smoothed irradiance estimate used for the decoupling
        difference and the open-circuit estimate.  ``G_inst`` (default
        ``G_est``) is the unsmoothed one, used for the current ratio Kph so
        that the ratio does not lag a ramp.
        """
        cfg, s = self.cfg, self.state
        P = V * I
        params = five_params_at(self.base, EnvState(G_est, lambdaT_est), self.datasheet)
        if G_inst is None or G_inst == G_est or math.isnan(G_inst):
            kph_params = params
        else:
            kph_params = five_params_at(self.base, EnvState(G_inst, lambdaT_est), self.datasheet)
        if params is not None:
            voc_tilde = voc_estimate(params, cfg.k_voc)
            v_ceiling = voc_estimate(params, 1.0)
        else:
            voc_tilde = v_ceiling = V
        v_ceiling = max(v_ceiling, VOC_GUARD_FACTOR * V)

        if math.isnan(s.V_prev):
            s.Vref = V
            self._remember(V, I, P, G_est, Pref, kph_update(I, kph_params), 0.0)
            s.lambdaT_prev = lambdaT_est
            s.Pref_anchor = Pref
            s.last = StepRecord(V, 1, 0, 0.0, 0.0, 0.0, s.Kph_prev)
            return s.Vref

        dP_raw = P - s.P_prev
        if cfg.decoupling_enabled:
            G_prev = self._rebased_g_prev(lambdaT_est)
            _, dP_dec = decouple(V, I, s.V_prev, s.I_prev, s.Kph_prev, G_est, G_prev,
                                 self.base, self.datasheet, lambdaT_est)
        else:
            dP_dec = dP_raw
        Kph = kph_update(I, kph_params, s.Kph_prev)
        alpha = classify_mode(P, Pref, s.Pref_prev, dP_dec, s.dV_cmd, cfg, Pmpp_est)
        slope = s.dV_cmd / dP_dec if dP_dec != 0.0 and s.dV_cmd != 0.0 else None

        # rapid setpoint tracking: arm, restart or terminate
        if cfg.rst_enabled:
            if s.rst_phase != RstPhase.INACTIVE:
                if alpha == 1:
                    s.rst_phase = RstPhase.INACTIVE
                elif abs(Pref - s.Pref_prev) > cfg.dPref_th:
                    self._start_rst(Pref)
            elif alpha == 0 and abs(Pref - s.Pref_anchor) > cfg.dp_th:
                self._start_rst(Pref)
        if alpha == 1:
            s.Pref_anchor = Pref

        Vref_old = s.Vref
        Vref = None
        if s.rst_phase != RstPhase.INACTIVE:
            Vref = self._rst(V, P, Pref, voc_tilde, Vmpp_est, alpha)
        by_rst = Vref is not None
        if by_rst:
            s.dithering = s.returning = False
        else:
            Vref = self._perturb_observe(V, P, Pref, alpha, slope, Vmpp_est, Pmpp_est)

        Vref = min(max(Vref, 0.0), v_ceiling)
        s.Vref = Vref
        s.alpha = alpha
        s.iterations += 1
        self._remember(V, I, P, G_est, Pref, Kph, Vref - Vref_old)
        s.lambdaT_prev = lambdaT_est
        s.last = StepRecord(Vref, alpha, int(s.rst_phase), Vref - Vref_old, dP_raw, dP_dec, Kph, by_rst)
        return Vref

    # internals --------------------------------------------------------------

    def _rebased_g_prev(self, lambdaT_est: float) -> float:
        """Previous irradiance estimate expressed at the current temperature estimate."""
        s = self.state
        if lambdaT_est == s.lambdaT_prev or math.isnan(s.lambdaT_prev):
            return s.G_prev
        g_old = fast_irradiance(s.V_prev, s.I_prev, s.lambdaT_prev, self.base, self.datasheet)
        g_new = fast_irradiance(s.V_prev, s.I_prev, lambdaT_est, self.base, self.datasheet)
        if g_old is None or g_new is None:
            return s.G_prev
        return s.G_prev + (g_new - g_old)

    def _remember(self, V, I, P, G, Pref, Kph, dV_cmd):
        s = self.state
        s.V_prev, s.I_prev, s.P_prev = V, I, P
        s.G_prev, s.Pref_prev, s.Kph_prev = G, Pref, Kph
        s.dV_cmd = dV_cmd

    def _start_rst(self, Pref):
        s = self.state
        s.rst_phase = RstPhase.STEP1
        s.history.clear()
        s.Pref_anchor = Pref
        s.rst_starts += 1

    def _rst(self, V, P, Pref, voc_tilde, Vmpp_est, alpha):
        s = self.state
        s.history.append((V, P))
        if s.rst_phase in (RstPhase.STEP1, RstPhase.STEP2):
            if V > voc_tilde:
                voc_tilde = VOC_GUARD_FACTOR * V
            cand = rst_chord_step(V, P, Pref, voc_tilde)
        else:
            cand = rst_slope_step(s.history, Pref) if len(s.history) == 3 else None
        if cand is None:
            s.rst_phase = RstPhase.INACTIVE
            return None
        guard = rst_guards(alpha, cand, Vmpp_est, V, voc_tilde)
        if guard.terminate or s.rst_phase == RstPhase.STEP3:
            s.rst_phase = RstPhase.INACTIVE
        else:
            s.rst_phase = RstPhase(s.rst_phase + 1)
        return guard.Vref

    def _perturb_observe(self, V, P, Pref, alpha, slope, Vmpp_est, Pmpp_est):
        cfg, s = self.cfg, self.state
        if Pref >= Pmpp_est:
            # tracking the MPP
            s.dithering = s.returning = False
            if alpha == 0:
                step = transient_step(P, Pmpp_est, cfg)
                direction = 1 if Vmpp_est > s.Vref else -1
            else:
                step = steady_step(slope, cfg) if cfg.steady_step_enabled else transient_step(P, Pmpp_est, cfg)
                last = 1 if s.dV_cmd >= 0 else -1
                # keep going while the (decoupled) power rises
                direction = last if (slope is None or slope > 0) else -last
            s.direction = direction
            return s.Vref + direction * max(step, cfg.Vstep_min)

        direction = 1 if P > Pref else -1
        if alpha == 1 and cfg.steady_step_enabled:
            step = max(steady_step(slope, cfg), cfg.Vstep_min)
            err = abs(P - Pref)
            was_dithering = s.dithering
            if s.dV_cmd != 0.0:
                rev = -1 if s.dV_cmd > 0 else 1
                band = (cfg.reversal_band + (cfg.reversal_hold if was_dithering else 0.0)) * cfg.dP_max
                if err < band:
                    # within noise of Pref: step back instead of opening a third level
                    direction = rev
                s.dithering = direction == rev and (was_dithering or err < cfg.reversal_band * cfg.dP_max)
            else:
                s.dithering = False
            if s.dithering and was_dithering and not s.returning:
                # land exactly on the previous level so the cycle cannot drift
                step = abs(s.dV_cmd)
                s.returning = True
            else:
                s.returning = False
        else:
            s.dithering = s.returning = False
            step = transient_step(P, Pref, cfg)
            if cfg.overshoot_guard and slope is not None and slope < 0:
                step = min(step, abs(P - Pref) * abs(slope))
        step = max(step, cfg.Vstep_min)
        s.direction = direction
        Vref = s.Vref + direction * step
        if direction < 0 and Vref < Vmpp_est:
            Vref = Vmpp_est
        return Vref
