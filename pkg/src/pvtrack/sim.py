"""
Deterministic multi-rate closed-loop simulator.

Every fast tick (``Ts``) the environment is interpolated, the plant moves
toward the voltage reference, measurements are corrupted with sensor noise
and pushed into the estimator.  Every ``Tstep`` the controller issues a new
reference; every ``T_LM`` after the window first fills the estimator runs
one Levenberg-Marquardt iteration.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any

import numpy as np

from . import profiles as prof
from .fppt import FpptConfig, FpptController
from .metrics import droop_setpoint
from .mppe import LmState, MppEstimator, mpp_estimate
from .pv_model import (
    T0,
    BaseParams,
    EnvState,
    ModuleDatasheet,
    derive_base_params,
    five_params_at,
    mpp_array,
    mpp_from_params,
    open_circuit_voltage,
    pv_current,
    read_datasheets,
)


class ConfigError(ValueError):
    """Scenario configuration is inconsistent."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class ModelConfig:
    module: str = "CS6P-250P"
    n_series: int = 16
    n_parallel: int = 153
    datasheet_path: str | None = None
    rated_power: float = 500e3
    param_error: float = 0.0  # relative error of the controller-side base parameters

    def datasheet(self) -> ModuleDatasheet:
        sheets = read_datasheets(self.datasheet_path)
        if self.module not in sheets:
            raise ConfigError(f"module {self.module!r} not in datasheet fixtures {sorted(sheets)}")
        return sheets[self.module].array(self.n_series, self.n_parallel)


@dataclass
class MppeConfig:
    window: int = 100
    damping_gain: float = 3.0
    damping_min: float = 1e-6
    damping_max: float = 1e-3
    damping_init: float = 1e-4
    dG_max: float = 200.0  # W/m^2/s
    dT_max: float = 3.0  # degC/min
    filter_cutoff_hz: float = 1.0
    lambdaT_init: float = 1.0


@dataclass
class SimConfig:
    duration: float = 60.0
    Ts: float = 0.05
    Tstep: float = 0.25
    T_LM: float = 5.0
    plant_tau: float = 0.05
    noise_snr_db: float | None = 80.0  # None disables noise
    v_full_scale: float = 720.0
    i_full_scale: float = 1650.0
    seed: int = 0
    v_init: float | None = None  # default: true MPP voltage at t = 0
    irradiance: dict = field(default_factory=lambda: {"kind": "constant", "value": 1000.0})
    temperature: dict = field(default_factory=lambda: {"kind": "constant", "value": T0})
    setpoint: dict = field(default_factory=lambda: {"kind": "schedule", "points": [[0.0, 1e9]]})


@dataclass
class MetricsConfig:
    ripple_window: float = 10.0


_SECTIONS = {"model": ModelConfig, "mppe": MppeConfig, "fppt": FpptConfig, "sim": SimConfig, "metrics": MetricsConfig}


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    model: ModelConfig = field(default_factory=ModelConfig)
    mppe: MppeConfig = field(default_factory=MppeConfig)
    fppt: FpptConfig = field(default_factory=FpptConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        unknown = set(data) - set(_SECTIONS) - {"name"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kw: dict[str, Any] = {"name": data.get("name", "scenario")}
        for sec, typ in _SECTIONS.items():
            body = data.get(sec, {}) or {}
            names = {f.name for f in fields(typ)}
            bad = set(body) - names
            if bad:
                raise ConfigError(f"unknown keys in [{sec}]: {sorted(bad)}")
            try:
                kw[sec] = typ(**body)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{sec}]: {exc}") from exc
        return cls(**kw)

    def to_dict(self) -> dict:
        out = {"name": self.name}
        for sec in _SECTIONS:
            out[sec] = asdict(getattr(self, sec))
        return out

    def with_overrides(self, overrides: dict[str, Any]) -> "ScenarioConfig":
        """Copy with dotted ``section.key`` overrides applied."""
        data = copy.deepcopy(self.to_dict())
        for key, value in overrides.items():
            if key == "name":
                data["name"] = value
                continue
            sec, _, name = key.partition(".")
            if sec not in _SECTIONS or name not in {f.name for f in fields(_SECTIONS[sec])}:
                raise ConfigError(f"unknown config key {key!r}")
            data[sec][name] = value
        return ScenarioConfig.from_dict(data)


# ---------------------------------------------------------------------------
# Profile resolution
# ---------------------------------------------------------------------------


def build_profile(spec: dict, duration: float, name: str) -> prof.Profile:
    """Turn a profile spec from the config into a :class:`Profile`."""
    from .csvio import read_profile  # local import keeps csvio optional at import time

    kind = spec.get("kind")
    if kind == "constant":
        return prof.Profile.constant(float(spec["value"]), duration, name)
    if kind == "series":
        return prof.Profile(np.asarray(spec["t"], float), np.asarray(spec["values"], float), name)
    if kind == "csv":
        return read_profile(spec["path"], spec.get("column"))
    if kind == "ramp":
        p = prof.ramp(spec["t0"], spec["t1"], spec["v0"], spec["v1"], duration)
        return prof.Profile(p.t, p.values, name)
    if kind == "sunny":
        return prof.sunny_day(spec.get("duration", duration), spec.get("dt", 1.0), spec.get("peak", 1000.0))
    if kind == "cloudy":
        return prof.cloudy_day(
            spec.get("duration", duration), spec.get("dt", 1.0), spec.get("peak", 1000.0), spec.get("seed", 1)
        )
    if kind == "cell_temperature":
        irr = build_profile(spec["irradiance"], duration, "irradiance")
        return prof.cell_temperature(irr)
    if kind == "rocof":
        return prof.rocof_trace(
            spec["rocof"], spec["nadir"], spec.get("f_nom", 60.0), spec.get("t_event", 5.0),
            spec.get("hold", 10.0), spec.get("recovery"), duration,
        )
    raise ConfigError(f"unknown profile kind {kind!r} for {name}")


class Setpoint:
    """Power reference source: fixed schedule, fixed headroom, or droop."""

    def __init__(self, spec: dict, duration: float, rated_power: float):
        self.kind = spec.get("kind", "schedule")
        self.spec = spec
        self.rated = rated_power
        if self.kind == "schedule":
            pts = sorted((float(t), float(p)) for t, p in spec["points"])
            self.times = [t for t, _ in pts]
            self.values = [p for _, p in pts]
        elif self.kind == "csv":
            from .csvio import read_setpoints

            pts = read_setpoints(spec["path"])
            self.kind = "schedule"
            self.times = [float(t) for t in pts[0]]
            self.values = [float(p) for p in pts[1]]
        elif self.kind == "headroom":
            self.reserve = float(spec["reserve"])
            self.floor = float(spec.get("floor", 0.0))
        elif self.kind == "droop":
            self.freq = build_profile(spec["frequency"], duration, "frequency")
            self.p_base = float(spec["p_base"])
            self.droop = float(spec.get("droop", 0.05))
            self.f_nom = float(spec.get("f_nom", 60.0))
            self.deadband = float(spec.get("deadband", 0.0))
        else:
            raise ConfigError(f"unknown setpoint kind {self.kind!r}")

    def coverage_problem(self, duration: float) -> str | None:
        if self.kind == "schedule":
            if not self.times or self.times[0] > 0.0:
                return "setpoint schedule must start at t = 0"
        if self.kind == "droop" and not self.freq.covers(0.0, duration):
            lo, hi = self.freq.span
            return f"frequency trace spans [{lo:g}, {hi:g}] s, shorter than duration {duration:g} s"
        return None

    def __call__(self, t: float, pmpp_est: float) -> float:
        if self.kind == "schedule":
            import bisect

            return self.values[max(bisect.bisect_right(self.times, t) - 1, 0)]
        if self.kind == "headroom":
            return max(pmpp_est - self.reserve, self.floor)
        return droop_setpoint(
            self.freq(t), pmpp_est, self.droop, self.f_nom, self.deadband, self.p_base, self.rated
        )


# ---------------------------------------------------------------------------
# Plant and sensors
# ---------------------------------------------------------------------------


def plant_step(Vpv: float, Vref: float, env_true: EnvState, b: BaseParams, d: ModuleDatasheet,
               dt: float, plant_tau: float = 0.05) -> tuple[float, float, float]:
    """First-order voltage lag followed by the array I-V curve.

    The array cannot be driven past open circuit; a reference beyond it
    leaves the array floating at Voc with zero current.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    V = Vpv + (Vref - Vpv) * (1.0 - math.exp(-dt / plant_tau))
    p = five_params_at(b, env_true, d)
    if p is None:
        return max(V, 0.0), 0.0, 0.0
    I = pv_current(p, V)
    if I < 0.0:
        V, I = open_circuit_voltage(p), 0.0
    return V, I, V * I


def add_noise(value: float, full_scale: float, snr_db: float | None, rng: np.random.Generator) -> float:
    """Gaussian sensor noise with sigma = full_scale * 10**(-snr_db/20)."""
    if snr_db is None or math.isinf(snr_db):
        return value
    if snr_db <= 0:
        raise ValueError("snr_db must be positive")
    return value + rng.normal(0.0, full_scale * 10.0 ** (-snr_db / 20.0))


def noise_sigma(full_scale: float, snr_db: float | None) -> float:
    if snr_db is None or math.isinf(snr_db):
        return 0.0
    return full_scale * 10.0 ** (-snr_db / 20.0)


# ---------------------------------------------------------------------------
# Trace
# ---------------------------------------------------------------------------

TRACE_COLUMNS = (
    "t", "G_true", "lambdaT_true", "Vpv", "Ipv", "P", "V_meas", "I_meas",
    "G_hat_fast", "G_hat_filtered", "G_hat_lm", "lambdaT_hat", "damping", "residual_ss",
    "Vref", "Pref", "alpha", "rst_phase", "Pmpp_true", "Pmpp_est",
)

CONTROLLER_COLUMNS = (
    "t", "Vref", "Vpv", "Ipv", "P", "Pref", "alpha", "rst_phase",
    "Vstep", "dP_raw", "dP_decoupled", "Kph",
)

ESTIMATOR_COLUMNS = (
    "t", "G_true", "G_hat_fast", "G_hat_lm", "lambdaT_true", "lambdaT_hat", "damping", "residual_ss",
)


@dataclass
class SimTrace:
    """Fast-rate record plus the controller-rate record of one run."""

    columns: dict[str, np.ndarray]
    controller: dict[str, np.ndarray]
    n_fast: int = 0
    n_controller: int = 0
    n_lm: int = 0
    rated_power: float = 500e3

    def __getitem__(self, key: str) -> np.ndarray:
        return self.columns[key]

    def __len__(self) -> int:
        return self.n_fast

    def estimator_view(self) -> dict[str, np.ndarray]:
        return {c: self.columns[c] for c in ESTIMATOR_COLUMNS}


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------


def _ratio(a: float, b: float, what: str) -> int:
    r = a / b
    n = round(r)
    if n < 1 or abs(r - n) > 1e-9 * max(1.0, r):
        raise ConfigError(f"{what} must be an integer multiple ({a:g} / {b:g} = {r:g})")
    return n


def validate_config(cfg: ScenarioConfig) -> list[str]:
    """Human-readable list of configuration problems (empty when valid)."""
    problems = []
    s = cfg.sim
    if s.duration < 0:
        problems.append(f"duration {s.duration:g} s is negative")
    if not 0 < s.Ts <= s.Tstep <= s.T_LM:
        problems.append(f"need 0 < Ts <= Tstep <= T_LM (got {s.Ts:g}, {s.Tstep:g}, {s.T_LM:g})")
    for a, b, what in ((s.Tstep, s.Ts, "Tstep / Ts"), (s.T_LM, s.Tstep, "T_LM / Tstep")):
        try:
            _ratio(a, b, what)
        except ConfigError as exc:
            problems.append(str(exc))
    if s.plant_tau <= 0:
        problems.append("plant_tau must be positive")
    if s.noise_snr_db is not None and s.noise_snr_db <= 0:
        problems.append("noise_snr_db must be positive or null")
    try:
        cfg.model.datasheet()
    except Exception as exc:  # noqa: BLE001 - report any datasheet problem
        problems.append(f"model: {exc}")
    for spec, name in ((s.irradiance, "irradiance"), (s.temperature, "temperature")):
        try:
            p = build_profile(spec, s.duration, name)
        except Exception as exc:  # noqa: BLE001
            problems.append(f"{name} profile: {exc}")
            continue
        if not p.covers(0.0, s.duration):
            lo, hi = p.span
            problems.append(
                f"{name} profile spans [{lo:g}, {hi:g}] s, does not cover duration {s.duration:g} s"
            )
    try:
        sp = Setpoint(s.setpoint, s.duration, cfg.model.rated_power)
        msg = sp.coverage_problem(s.duration)
        if msg:
            problems.append(msg)
    except Exception as exc:  # noqa: BLE001
        problems.append(f"setpoint: {exc}")
    if abs(cfg.fppt.f_step * s.Tstep - 1.0) > 1e-9:
        problems.append(f"fppt.f_step = {cfg.fppt.f_step:g} Hz disagrees with sim.Tstep = {s.Tstep:g} s")
    return problems


def run_scenario(cfg: ScenarioConfig) -> SimTrace:
    """Run one scenario; bit-identical output for identical configs."""
    problems = validate_config(cfg)
    if problems:
        raise ConfigError("; ".join(problems))
    s = cfg.sim
    d = cfg.model.datasheet()
    b_true = derive_base_params(d)
    b_ctrl = b_true.scaled(1.0 + cfg.model.param_error) if cfg.model.param_error else b_true

    n_fast = int(math.floor(s.duration / s.Ts + 1e-9))
    nstep = _ratio(s.Tstep, s.Ts, "Tstep / Ts")
    nlm = _ratio(s.T_LM, s.Ts, "T_LM / Ts")
    times = np.arange(n_fast) * s.Ts

    irr = build_profile(s.irradiance, s.duration, "irradiance")
    tmp = build_profile(s.temperature, s.duration, "temperature")
    G_arr = np.clip(irr.sample(times) / 1000.0, 0.0, 1.0) if n_fast else np.zeros(0)
    lt_arr = tmp.sample(times) / T0 if n_fast else np.zeros(0)
    setpoint = Setpoint(s.setpoint, s.duration, cfg.model.rated_power)

    rng = np.random.default_rng(s.seed)
    sig_v = noise_sigma(s.v_full_scale, s.noise_snr_db)
    sig_i = noise_sigma(s.i_full_scale, s.noise_snr_db)
    noise = rng.standard_normal((n_fast, 2)) if n_fast else np.zeros((0, 2))

    m = cfg.mppe
    lm = LmState(
        lambdaT=m.lambdaT_init, damping=m.damping_init, damping_gain=m.damping_gain,
        damping_range=(m.damping_min, m.damping_max), dG_max=m.dG_max, dT_max=m.dT_max, T_LM=s.T_LM,
    )
    est = MppEstimator(b_ctrl, d, lm, capacity=m.window, Ts=s.Ts, filter_cutoff_hz=m.filter_cutoff_hz)
    ctrl = FpptController(b_ctrl, d, cfg.fppt)

    cols: dict[str, list] = {c: [] for c in TRACE_COLUMNS}
    ccols: dict[str, list] = {c: [] for c in CONTROLLER_COLUMNS}
    n_ctrl = n_lm = 0

    if n_fast:
        p0 = five_params_at(b_true, EnvState(G_arr[0], lt_arr[0]), d)
        V = s.v_init if s.v_init is not None else mpp_from_params(p0)[0]
    else:
        V = 0.0
    Vref = V
    Pref = setpoint(0.0, 0.0) if setpoint.kind == "schedule" else 0.0
    exp_lag = 1.0 - math.exp(-s.Ts / s.plant_tau)
    ctrl_cols = CONTROLLER_COLUMNS

    for k in range(n_fast):
        t = times[k]
        env = EnvState(float(G_arr[k]), float(lt_arr[k]))
        # plant
        p = five_params_at(b_true, env, d)
        V = V + (Vref - V) * exp_lag
        if p is None:
            I = 0.0
        else:
            I = pv_current(p, V)
            if I < 0.0:
                V, I = open_circuit_voltage(p), 0.0
        # sensors
        Vm = V + sig_v * noise[k, 0]
        Im = I + sig_i * noise[k, 1]
        # estimator
        est.push_sample(t, Vm, Im)
        st = est.state
        # controller
        if (k + 1) % nstep == 0:
            Vmp_e, _, Pmp_e = mpp_estimate(st, b_ctrl, d)
            Pref = setpoint(t, Pmp_e)
            G_c = st.G_filtered if not math.isnan(st.G_filtered) else 0.0
            Vref = ctrl.update(Vm, Im, Pref, G_c, st.lambdaT, Vmp_e, Pmp_e, st.G_fast)
            n_ctrl += 1
            rec = ctrl.state.last
            for c, v in zip(ctrl_cols, (t, Vref, Vm, Im, Vm * Im, Pref, rec.alpha, rec.rst_phase,
                                        rec.Vstep, rec.dP_raw, rec.dP_decoupled, rec.Kph)):
                ccols[c].append(v)
        # slow loop
        if k + 1 > est.capacity and (k + 1 - est.capacity) % nlm == 0:
            est.lm_iterate()
            n_lm += 1
        row = (t, env.G, env.lambdaT, V, I, V * I, Vm, Im, st.G_fast, st.G_filtered, st.G, st.lambdaT,
               st.damping, st.last_ssr, Vref, Pref, ctrl.state.alpha, int(ctrl.state.rst_phase))
        for c, v in zip(TRACE_COLUMNS, row):
            cols[c].append(v)

    out = {c: np.asarray(v, dtype=float) for c, v in cols.items() if c not in ("Pmpp_true", "Pmpp_est")}
    out["Pmpp_true"] = mpp_array(b_true, G_arr, lt_arr, d)[2]
    g_fast = np.nan_to_num(out["G_hat_fast"], nan=0.0)
    out["Pmpp_est"] = mpp_array(b_ctrl, g_fast, out["lambdaT_hat"], d)[2]
    out = {c: out[c] for c in TRACE_COLUMNS}
    return SimTrace(
        columns=out,
        controller={c: np.asarray(v, dtype=float) for c, v in ccols.items()},
        n_fast=n_fast,
        n_controller=n_ctrl,
        n_lm=n_lm,
        rated_power=cfg.model.rated_power,
    )
