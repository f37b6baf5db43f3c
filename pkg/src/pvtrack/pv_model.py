"""
Single-diode model of a PV array.

Base parameters are derived once from STC datasheet values and scaled to
any irradiance / temperature.  Irradiance is normalized (``G = 1`` is
1000 W/m^2) and temperature is carried as the ratio ``lambdaT = T / T0``.
All functions are pure and operate on plain floats, which keeps the
per-sample cost low inside the simulator loop.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from importlib import resources
from typing import Iterator

import numpy as np

T0 = 298.15
"""Cell temperature at STC in kelvin."""

IS_TEMP_EXPONENT = 47.1
"""Exponent constant of the saturation-current temperature law (silicon)."""

DELTA0_CONSTANT = 50.1
"""Constant in the denominator of the delta0 expression (silicon)."""

G_NOMINAL_W_M2 = 1000.0

LAMBDA_T_BAND = (0.8, 1.3)

_NEWTON_MAX_ITER = 50
_NEWTON_RTOL = 1e-9


class PVModelError(ValueError):
    """Invalid input to the PV model."""


class ParameterDerivationError(PVModelError):
    """Datasheet values produce a non-physical parameter set."""


class ConvergenceError(ArithmeticError):
    """An iterative solver hit its iteration cap."""


@dataclass(frozen=True)
class ModuleDatasheet:
    """STC datasheet values of one module and the array layout.

    Temperature coefficients are relative (per kelvin), e.g. 0.065 %/K is
    ``alpha_Isc = 6.5e-4``.
    """

    Voc0_module: float
    Isc0_module: float
    Vmp0_module: float
    Imp0_module: float
    alpha_Isc: float
    beta_Voc: float
    n_series: int = 1
    n_parallel: int = 1
    name: str = ""

    def __post_init__(self):
        if not 0 < self.Vmp0_module < self.Voc0_module:
            raise PVModelError("need 0 < Vmp0 < Voc0")
        if not 0 < self.Imp0_module < self.Isc0_module:
            raise PVModelError("need 0 < Imp0 < Isc0")
        if self.alpha_Isc <= 0 or self.beta_Voc >= 0:
            raise PVModelError("need alpha_Isc > 0 and beta_Voc < 0")
        if self.n_series < 1 or self.n_parallel < 1:
            raise PVModelError("array size must be at least 1 x 1")

    @property
    def Voc0(self) -> float:
        return self.Voc0_module * self.n_series

    @property
    def Vmp0(self) -> float:
        return self.Vmp0_module * self.n_series

    @property
    def Isc0(self) -> float:
        return self.Isc0_module * self.n_parallel

    @property
    def Imp0(self) -> float:
        return self.Imp0_module * self.n_parallel

    @property
    def rated_power(self) -> float:
        return self.Vmp0 * self.Imp0

    def array(self, n_series: int, n_parallel: int) -> "ModuleDatasheet":
        return replace(self, n_series=n_series, n_parallel=n_parallel)


@dataclass(frozen=True)
class BaseParams:
    """Array-level model parameters at STC."""

    a0: float
    Rs0: float
    Rsh0: float
    Iph0: float
    Is0: float
    delta0: float
    w0: float

    def scaled(self, factor: float) -> "BaseParams":
        """Copy with the five electrical parameters multiplied by ``factor``.

        Used to emulate a mis-calibrated model; ``delta0`` and ``w0`` are
        kept so the copy stays self-describing.
        """
        return replace(
            self,
            a0=self.a0 * factor,
            Rs0=self.Rs0 * factor,
            Rsh0=self.Rsh0 * factor,
            Iph0=self.Iph0 * factor,
            Is0=self.Is0 * factor,
        )


@dataclass(frozen=True)
class FiveParams:
    a: float
    Rs: float
    Rsh: float
    Iph: float
    Is: float


@dataclass(frozen=True)
class EnvState:
    """Normalized irradiance and cell-temperature ratio."""

    G: float
    lambdaT: float = 1.0

    @classmethod
    def from_kelvin(cls, G: float, T_kelvin: float) -> "EnvState":
        return cls(G, T_kelvin / T0)

    @classmethod
    def from_w_m2(cls, irradiance: float, T_kelvin: float = T0) -> "EnvState":
        return cls(min(max(irradiance / G_NOMINAL_W_M2, 0.0), 1.0), T_kelvin / T0)

    @property
    def T_kelvin(self) -> float:
        return self.lambdaT * T0


# ---------------------------------------------------------------------------
# Lambert W
# ---------------------------------------------------------------------------


def lambert_w(x: float) -> float:
    """Principal branch of the Lambert W function for ``x >= 0``.

    Halley iteration from Winitzki's log-based starting guess; three
    iterations are normally enough for full double precision.
    """
    if not x >= 0:  # also rejects NaN
        raise PVModelError(f"lambert_w requires x >= 0, got {x!r}")
    if x == 0.0:
        return 0.0
    if math.isinf(x):
        return math.inf
    L = math.log1p(x)
    w = L * (1.0 - math.log1p(L) / (2.0 + L))
    for _ in range(30):
        ew = math.exp(w)
        f = w * ew - x
        wp1 = w + 1.0
        dw = f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1))
        w -= dw
        if abs(dw) <= 4e-16 * (1.0 + abs(w)):
            break
    return w


def lambert_w_exp(log_x: float) -> float:
    """W(exp(log_x)) without forming exp(log_x); safe for huge arguments."""
    if log_x < 2.0:
        return lambert_w(math.exp(log_x))
    # w + ln(w) = log_x
    w = log_x - math.log(log_x)
    for _ in range(30):
        f = w + math.log(w) - log_x
        fp = 1.0 + 1.0 / w
        fpp = -1.0 / (w * w)
        dw = f / (fp - 0.5 * f * fpp / fp)
        w -= dw
        if abs(dw) <= 4e-16 * w:
            break
    return w


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def delta0_from_coefficients(alpha_Isc: float, beta_Voc: float) -> float:
    return (1.0 - beta_Voc * T0) / (DELTA0_CONSTANT - alpha_Isc * T0)


def derive_base_params(d: ModuleDatasheet) -> BaseParams:
    """Derive the array-level STC parameter set from datasheet values."""
    Voc0, Isc0, Vmp0, Imp0 = d.Voc0, d.Isc0, d.Vmp0, d.Imp0
    delta0 = delta0_from_coefficients(d.alpha_Isc, d.beta_Voc)
    if delta0 <= 0:
        raise ParameterDerivationError(f"delta0 = {delta0:g} is not positive")
    a0 = delta0 * Voc0
    w0 = lambert_w_exp(1.0 / delta0 + 1.0)

    rs_num = a0 * (w0 - 1.0) - Vmp0
    if rs_num <= 0:
        raise ParameterDerivationError(
            f"series-resistance equation gives a0*(w0-1) - Vmp0 = {rs_num:g} <= 0"
        )
    Rs0 = rs_num / Imp0

    rsh_den = Isc0 * (1.0 - 1.0 / w0) - Imp0
    if rsh_den <= 0:
        raise ParameterDerivationError(
            f"shunt-resistance equation gives Isc0*(1-1/w0) - Imp0 = {rsh_den:g} <= 0"
        )
    Rsh0 = a0 * (w0 - 1.0) / rsh_den

    Iph0 = (1.0 + Rs0 / Rsh0) * Isc0
    Is0 = Iph0 * math.exp(-1.0 / delta0)
    return BaseParams(a0, Rs0, Rsh0, Iph0, Is0, delta0, w0)


def iph_temperature_factor(lambdaT: float, alpha_Isc: float) -> float:
    return 1.0 + alpha_Isc * T0 * (lambdaT - 1.0)


def is_at(b: BaseParams, lambdaT: float) -> float:
    """Diode saturation current at temperature ratio ``lambdaT``."""
    return b.Is0 * lambdaT**3 * math.exp(IS_TEMP_EXPONENT * (1.0 - 1.0 / lambdaT))


def diph_dg(b: BaseParams, lambdaT: float, d: ModuleDatasheet) -> float:
    """Sensitivity of the photocurrent to normalized irradiance (A per p.u.)."""
    return b.Iph0 * iph_temperature_factor(lambdaT, d.alpha_Isc)


def five_params_at(b: BaseParams, env: EnvState, d: ModuleDatasheet) -> FiveParams | None:
    """Five parameters at ``env``; ``None`` marks the dark state (G <= 0)."""
    if env.G <= 0.0:
        return None
    return FiveParams(
        a=b.a0 * env.lambdaT,
        Rs=b.Rs0,
        Rsh=b.Rsh0 / env.G,
        Iph=b.Iph0 * env.G * iph_temperature_factor(env.lambdaT, d.alpha_Isc),
        Is=is_at(b, env.lambdaT),
    )


# ---------------------------------------------------------------------------
# I-V solution
# ---------------------------------------------------------------------------


def _explicit_current(p: FiveParams, V: float) -> float:
    a, Rs, Rsh, Iph, Is = p.a, p.Rs, p.Rsh, p.Iph, p.Is
    if Rs <= 0.0:
        return Iph - Is * math.expm1(V / a) - V / Rsh
    Rt = Rs + Rsh
    log_theta = (
        math.log(Rs * Rsh * Is / (a * Rt)) + Rsh * (Rs * (Iph + Is) + V) / (a * Rt)
    )
    return (Rsh * (Iph + Is) - V) / Rt - (a / Rs) * lambert_w_exp(log_theta)


def pv_current(p: FiveParams, Vpv: float) -> float:
    """Terminal current at voltage ``Vpv``.

    The explicit Lambert-W solution seeds a damped Newton polish of the
    implicit equation.
    """
    a, Rs, Rsh, Iph, Is = p.a, p.Rs, p.Rsh, p.Iph, p.Is
    I = _explicit_current(p, Vpv)
    scale = max(Iph, 1e-12)

    def resid(i):
        return Iph - Is * math.expm1((Vpv + i * Rs) / a) - (Vpv + i * Rs) / Rsh - i

    f = resid(I)
    for _ in range(_NEWTON_MAX_ITER):
        if abs(f) <= _NEWTON_RTOL * scale * 1e-3:
            return I
        fp = -Is * Rs / a * math.exp((Vpv + I * Rs) / a) - Rs / Rsh - 1.0
        step = f / fp
        t = 1.0
        while True:
            I_new = I - t * step
            f_new = resid(I_new)
            if abs(f_new) < abs(f) or t < 1e-6:
                break
            t *= 0.5
        converged = abs(I_new - I) <= _NEWTON_RTOL * scale
        I, f = I_new, f_new
        if converged:
            return I
    raise ConvergenceError(
        f"pv_current did not converge at V={Vpv:g} (last residual {f:g} A, params {p})"
    )


def pv_slope(p: FiveParams, Vpv: float, Ipv: float) -> float:
    """dP/dV of the I-V curve at a point on it."""
    g = p.Is / p.a * math.exp((Vpv + Ipv * p.Rs) / p.a) + 1.0 / p.Rsh
    dI_dV = -g / (1.0 + p.Rs * g)
    return Ipv + Vpv * dI_dV


def open_circuit_voltage(p: FiveParams) -> float:
    """Voltage at which the terminal current vanishes."""
    a, Rsh, Iph, Is = p.a, p.Rsh, p.Iph, p.Is
    if Iph <= 0.0:
        return 0.0

    def f(v):
        return Iph - Is * math.expm1(v / a) - v / Rsh

    hi = a * math.log1p(Iph / Is)
    lo = 0.0
    if f(hi) > 0 or f(lo) < 0:
        raise ConvergenceError(f"cannot bracket open-circuit voltage for {p}")
    # Newton from the upper bound is monotone for this convex residual.
    v = hi
    for _ in range(100):
        fv = f(v)
        fp = -Is / a * math.exp(v / a) - 1.0 / Rsh
        dv = fv / fp
        v -= dv
        if abs(dv) <= 1e-13 * hi:
            return v
    raise ConvergenceError(f"open-circuit Newton did not converge for {p}")


def voc_estimate(p: FiveParams, k: float = 1.0) -> float:
    """Explicit open-circuit estimate ``k * a * ln(1 + Iph/Is)``."""
    if not 0.0 < k <= 1.0:
        raise PVModelError(f"scaling factor k must be in (0, 1], got {k}")
    return k * p.a * math.log1p(p.Iph / p.Is)


def mpp_from_params(p: FiveParams | None) -> tuple[float, float, float]:
    """Closed-form maximum power point (Vmp, Imp, Pmp) of a parameter set."""
    if p is None or p.Iph <= 0.0:
        return 0.0, 0.0, 0.0
    w = lambert_w_exp(math.log(p.Iph / p.Is) + 1.0)
    Vmp = (1.0 + p.Rs / p.Rsh) * p.a * (w - 1.0) - p.Rs * p.Iph * (1.0 - 1.0 / w)
    Imp = p.Iph * (1.0 - 1.0 / w) - p.a * (w - 1.0) / p.Rsh
    return Vmp, Imp, Vmp * Imp


def mpp(b: BaseParams, env: EnvState, d: ModuleDatasheet) -> tuple[float, float, float]:
    return mpp_from_params(five_params_at(b, env, d))


def mpp_array(b: BaseParams, G, lambdaT, d: ModuleDatasheet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized :func:`mpp` over arrays of G and lambdaT (zeros where G <= 0)."""
    G = np.asarray(G, dtype=float)
    lt = np.broadcast_to(np.asarray(lambdaT, dtype=float), G.shape)
    lit = G > 0.0
    Gs = np.where(lit, G, 1.0)
    a = b.a0 * lt
    Rsh = b.Rsh0 / Gs
    Iph = b.Iph0 * Gs * (1.0 + d.alpha_Isc * T0 * (lt - 1.0))
    Is = b.Is0 * lt**3 * np.exp(IS_TEMP_EXPONENT * (1.0 - 1.0 / lt))
    L = np.log(Iph / Is) + 1.0
    if np.any(L[lit] < 2.0):
        w = np.array([lambert_w_exp(x) for x in L.ravel()]).reshape(L.shape)
    else:
        w = L - np.log(L)
        for _ in range(6):
            f = w + np.log(w) - L
            fp = 1.0 + 1.0 / w
            w = w - f / (fp + 0.5 * f / (w * w * fp))
    Vmp = (1.0 + b.Rs0 / Rsh) * a * (w - 1.0) - b.Rs0 * Iph * (1.0 - 1.0 / w)
    Imp = Iph * (1.0 - 1.0 / w) - a * (w - 1.0) / Rsh
    Vmp, Imp = np.where(lit, Vmp, 0.0), np.where(lit, Imp, 0.0)
    return Vmp, Imp, Vmp * Imp


def iv_sweep(p: FiveParams, n: int = 10_000, v_max: float | None = None) -> Iterator[tuple[float, float]]:
    """Yield ``n`` evenly spaced (V, I) points from 0 to ``v_max`` (default Voc)."""
    if v_max is None:
        v_max = open_circuit_voltage(p)
    for k in range(n):
        v = v_max * k / (n - 1)
        yield v, pv_current(p, v)


# ---------------------------------------------------------------------------
# Datasheet fixtures
# ---------------------------------------------------------------------------

_FIXTURE_COLUMNS = ("name", "Voc0", "Isc0", "Vmp0", "Imp0", "alpha_Isc", "beta_Voc")


def read_datasheets(path=None) -> dict[str, ModuleDatasheet]:
    """Read module datasheets from CSV (bundled fixture when ``path`` is None).

    Lines starting with ``#`` are comments.  Values are per module; the
    array layout is applied separately with :meth:`ModuleDatasheet.array`.
    """
    if path is None:
        text = resources.files("pvtrack").joinpath("data/modules.csv").read_text()
    else:
        with open(path, newline="") as fh:
            text = fh.read()
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    reader = csv.DictReader(lines)
    missing = [c for c in _FIXTURE_COLUMNS if c not in (reader.fieldnames or [])]
    if missing:
        raise PVModelError(f"datasheet CSV is missing columns {missing}")
    out = {}
    for row in reader:
        out[row["name"]] = ModuleDatasheet(
            Voc0_module=float(row["Voc0"]),
            Isc0_module=float(row["Isc0"]),
            Vmp0_module=float(row["Vmp0"]),
            Imp0_module=float(row["Imp0"]),
            alpha_Isc=float(row["alpha_Isc"]),
            beta_Voc=float(row["beta_Voc"]),
            name=row["name"],
        )
    return out


def cs6p_250p_array(n_parallel: int = 153, n_series: int = 16) -> ModuleDatasheet:
    """The 612 kW reference array: 153 strings of 16 CS6P-250P modules."""
    return read_datasheets()["CS6P-250P"].array(n_series, n_parallel)
