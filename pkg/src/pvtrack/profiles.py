"""Time-series profiles: interpolation and synthetic weather / frequency traces."""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass

import numpy as np


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class Profile:
    """Piecewise-linear series on a strictly increasing time grid."""

    t: np.ndarray
    values: np.ndarray
    name: str = ""

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.ndim != 1 or t.shape != v.shape or t.size == 0:
            raise ProfileError(f"profile {self.name!r}: t and values must be equal-length 1-d")
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise ProfileError(f"profile {self.name!r}: time grid must be strictly increasing")
        if not np.all(np.isfinite(v)):
            raise ProfileError(f"profile {self.name!r}: non-finite values")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "values", v)

    @property
    def span(self) -> tuple[float, float]:
        return float(self.t[0]), float(self.t[-1])

    def covers(self, t0: float, t1: float) -> bool:
        return self.t[0] <= t0 and t1 <= self.t[-1]

    def __call__(self, t: float) -> float:
        return interpolate_profile(self, t)

    def sample(self, times: np.ndarray) -> np.ndarray:
        times = np.asarray(times, dtype=float)
        if times.size and (times.min() < self.t[0] or times.max() > self.t[-1]):
            raise ProfileError(
                f"profile {self.name!r} spans [{self.t[0]:g}, {self.t[-1]:g}] s, "
                f"requested [{times.min():g}, {times.max():g}] s"
            )
        return np.interp(times, self.t, self.values)

    def shifted(self, dt: float) -> "Profile":
        return Profile(self.t + dt, self.values, self.name)

    @classmethod
    def constant(cls, value: float, duration: float, name: str = "") -> "Profile":
        return cls(np.array([0.0, max(duration, 1e-9)]), np.array([value, value]), name)


def interpolate_profile(profile: Profile, t: float) -> float:
    tt, vv = profile.t, profile.values
    if t < tt[0] or t > tt[-1]:
        raise ProfileError(
            f"t={t:g} s outside profile {profile.name!r} span [{tt[0]:g}, {tt[-1]:g}] s"
        )
    k = bisect.bisect_right(tt, t) - 1
    if k >= len(tt) - 1:
        return float(vv[-1])
    w = (t - tt[k]) / (tt[k + 1] - tt[k])
    return float(vv[k] + w * (vv[k + 1] - vv[k]))


# ---------------------------------------------------------------------------
# Synthetic weather
# ---------------------------------------------------------------------------


def clear_sky(t: np.ndarray, duration: float, peak: float = 1000.0, margin_h: float = 1.0) -> np.ndarray:
    """Bell-shaped clear-sky irradiance over a run that starts ``margin_h``
    hours after sunrise and ends as far before sunset."""
    day = duration + 2 * margin_h * 3600.0
    x = (t + margin_h * 3600.0) / day
    return peak * np.sin(np.pi * np.clip(x, 0.0, 1.0)) ** 1.2


def rate_limit(values: np.ndarray, dt: float, max_rate: float) -> np.ndarray:
    out = np.empty_like(values)
    out[0] = values[0]
    dmax = max_rate * dt
    for k in range(1, len(values)):
        out[k] = out[k - 1] + min(max(values[k] - out[k - 1], -dmax), dmax)
    return out


def sunny_day(duration: float = 36000.0, dt: float = 1.0, peak: float = 1000.0) -> Profile:
    t = np.arange(0.0, duration + dt / 2, dt)
    return Profile(t, clear_sky(t, duration, peak), "irradiance")


def cloudy_day(
    duration: float = 36000.0,
    dt: float = 1.0,
    peak: float = 1000.0,
    seed: int = 1,
    mean_clear_s: float = 240.0,
    mean_cloud_s: float = 120.0,
    depth: tuple[float, float] = (0.3, 0.75),
    tau_s: float = 3.0,
    max_rate: float = 200.0,
) -> Profile:
    """Clear sky modulated by filtered random-telegraph cloud dips.

    The result is slope-limited to ``max_rate`` W/m^2/s.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(0.0, duration + dt / 2, dt)
    factor = np.ones_like(t)
    now, cloudy = 0.0, False
    while now < duration:
        span = rng.exponential(mean_cloud_s if cloudy else mean_clear_s)
        if cloudy:
            att = 1.0 - rng.uniform(*depth)
            factor[(t >= now) & (t < now + span)] = att
        now += span
        cloudy = not cloudy
    a = 1.0 - math.exp(-dt / tau_s)
    filt = np.empty_like(factor)
    filt[0] = factor[0]
    for k in range(1, len(t)):
        filt[k] = filt[k - 1] + a * (factor[k] - filt[k - 1])
    g = rate_limit(clear_sky(t, duration, peak) * filt, dt, max_rate)
    return Profile(t, np.clip(g, 0.0, None), "irradiance")


def cell_temperature(
    irradiance: Profile,
    ambient_min_c: float = 15.0,
    ambient_max_c: float = 28.0,
    k_c_per_w_m2: float = 0.03,
    tau_s: float = 420.0,
) -> Profile:
    """Cell temperature in kelvin from ambient plus lagged irradiance heating."""
    t = irradiance.t
    span = t[-1] - t[0] if len(t) > 1 else 1.0
    ambient = ambient_min_c + (ambient_max_c - ambient_min_c) * np.sin(np.pi * (t - t[0]) / span * 0.8 + 0.2) ** 2
    target = ambient + k_c_per_w_m2 * irradiance.values
    out = np.empty_like(target)
    out[0] = target[0]
    for k in range(1, len(t)):
        a = 1.0 - math.exp(-(t[k] - t[k - 1]) / tau_s)
        out[k] = out[k - 1] + a * (target[k] - out[k - 1])
    return Profile(t, out + 273.15, "temperature")


def ramp(t0: float, t1: float, v0: float, v1: float, duration: float) -> Profile:
    pts_t = [0.0, t0, t1, max(duration, t1 + 1e-9)]
    pts_v = [v0, v0, v1, v1]
    if t0 <= 0:
        pts_t, pts_v = pts_t[1:], pts_v[1:]
    return Profile(np.array(pts_t), np.array(pts_v))


def rocof_trace(
    rocof_hz_s: float,
    nadir_hz: float,
    f_nom: float = 60.0,
    t_event: float = 5.0,
    hold_s: float = 10.0,
    recovery_hz_s: float | None = None,
    duration: float = 30.0,
) -> Profile:
    """Frequency dip: fall at ``rocof_hz_s`` to the nadir, hold, recover."""
    fall = (f_nom - nadir_hz) / rocof_hz_s
    rec_rate = recovery_hz_s or rocof_hz_s / 4.0
    rec = (f_nom - nadir_hz) / rec_rate
    t = [0.0, t_event, t_event + fall, t_event + fall + hold_s, t_event + fall + hold_s + rec]
    v = [f_nom, f_nom, nadir_hz, nadir_hz, f_nom]
    if duration > t[-1]:
        t.append(duration)
        v.append(f_nom)
    return Profile(np.array(t), np.array(v), "frequency")
