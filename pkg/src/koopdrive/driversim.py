"""Synthetic driver and longitudinal vehicle response to an advisory.

The driver is a PI regulator acting on a delayed speed error with additive
Gaussian command noise and a rate limit on how fast the pedal force can
change. Attention to the advisory is a time-varying compliance in [0, 1]:
the effective speed target blends the advisory with the driver's own slowly
filtered speed,

    target(t) = compliance(t) * v_ref(t) + (1 - compliance(t)) * v_hold(t)

where v_hold is an exponential moving average of the actual speed. At full
compliance the driver tracks the advisory; at zero compliance the target
collapses onto the driver's own recent speed, so the advisory is ignored and
the current speed is held. Distraction windows lower compliance and scale up
the command noise over an interval.

The plant is a point mass with a quadratic road load,

    m dv/dt = f_tr - (a0 + a1 v + a2 v^2)

integrated with an explicit Euler step at the sample period. Speed clamps at
standstill and the applied force saturates at the actuator limits. Given the
same parameters, advisory, and seed, the simulated trajectory is
reproducible bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .advisory import AdvisoryProfile, resample_to_time
from .model import Trajectory

__all__ = [
    "VehicleParams",
    "DriverParams",
    "DistractionWindow",
    "make_distracted_segment",
    "simulate_driver",
]


@dataclass(frozen=True)
class VehicleParams:
    """Point-mass longitudinal plant; values live in the run configuration."""

    mass: float
    a0: float
    a1: float
    a2: float
    f_min: float
    f_max: float

    def __post_init__(self):
        if not (math.isfinite(self.mass) and self.mass > 0):
            raise ValueError(f"mass must be positive, got {self.mass}")
        for name in ("a0", "a1", "a2"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if not self.f_min < 0 < self.f_max:
            raise ValueError(
                f"force bounds must straddle zero, got [{self.f_min}, {self.f_max}]"
            )

    def road_load(self, v: float) -> float:
        return self.a0 + self.a1 * v + self.a2 * v * v


@dataclass(frozen=True)
class DistractionWindow:
    """Interval of lowered compliance and inflated command noise."""

    t_start: float
    t_end: float
    compliance: float = 0.2
    noise_scale: float = 2.0

    def __post_init__(self):
        if not self.t_start < self.t_end:
            raise ValueError(
                f"window must have t_start < t_end, got [{self.t_start}, {self.t_end}]"
            )
        if not 0.0 <= self.compliance <= 1.0:
            raise ValueError(f"compliance must lie in [0, 1], got {self.compliance}")
        if not self.noise_scale >= 0.0:
            raise ValueError(f"noise_scale must be >= 0, got {self.noise_scale}")

    def contains(self, t: float) -> bool:
        return self.t_start <= t <= self.t_end


@dataclass(frozen=True)
class DriverParams:
    """PI driver with reaction delay; later windows override earlier ones."""

    kp: float = 700.0
    ki: float = 120.0
    reaction_delay: float = 0.4
    force_rate_limit: float = 6000.0
    noise_std: float = 120.0
    compliance: float = 1.0
    hold_tau: float = 4.0
    seed: int = 0
    windows: tuple[DistractionWindow, ...] = ()

    def __post_init__(self):
        if self.kp < 0 or self.ki < 0:
            raise ValueError("gains must be non-negative")
        if self.reaction_delay < 0:
            raise ValueError(f"reaction_delay must be >= 0, got {self.reaction_delay}")
        if not self.force_rate_limit > 0:
            raise ValueError(f"force_rate_limit must be positive, got {self.force_rate_limit}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")
        if not 0.0 <= self.compliance <= 1.0:
            raise ValueError(f"compliance must lie in [0, 1], got {self.compliance}")
        if not self.hold_tau > 0:
            raise ValueError(f"hold_tau must be positive, got {self.hold_tau}")

    def compliance_at(self, t: float) -> float:
        for w in reversed(self.windows):
            if w.contains(t):
                return w.compliance
        return self.compliance

    def noise_scale_at(self, t: float) -> float:
        for w in reversed(self.windows):
            if w.contains(t):
                return w.noise_scale
        return 1.0


def make_distracted_segment(driver: DriverParams, t_start: float, t_end: float,
                            compliance: float = 0.2,
                            noise_scale: float = 2.0) -> DriverParams:
    """Copy of the driver with one more distraction window appended.

    Calls compose: each call adds a window, and where windows overlap the
    most recently added one wins.
    """
    window = DistractionWindow(t_start=t_start, t_end=t_end,
                               compliance=compliance, noise_scale=noise_scale)
    return replace(driver, windows=driver.windows + (window,))


def _advisory_series(advisory, sample_period: float) -> np.ndarray:
    if isinstance(advisory, AdvisoryProfile):
        _, v_ref = resample_to_time(advisory, sample_period)
        return v_ref
    arr = np.asarray(advisory, dtype=float)
    if arr.ndim != 1 or len(arr) < 2:
        raise ValueError("advisory must be an AdvisoryProfile or a 1-D series of speeds")
    if not np.all(np.isfinite(arr)):
        raise ValueError("advisory speeds must be finite")
    return arr


def simulate_driver(vehicle: VehicleParams, driver: DriverParams, advisory,
                    sample_period: float = 0.025, duration: float | None = None,
                    v0: float | None = None) -> Trajectory:
    """Simulate one driver following (or ignoring) an advisory.

    advisory is either an AdvisoryProfile, resampled internally to the
    sample period, or a plain 1-D speed series already on that grid. The
    trajectory covers floor(duration / sample_period) + 1 samples; the
    advisory must span them all.
    """
    if not sample_period > 0:
        raise ValueError(f"sample_period must be positive, got {sample_period}")
    v_ref = _advisory_series(advisory, sample_period)
    if duration is None:
        n = len(v_ref)
    else:
        if duration <= 0:
            raise ValueError(f"duration must be positive, got {duration}")
        n = int(math.floor(duration / sample_period + 1e-9)) + 1
        if n > len(v_ref):
            raise ValueError(
                f"advisory covers {(len(v_ref) - 1) * sample_period:.3f} s, "
                f"shorter than the requested {duration} s"
            )
    if n < 2:
        raise ValueError("simulation needs at least 2 samples")

    dt = sample_period
    t = np.arange(n) * dt
    compliance = np.full(n, driver.compliance)
    noise_scale = np.ones(n)
    for w in driver.windows:  # later windows overwrite earlier ones
        mask = (t >= w.t_start) & (t <= w.t_end)
        compliance[mask] = w.compliance
        noise_scale[mask] = w.noise_scale

    rng = np.random.default_rng(driver.seed)
    noise = rng.standard_normal(n) * driver.noise_std * noise_scale

    delay_steps = int(round(driver.reaction_delay / dt))
    errors = np.zeros(n)

    v_arr = np.empty(n)
    f_arr = np.empty(n)
    v = float(v_ref[0]) if v0 is None else float(v0)
    if not (math.isfinite(v) and v >= 0):
        raise ValueError(f"initial speed must be finite and >= 0, got {v}")
    v_hold = v
    integ = 0.0
    f_prev = 0.0
    alpha = dt / driver.hold_tau
    kp, ki = driver.kp, driver.ki
    f_min, f_max = vehicle.f_min, vehicle.f_max
    rate = driver.force_rate_limit * dt
    inv_mass = 1.0 / vehicle.mass

    for k in range(n):
        c = compliance[k]
        target = c * v_ref[k] + (1.0 - c) * v_hold
        errors[k] = target - v
        e_d = errors[k - delay_steps] if k >= delay_steps else 0.0

        integ_new = integ + ki * e_d * dt
        raw = kp * e_d + integ_new + noise[k]
        if (raw > f_max and e_d > 0.0) or (raw < f_min and e_d < 0.0):
            raw = kp * e_d + integ + noise[k]  # hold the integrator at saturation
        else:
            integ = integ_new

        f_cmd = min(max(raw, f_prev - rate), f_prev + rate)
        f_applied = min(max(f_cmd, f_min), f_max)

        v_arr[k] = v
        f_arr[k] = f_applied
        f_prev = f_applied

        if k < n - 1:
            dv = (f_applied - vehicle.road_load(v)) * inv_mass
            v = max(v + dt * dv, 0.0)
            v_hold += alpha * (v - v_hold)

    return Trajectory(sample_period=dt, t=t, v=v_arr, f_tr=f_arr, v_ref=v_ref[:n].copy())
