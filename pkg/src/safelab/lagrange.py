"""Multiplier controllers: dual ascent, discrete PID, and adaptive PID.

All three drive the same scalar: a nonnegative Lagrange multiplier that
weights the cost critic inside the policy objective. The error signal is
the mean undiscounted episode cost of the latest rollouts minus the cost
threshold. The adaptive variant rescales its own gains each tick from a
sliding window of episode costs: proportional and integral gains grow
while the window mean violates the threshold and shrink below it, and the
derivative gain tracks the window's standard deviation. All gains are
clipped to fixed bounds after every adaptation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import math

import numpy as np

__all__ = [
    "LagrangeState",
    "DualAscentCtl",
    "PidCtl",
    "APidCtl",
    "LagrangeController",
    "error_signal",
    "dual_ascent_update",
    "pid_update",
    "apid_adapt_gains",
    "window_stats",
    "make_controller",
    "simulate_cost_plant",
    "settling_tick",
    "write_controller_trace",
]

DEFAULT_KP = 1e-4
DEFAULT_KI = 1e-5
DEFAULT_KD = 1e-5
GAIN_BOUND_SPAN = 10.0  # default clip bounds: [init / span, init * span]


@dataclass
class LagrangeState:
    lam: float = 0.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("multiplier must be nonnegative")


@dataclass
class DualAscentCtl:
    alpha: float = 1e-4

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("dual ascent rate must be positive")


@dataclass
class PidCtl:
    kp: float = DEFAULT_KP
    ki: float = DEFAULT_KI
    kd: float = DEFAULT_KD
    dt: float = 1.0
    integral: float = 0.0
    prev_error: float = 0.0


@dataclass
class APidCtl:
    pid: PidCtl = field(default_factory=PidCtl)
    kp_bounds: tuple = ()
    ki_bounds: tuple = ()
    kd_bounds: tuple = ()
    adapt_kp: float = 0.05
    adapt_ki: float = 0.05
    adapt_kd: float = 0.05
    window_size: int = 10
    eps: float = 1e-6
    window: list = field(default_factory=list)

    def __post_init__(self):
        if not self.kp_bounds:
            self.kp_bounds = (self.pid.kp / GAIN_BOUND_SPAN, self.pid.kp * GAIN_BOUND_SPAN)
        if not self.ki_bounds:
            self.ki_bounds = (self.pid.ki / GAIN_BOUND_SPAN, self.pid.ki * GAIN_BOUND_SPAN)
        if not self.kd_bounds:
            self.kd_bounds = (self.pid.kd / GAIN_BOUND_SPAN, self.pid.kd * GAIN_BOUND_SPAN)

    def push_costs(self, episode_costs) -> None:
        for c in episode_costs:
            self.window.append(float(c))
        if len(self.window) > self.window_size:
            del self.window[: len(self.window) - self.window_size]


def error_signal(episode_costs, c_th: float) -> float:
    """Mean undiscounted episode cost of the current rollouts minus the threshold."""
    costs = np.asarray(episode_costs, dtype=np.float64)
    if costs.size == 0:
        raise ValueError("need at least one episode cost")
    return float(costs.mean() - c_th)


def dual_ascent_update(state: LagrangeState, ctl: DualAscentCtl, e: float) -> LagrangeState:
    return LagrangeState(max(0.0, state.lam + ctl.alpha * e))


def pid_update(state: LagrangeState, ctl: PidCtl, e: float) -> LagrangeState:
    """Discrete PID law; mutates the controller's integral and error memory."""
    ctl.integral += e * ctl.dt
    derivative = (e - ctl.prev_error) / ctl.dt
    lam = state.lam + ctl.kp * e + ctl.ki * ctl.integral + ctl.kd * derivative
    ctl.prev_error = e
    return LagrangeState(max(0.0, lam))


def window_stats(window):
    """Sample mean and (n-1)-denominator standard deviation of the window."""
    costs = np.asarray(window, dtype=np.float64)
    if costs.size == 0:
        raise ValueError("empty cost window")
    mean = float(costs.mean())
    std = 0.0 if costs.size == 1 else float(costs.std(ddof=1))
    return mean, std


def apid_adapt_gains(ctl: APidCtl, window, c_th: float):
    """Rescale the three gains from windowed cost statistics, then clip.

    kp *= 1 + a * tanh((mean - c_th) / mean); ki *= 1 + b * (mean - c_th) / mean;
    kd *= 1 + g * std / mean, with the mean floored at eps in denominators.
    """
    mean, std = window_stats(window)
    denom = max(mean, ctl.eps)
    pid = ctl.pid
    pid.kp = float(
        np.clip(pid.kp * (1.0 + ctl.adapt_kp * math.tanh((mean - c_th) / denom)), *ctl.kp_bounds)
    )
    pid.ki = float(
        np.clip(pid.ki * (1.0 + ctl.adapt_ki * (mean - c_th) / denom), *ctl.ki_bounds)
    )
    pid.kd = float(np.clip(pid.kd * (1.0 + ctl.adapt_kd * std / denom), *ctl.kd_bounds))
    return pid.kp, pid.ki, pid.kd


class LagrangeController:
    """Uniform stepping facade over the three controller laws."""

    def __init__(self, kind: str, state: LagrangeState | None = None, ctl=None):
        if kind not in ("dual", "pid", "apid"):
            raise ValueError(f"unknown controller kind {kind!r}")
        self.kind = kind
        self.state = state if state is not None else LagrangeState(0.0)
        if ctl is None:
            ctl = {"dual": DualAscentCtl, "pid": PidCtl, "apid": APidCtl}[kind]()
        self.ctl = ctl
        self.last_error = 0.0

    @property
    def lam(self) -> float:
        return self.state.lam

    def gains(self):
        if self.kind == "dual":
            return 0.0, 0.0, 0.0
        pid = self.ctl if self.kind == "pid" else self.ctl.pid
        return pid.kp, pid.ki, pid.kd

    def update(self, episode_costs, c_th: float) -> float:
        """Consume one round of episode costs, return the new multiplier."""
        e = error_signal(episode_costs, c_th)
        self.last_error = e
        if self.kind == "dual":
            self.state = dual_ascent_update(self.state, self.ctl, e)
        elif self.kind == "pid":
            self.state = pid_update(self.state, self.ctl, e)
        else:
            self.ctl.push_costs(episode_costs)
            self.state = pid_update(self.state, self.ctl.pid, e)
            apid_adapt_gains(self.ctl, self.ctl.window, c_th)
        return self.state.lam

    def clone(self) -> "LagrangeController":
        if self.kind == "dual":
            ctl = replace(self.ctl)
        elif self.kind == "pid":
            ctl = replace(self.ctl)
        else:
            ctl = replace(self.ctl, pid=replace(self.ctl.pid), window=list(self.ctl.window))
        out = LagrangeController(self.kind, LagrangeState(self.state.lam), ctl)
        out.last_error = self.last_error
        return out


def make_controller(kind: str, **kwargs) -> LagrangeController:
    """Controller factory; kwargs go to the law-specific dataclass."""
    if kind == "dual":
        return LagrangeController(kind, ctl=DualAscentCtl(**kwargs))
    if kind == "pid":
        return LagrangeController(kind, ctl=PidCtl(**kwargs))
    if kind == "apid":
        pid_keys = {"kp", "ki", "kd", "dt"}
        pid_kwargs = {k: kwargs.pop(k) for k in list(kwargs) if k in pid_keys}
        return LagrangeController(kind, ctl=APidCtl(pid=PidCtl(**pid_kwargs), **kwargs))
    raise ValueError(f"unknown controller kind {kind!r}")


# ---------------------------------------------------------------------------
# synthetic cost plant
# ---------------------------------------------------------------------------


def simulate_cost_plant(
    controller: LagrangeController,
    c0: float,
    c_th: float,
    noise_std: float,
    ticks: int,
    seed: int,
):
    """Drive a controller against episode cost c(lam) = c0 / (1 + lam) + noise.

    Costs are floored at zero. Returns a dict of per-tick arrays:
    cost, lam, kp, ki, kd, err, cbar, sigma.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 51]))
    rows = {k: np.zeros(ticks) for k in ("cost", "lam", "kp", "ki", "kd", "err", "cbar", "sigma")}
    recent = []
    for t in range(ticks):
        cost = max(0.0, c0 / (1.0 + controller.lam) + rng.normal(0.0, noise_std))
        lam = controller.update([cost], c_th)
        kp, ki, kd = controller.gains()
        recent.append(cost)
        if len(recent) > 10:
            recent.pop(0)
        cbar, sigma = window_stats(recent)
        rows["cost"][t] = cost
        rows["lam"][t] = lam
        rows["kp"][t] = kp
        rows["ki"][t] = ki
        rows["kd"][t] = kd
        rows["err"][t] = controller.last_error
        rows["cbar"][t] = cbar
        rows["sigma"][t] = sigma
    return rows


def settling_tick(costs: np.ndarray, c_th: float, window: int = 10, tol: float = 0.1):
    """First tick whose trailing window mean lies within tol * c_th of c_th.

    Returns None if the trace never settles.
    """
    costs = np.asarray(costs, dtype=np.float64)
    for t in range(window - 1, costs.shape[0]):
        mean = costs[t - window + 1 : t + 1].mean()
        if abs(mean - c_th) <= tol * c_th:
            return t
    return None


def write_controller_trace(rows: dict, path) -> None:
    keys = ["lam", "kp", "ki", "kd", "err", "cbar", "sigma"]
    n = len(rows["lam"])
    lines = ["tick," + ",".join(keys)]
    for t in range(n):
        lines.append(str(t) + "," + ",".join(repr(float(rows[k][t])) for k in keys))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
