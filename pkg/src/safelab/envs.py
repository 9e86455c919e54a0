"""Constrained-MDP core: env interface, trajectories, and two built-in tasks.

GridCircleWorld is a small discrete grid whose dynamics are exactly
exportable as a tabular model, so every estimate produced elsewhere in the
package can be checked against a closed-form answer. PointCircle is its
continuous sibling: a 2-D point mass rewarded for circulating a reference
circle, with a unit cost outside a radial safe band.

Determinism contract: reset with a fixed seed plus a fixed action sequence
reproduces observations, rewards and costs bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Union

import numpy as np

from .oracle import TabularCmdp


class ActionBoundsError(ValueError):
    """Action outside the declared action space."""


class ProtocolError(RuntimeError):
    """Step before reset, or step after the episode ended."""


class UnsupportedOperationError(RuntimeError):
    """Operation not available for this environment type."""


@dataclass(frozen=True)
class DiscreteSpace:
    n: int

    def contains(self, a) -> bool:
        return isinstance(a, (int, np.integer)) and 0 <= int(a) < self.n


@dataclass(frozen=True)
class BoxSpace:
    dim: int
    low: float = -1.0
    high: float = 1.0

    def contains(self, a) -> bool:
        a = np.asarray(a)
        return a.shape == (self.dim,) and bool(
            np.all(a >= self.low - 1e-9) and np.all(a <= self.high + 1e-9)
        )


@dataclass(frozen=True)
class EnvSpec:
    """Static description of one environment."""

    name: str
    obs_dim: int
    action_space: Union[DiscreteSpace, BoxSpace]
    discount: float
    cost_threshold: float
    episode_length: int
    reward_bound: float
    cost_bound: float
    init_dist: str

    def __post_init__(self):
        if not 0.0 <= self.discount <= 1.0:
            raise ValueError("discount must lie in [0, 1]")
        if self.episode_length < 1:
            raise ValueError("episode_length must be at least 1")
        if self.cost_threshold < 0:
            raise ValueError("cost_threshold must be nonnegative")


@dataclass
class Transition:
    s: np.ndarray
    a: object
    r: float
    c: float
    s_next: np.ndarray
    done: bool


@dataclass
class Trajectory:
    transitions: List[Transition]
    seed: int

    def __len__(self) -> int:
        return len(self.transitions)

    def rewards(self) -> np.ndarray:
        return np.array([t.r for t in self.transitions])

    def costs(self) -> np.ndarray:
        return np.array([t.c for t in self.transitions])


class Environment:
    """Single-owner mutable environment; subclasses fill in the dynamics."""

    spec: EnvSpec

    def reset(self, seed: int) -> np.ndarray:
        raise NotImplementedError

    def step(self, a):
        raise NotImplementedError

    def inject_state(self, state, seed: int) -> np.ndarray:
        """Reset directly to an internal state (used by Monte-Carlo probes)."""
        raise UnsupportedOperationError(f"{type(self).__name__} cannot inject states")

    def state_from_observation(self, obs: np.ndarray):
        raise UnsupportedOperationError(f"{type(self).__name__} cannot invert observations")

    def random_state(self, rng: np.random.Generator):
        """A state drawn uniformly from the state space (probe support)."""
        raise UnsupportedOperationError(f"{type(self).__name__} cannot sample states")

    def _require_live(self):
        if getattr(self, "_t", None) is None:
            raise ProtocolError("step() called before reset()")
        if self._done:
            raise ProtocolError("step() called after the episode ended")

    def _check_action(self, a):
        if not self.spec.action_space.contains(a):
            raise ActionBoundsError(f"action {a!r} outside {self.spec.action_space}")


# ---------------------------------------------------------------------------
# GridCircleWorld
# ---------------------------------------------------------------------------

# actions: 0 up (y-1), 1 right (x+1), 2 down (y+1), 3 left (x-1)
GRID_DIRS = ((0, -1), (1, 0), (0, 1), (-1, 0))


class GridCircleWorld(Environment):
    """n x n grid; reward for circulating a ring of cells, cost on boundary cells.

    The agent is rewarded 1 for taking, on a ring cell, the action that
    follows the ring counter-clockwise. Every step that lands on a boundary
    cell costs 1. With probability ``slip`` the chosen action is replaced by
    a uniformly random one, which makes the transition tensor genuinely
    stochastic while rewards stay a deterministic function of (s, a).

    For n == 3 the ring coincides with the boundary, producing the smallest
    instance where reward and cost are directly at odds; useful for
    exhaustive policy enumeration.
    """

    def __init__(
        self,
        n: int = 7,
        slip: float = 0.1,
        discount: float = 0.9,
        episode_length: int = 50,
        cost_threshold: float = 5.0,
    ):
        if n < 3 or n % 2 == 0:
            raise ValueError("grid size must be an odd integer >= 3")
        if not 0.0 <= slip <= 1.0:
            raise ValueError("slip must lie in [0, 1]")
        self.n = n
        self.slip = slip
        center = n // 2
        self.center = center
        self.ring_radius = max(1, n // 2 - 1)

        cells = [(x, y) for y in range(n) for x in range(n)]
        self.boundary = np.array(
            [x in (0, n - 1) or y in (0, n - 1) for (x, y) in cells]
        )
        ring_cells = [
            (x, y)
            for (x, y) in cells
            if max(abs(x - center), abs(y - center)) == self.ring_radius
        ]
        # counter-clockwise order (y axis pointing up)
        ring_cells.sort(key=lambda xy: np.arctan2(-(xy[1] - center), xy[0] - center))
        self.ring_order = [self._cell_index(x, y) for (x, y) in ring_cells]
        self.ccw_action = {}
        for i, cell in enumerate(self.ring_order):
            nxt = self.ring_order[(i + 1) % len(self.ring_order)]
            dx = nxt % n - cell % n
            dy = nxt // n - cell // n
            self.ccw_action[cell] = GRID_DIRS.index((dx, dy))
        self.start_cell = self._cell_index(center + self.ring_radius, center)

        self.spec = EnvSpec(
            name="grid_circle",
            obs_dim=n * n,
            action_space=DiscreteSpace(4),
            discount=discount,
            cost_threshold=cost_threshold,
            episode_length=episode_length,
            reward_bound=1.0,
            cost_bound=1.0,
            init_dist="fixed-start-cell",
        )
        self._t = None
        self._done = False
        self._cell = None
        self._rng = None

    def _cell_index(self, x: int, y: int) -> int:
        return y * self.n + x

    def _move(self, cell: int, action: int) -> int:
        x, y = cell % self.n, cell // self.n
        dx, dy = GRID_DIRS[action]
        nx = min(max(x + dx, 0), self.n - 1)
        ny = min(max(y + dy, 0), self.n - 1)
        return self._cell_index(nx, ny)

    def _reward(self, cell: int, action: int) -> float:
        return 1.0 if self.ccw_action.get(cell) == action else 0.0

    def observation(self, cell: int) -> np.ndarray:
        obs = np.zeros(self.n * self.n)
        obs[cell] = 1.0
        return obs

    def reset(self, seed: int) -> np.ndarray:
        self._rng = np.random.default_rng(seed)
        self._cell = self.start_cell
        self._t = 0
        self._done = False
        return self.observation(self._cell)

    def inject_state(self, state: int, seed: int) -> np.ndarray:
        if not 0 <= int(state) < self.n * self.n:
            raise ValueError(f"cell index {state} out of range")
        self.reset(seed)
        self._cell = int(state)
        return self.observation(self._cell)

    def state_from_observation(self, obs: np.ndarray) -> int:
        return int(np.argmax(obs))

    def random_state(self, rng: np.random.Generator) -> int:
        return int(rng.integers(self.n * self.n))

    def step(self, a):
        self._require_live()
        self._check_action(a)
        a = int(a)
        actual = a
        if self.slip > 0 and self._rng.random() < self.slip:
            actual = int(self._rng.integers(4))
        nxt = self._move(self._cell, actual)
        r = self._reward(self._cell, a)
        c = 1.0 if self.boundary[nxt] else 0.0
        self._cell = nxt
        self._t += 1
        self._done = self._t >= self.spec.episode_length
        return self.observation(nxt), r, c, self._done

    def to_tabular(self) -> TabularCmdp:
        """Exact tensor model of the step dynamics."""
        n_states, n_actions = self.n * self.n, 4
        p = np.zeros((n_states, n_actions, n_states))
        r = np.zeros((n_states, n_actions))
        for s in range(n_states):
            slip_targets = [self._move(s, d) for d in range(n_actions)]
            for a in range(n_actions):
                p[s, a, self._move(s, a)] += 1.0 - self.slip
                for tgt in slip_targets:
                    p[s, a, tgt] += self.slip / 4.0
                r[s, a] = self._reward(s, a)
        c = p @ self.boundary.astype(np.float64)
        eta = np.zeros(n_states)
        eta[self.start_cell] = 1.0
        return TabularCmdp(
            transitions=p,
            rewards=r,
            costs=c,
            discount=self.spec.discount,
            cost_threshold=self.spec.cost_threshold,
            initial_dist=eta,
        )


# ---------------------------------------------------------------------------
# PointCircle
# ---------------------------------------------------------------------------


class PointCircle(Environment):
    """Continuous 2-D point mass rewarded for counter-clockwise circulation.

    Velocity actions in [-1, 1]^2 displace the point by dt * a inside a
    bounding box. Reward is the positive angular progress per step, capped
    at ``dtheta_cap`` and scaled by the reference radius; spinning tightly
    near the origin therefore pays more per step than honest circulation,
    but leaves the safe band | ||pos|| - rho | <= band and costs 1 per step.
    """

    def __init__(
        self,
        rho: float = 1.0,
        band: float = 0.2,
        dt: float = 0.1,
        dtheta_cap: float = 0.3,
        box: float = 1.6,
        discount: float = 0.99,
        episode_length: int = 200,
        cost_threshold: float = 20.0,
    ):
        self.rho = rho
        self.band = band
        self.dt = dt
        self.dtheta_cap = dtheta_cap
        self.box = box
        self.spec = EnvSpec(
            name="point_circle",
            obs_dim=2,
            action_space=BoxSpace(2, -1.0, 1.0),
            discount=discount,
            cost_threshold=cost_threshold,
            episode_length=episode_length,
            reward_bound=dtheta_cap * rho,
            cost_bound=1.0,
            init_dist="uniform-circle-angle",
        )
        self._t = None
        self._done = False
        self._pos = None
        self._rng = None

    def reset(self, seed: int) -> np.ndarray:
        self._rng = np.random.default_rng(seed)
        phi = self._rng.uniform(0.0, 2.0 * np.pi)
        self._pos = self.rho * np.array([np.cos(phi), np.sin(phi)])
        self._t = 0
        self._done = False
        return self._pos.copy()

    def inject_state(self, state: np.ndarray, seed: int) -> np.ndarray:
        state = np.asarray(state, dtype=np.float64)
        if state.shape != (2,):
            raise ValueError("state must be a 2-vector position")
        if np.abs(state).max() > self.box + 1e-9:
            raise ValueError("state outside the position box")
        self.reset(seed)
        self._pos = state.copy()
        return self._pos.copy()

    def state_from_observation(self, obs: np.ndarray) -> np.ndarray:
        return np.asarray(obs, dtype=np.float64).copy()

    def random_state(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-self.box, self.box, size=2)

    def step(self, a):
        self._require_live()
        a = np.asarray(a, dtype=np.float64)
        self._check_action(a)
        new_pos = np.clip(self._pos + self.dt * a, -self.box, self.box)
        theta_old = np.arctan2(self._pos[1], self._pos[0])
        theta_new = np.arctan2(new_pos[1], new_pos[0])
        dtheta = (theta_new - theta_old + np.pi) % (2.0 * np.pi) - np.pi
        r = float(np.clip(dtheta, 0.0, self.dtheta_cap) * self.rho)
        radius = float(np.linalg.norm(new_pos))
        c = 1.0 if abs(radius - self.rho) > self.band else 0.0
        self._pos = new_pos
        self._t += 1
        self._done = self._t >= self.spec.episode_length
        return self._pos.copy(), r, c, self._done


def to_tabular(env: Environment) -> TabularCmdp:
    """Exact tensor model of a discrete built-in environment."""
    if isinstance(env, GridCircleWorld):
        return env.to_tabular()
    raise UnsupportedOperationError(
        f"{type(env).__name__} has no exact tabular representation"
    )


# ---------------------------------------------------------------------------
# rollouts and returns
# ---------------------------------------------------------------------------


def rollout(policy, env: Environment, seed: int) -> Trajectory:
    """One full episode; the policy draws from its own seeded stream."""
    obs = env.reset(seed)
    policy_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    transitions = []
    done = False
    while not done:
        a = policy.act(obs, policy_rng)
        obs_next, r, c, done = env.step(a)
        transitions.append(Transition(obs, a, r, c, obs_next, done))
        obs = obs_next
    return Trajectory(transitions, seed)


def discounted_return(traj: Trajectory, gamma: float, channel: str = "reward") -> float:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    if channel == "reward":
        xs = traj.rewards()
    elif channel == "cost":
        xs = traj.costs()
    else:
        raise ValueError(f"unknown channel {channel!r}")
    if len(xs) == 0:
        return 0.0
    return float(xs @ np.power(gamma, np.arange(len(xs))))


def write_trajectory_csv(traj: Trajectory, path) -> None:
    """CSV export with header step,s...,a...,r,c,done."""
    if not traj.transitions:
        raise ValueError("cannot export an empty trajectory")
    first = traj.transitions[0]
    obs_dim = len(first.s)
    a0 = np.atleast_1d(np.asarray(first.a))
    act_cols = ["a"] if a0.shape == (1,) and np.issubdtype(a0.dtype, np.integer) else [
        f"a{i}" for i in range(a0.shape[0])
    ]
    header = (
        ["step"] + [f"s{i}" for i in range(obs_dim)] + act_cols + ["r", "c", "done"]
    )
    lines = [",".join(header)]
    for t, tr in enumerate(traj.transitions):
        avals = np.atleast_1d(np.asarray(tr.a, dtype=np.float64))
        if len(act_cols) == 1 and isinstance(tr.a, (int, np.integer)):
            astr = [str(int(tr.a))]
        else:
            astr = [repr(float(v)) for v in avals]
        row = (
            [str(t)]
            + [repr(float(v)) for v in tr.s]
            + astr
            + [repr(float(tr.r)), repr(float(tr.c)), str(int(tr.done))]
        )
        lines.append(",".join(row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# behavior policies for data collection
# ---------------------------------------------------------------------------


class RandomPolicy:
    """Uniform over the action space."""

    def __init__(self, space):
        self.space = space

    def act(self, obs, rng: np.random.Generator):
        if isinstance(self.space, DiscreteSpace):
            return int(rng.integers(self.space.n))
        return rng.uniform(self.space.low, self.space.high, size=self.space.dim)

    def act_det(self, obs):
        if isinstance(self.space, DiscreteSpace):
            return 0
        return np.zeros(self.space.dim)


class GridRingPolicy:
    """Scripted near-optimal behavior: reach the ring, then circulate it."""

    def __init__(self, env: GridCircleWorld, noise: float = 0.0):
        self.env = env
        self.noise = noise
        self._plan = self._build_plan()

    def _build_plan(self):
        env = self.env
        plan = np.zeros(env.n * env.n, dtype=np.intp)
        for cell in range(env.n * env.n):
            if cell in env.ccw_action:
                plan[cell] = env.ccw_action[cell]
                continue
            x, y = cell % env.n, cell // env.n
            dx = np.sign(env.center - x)
            dy = np.sign(env.center - y)
            radius = max(abs(x - env.center), abs(y - env.center))
            if radius < env.ring_radius:
                dx, dy = -dx, -dy  # inside the ring: move outward
            if dx != 0:
                plan[cell] = GRID_DIRS.index((dx, 0))
            else:
                plan[cell] = GRID_DIRS.index((0, dy if dy != 0 else 1))
        return plan

    def act(self, obs, rng: np.random.Generator):
        if self.noise > 0 and rng.random() < self.noise:
            return int(rng.integers(4))
        return int(self._plan[int(np.argmax(obs))])

    def act_det(self, obs):
        return int(self._plan[int(np.argmax(obs))])


class CircleTrackPolicy:
    """Scripted near-optimal behavior for PointCircle: track the safe circle."""

    def __init__(self, env: PointCircle, radial_gain: float = 4.0, noise: float = 0.0):
        self.rho = env.rho
        self.radial_gain = radial_gain
        self.noise = noise

    def _mean_action(self, obs):
        x, y = obs
        radius = max(float(np.hypot(x, y)), 1e-8)
        tangent = np.array([-y, x]) / radius
        radial = np.array([x, y]) / radius
        a = tangent + self.radial_gain * (self.rho - radius) * radial
        return np.clip(a, -1.0, 1.0)

    def act(self, obs, rng: np.random.Generator):
        a = self._mean_action(obs)
        if self.noise > 0:
            a = np.clip(a + rng.normal(0.0, self.noise, size=2), -1.0, 1.0)
        return a

    def act_det(self, obs):
        return self._mean_action(obs)
