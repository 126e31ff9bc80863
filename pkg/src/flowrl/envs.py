"""Deterministic toy environments, scripted behavior policies with
restricted action support, offline dataset generation, and bit-exact
dataset serialization.

Two tasks:
  - PointNavEnv: 2-D point mass, pos' = clip(pos + 0.1*a), reward is the
    negative Euclidean distance to a goal, optional axis-aligned walls,
    fixed episode length.
  - BanditEnv: one-step task whose optimum sits outside the behavior
    policy's action support; the gap between "best possible" and "best
    supported" reward makes lost conservatism directly measurable.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import ioutil

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"CNFD"
DATASET_VERSION = 1

# blocked coordinates land this far short of the wall plane
WALL_EPS = 1e-9

TIER_SIGMA = {"random": 0.6, "medium": 0.3, "expert": 0.05}


@dataclass(frozen=True)
class Wall:
    """Axis-aligned segment. orient "v": plane x=pos spanning y in [lo,hi];
    orient "h": plane y=pos spanning x in [lo,hi]."""

    orient: str
    pos: float
    lo: float
    hi: float

    def __post_init__(self):
        if self.orient not in ("v", "h"):
            raise ValueError(f"wall orient must be 'v' or 'h', got {self.orient!r}")
        if self.lo >= self.hi:
            raise ValueError("wall span must have lo < hi")


@dataclass(frozen=True)
class EnvState:
    pos: tuple[float, float]
    t: int

    @property
    def obs(self) -> np.ndarray:
        return np.array(self.pos, dtype=np.float64)


class PointNavEnv:
    """Point navigation in [-1,1]^2 with step size 0.1 and distance reward.

    Movement is resolved per axis against the straight-line path: a wall
    orthogonal to an axis blocks that axis's motion when the path crosses
    the wall plane inside its span, and the coordinate stops just short of
    the plane. Episodes end only via the step cap.
    """

    ds = 2
    da = 2

    def __init__(self, goal=(0.8, 0.8), walls: list[Wall] | None = None,
                 cap: int = 50, start_low=(-1.0, -1.0), start_high=(1.0, 1.0)):
        self.goal = np.array(goal, dtype=np.float64)
        self.walls = list(walls) if walls else []
        self.cap = int(cap)
        self.start_low = np.array(start_low, dtype=np.float64)
        self.start_high = np.array(start_high, dtype=np.float64)
        self.r_min = -2.0 * math.sqrt(2.0)
        self.r_max = 0.0

    def reset(self, rng: np.random.Generator) -> EnvState:
        pos = rng.uniform(self.start_low, self.start_high)
        return EnvState((float(pos[0]), float(pos[1])), 0)

    def _resolve_axis(self, pos, delta, axis: int) -> float:
        """Final coordinate on `axis` after moving along the straight path
        pos + t*delta, stopping at the nearest blocking wall plane."""
        x0 = pos[axis]
        dx = delta[axis]
        out = x0 + dx
        if dx != 0.0:
            orient = "v" if axis == 0 else "h"
            other = 1 - axis
            best_t = None
            for w in self.walls:
                if w.orient != orient:
                    continue
                t = (w.pos - x0) / dx
                if not (0.0 < t <= 1.0):
                    continue
                cross_other = pos[other] + t * delta[other]
                if w.lo <= cross_other <= w.hi and (best_t is None or t < best_t):
                    best_t = t
                    out = w.pos - WALL_EPS * math.copysign(1.0, dx)
        return float(np.clip(out, -1.0, 1.0))

    def step(self, state: EnvState, a) -> tuple[EnvState, float, bool]:
        a = np.asarray(a, dtype=np.float64)
        if np.any(np.abs(a) > 1.0):
            logger.debug("action outside [-1,1] clipped: %s", a)
            a = np.clip(a, -1.0, 1.0)
        pos = np.array(state.pos, dtype=np.float64)
        delta = 0.1 * a
        new = np.array([self._resolve_axis(pos, delta, 0),
                        self._resolve_axis(pos, delta, 1)])
        reward = -float(np.linalg.norm(new - self.goal))
        t = state.t + 1
        return EnvState((float(new[0]), float(new[1])), t), reward, t >= self.cap


def umaze_walls() -> list[Wall]:
    """A single interior barrier with a gap near the top, so the straight
    line from the left half to the default goal is blocked."""
    return [Wall("v", 0.0, -1.0, 0.4)]


class BanditEnv:
    """One-step task: fixed zero observation, reward -||a - a*||, terminal
    after the single step. The default optimum a* = (0,0) lies outside the
    ring behavior support, so the best supported reward is -0.4."""

    ds = 2
    da = 2

    def __init__(self, optimum=(0.0, 0.0)):
        self.optimum = np.array(optimum, dtype=np.float64)
        self.r_min = -2.0 * math.sqrt(2.0)
        self.r_max = 0.0
        self.cap = 1

    def reset(self, rng: np.random.Generator) -> EnvState:
        return EnvState((0.0, 0.0), 0)

    def step(self, state: EnvState, a) -> tuple[EnvState, float, bool]:
        a = np.asarray(a, dtype=np.float64)
        if np.any(np.abs(a) > 1.0):
            logger.debug("action outside [-1,1] clipped: %s", a)
            a = np.clip(a, -1.0, 1.0)
        reward = -float(np.linalg.norm(a - self.optimum))
        return EnvState((0.0, 0.0), state.t + 1), reward, True


@dataclass(frozen=True)
class SupportSpec:
    """Decidable action-support membership: either a radial ring
    lo <= ||a|| <= hi, or proximity (<= radius) to a reference point set."""

    kind: str
    lo: float = 0.0
    hi: float = 0.0
    points: np.ndarray | None = None
    radius: float = 0.0

    @staticmethod
    def ring(lo: float, hi: float) -> "SupportSpec":
        if not (0.0 <= lo < hi):
            raise ValueError("ring needs 0 <= lo < hi")
        return SupportSpec("ring", lo=lo, hi=hi)

    @staticmethod
    def near_points(points: np.ndarray, radius: float) -> "SupportSpec":
        if len(points) == 0:
            raise ValueError("point-cloud support needs at least one point")
        return SupportSpec("points", points=np.asarray(points, dtype=np.float64),
                           radius=float(radius))

    def contains(self, actions) -> np.ndarray:
        a = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        if self.kind == "ring":
            r = np.linalg.norm(a, axis=1)
            return (r >= self.lo) & (r <= self.hi)
        d, _ = cKDTree(self.points).query(a)
        return d <= self.radius


def support_violation_rate(actions, spec: SupportSpec) -> float:
    return float(1.0 - np.mean(spec.contains(actions)))


# ring geometry shared by the bandit behavior policy and its support spec
RING_LO = 0.4
RING_HI = 0.8
# reference direction of the sampled arc; the arc half-width keeps the
# behavior distribution unimodal so weighted L1 regression onto it is
# well posed, while every action still satisfies the ring bounds
RING_ANGLE = math.pi / 4.0
RING_HALF_WIDTH = math.pi / 6.0


class BehaviorPolicy:
    """Scripted data-collection policies.

    kind "waypoint": move at full speed toward the target (routing through
    waypoints if given), plus Gaussian action noise by tier: random 0.6,
    medium 0.3, expert 0.05.
    kind "ring": one-step policy emitting actions on an arc of the annulus
    RING_LO <= ||a|| <= RING_HI; never leaves the ring.
    """

    def __init__(self, kind: str, tier: str = "medium", goal=None,
                 waypoints=None, angle: float = RING_ANGLE,
                 half_width: float = RING_HALF_WIDTH):
        if kind not in ("waypoint", "ring"):
            raise ValueError(f"unknown behavior kind {kind!r}")
        if tier not in TIER_SIGMA:
            raise ValueError(
                f"unknown tier {tier!r}, expected one of {sorted(TIER_SIGMA)}"
            )
        self.kind = kind
        self.tier = tier
        self.sigma = TIER_SIGMA[tier]
        self.goal = None if goal is None else np.asarray(goal, dtype=np.float64)
        self.waypoints = ([np.asarray(w, dtype=np.float64) for w in waypoints]
                          if waypoints else [])
        self.angle = angle
        self.half_width = half_width

    def support_spec(self) -> SupportSpec:
        if self.kind != "ring":
            raise ValueError("only the ring policy declares an explicit support")
        return SupportSpec.ring(RING_LO, RING_HI)

    def _target(self, pos: np.ndarray) -> np.ndarray:
        for w in self.waypoints:
            if np.linalg.norm(pos - w) > 0.15:
                return w
        return self.goal

    def act(self, obs, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "ring":
            theta = rng.uniform(self.angle - self.half_width,
                                self.angle + self.half_width)
            r = rng.uniform(RING_LO, RING_HI)
            return np.array([r * math.cos(theta), r * math.sin(theta)])
        pos = np.asarray(obs, dtype=np.float64)
        target = self._target(pos)
        toward = np.clip((target - pos) / 0.1, -1.0, 1.0)
        return np.clip(toward + self.sigma * rng.standard_normal(2), -1.0, 1.0)


@dataclass
class OfflineDataset:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray

    def __post_init__(self):
        n = len(self.states)
        if n < 1:
            raise ValueError("dataset needs at least one transition")
        for name in ("actions", "rewards", "next_states", "terminals"):
            if len(getattr(self, name)) != n:
                raise ValueError(
                    f"column length mismatch: states has {n}, {name} has "
                    f"{len(getattr(self, name))}"
                )
        if np.any(np.abs(self.actions) > 1.0):
            raise ValueError("actions must lie within [-1,1] per coordinate")

    @property
    def n(self) -> int:
        return len(self.states)

    @property
    def ds(self) -> int:
        return self.states.shape[1]

    @property
    def da(self) -> int:
        return self.actions.shape[1]


def generate_dataset(env, behavior: BehaviorPolicy, n_transitions: int,
                     seed: int) -> OfflineDataset:
    """Roll the behavior policy, restarting episodes on termination, until
    n_transitions are recorded. Pure function of (env, behavior, seed)."""
    if n_transitions < 1:
        raise ValueError("n_transitions must be >= 1")
    rng = np.random.default_rng(seed)
    S, A, R, S2, T = [], [], [], [], []
    state = env.reset(rng)
    for _ in range(n_transitions):
        a = behavior.act(state.obs, rng)
        nxt, r, done = env.step(state, a)
        S.append(state.obs)
        A.append(a)
        R.append(r)
        S2.append(nxt.obs)
        T.append(1 if done else 0)
        state = env.reset(rng) if done else nxt
    return OfflineDataset(
        states=np.array(S), actions=np.array(A), rewards=np.array(R),
        next_states=np.array(S2), terminals=np.array(T, dtype=np.uint8),
    )


def rollout_return(env, policy_fn, episodes: int, rng: np.random.Generator):
    """Mean and per-episode returns of policy_fn(obs, rng) -> action."""
    returns = []
    for _ in range(episodes):
        state = env.reset(rng)
        total = 0.0
        done = False
        while not done:
            a = policy_fn(state.obs, rng)
            state, r, done = env.step(state, a)
            total += r
        returns.append(total)
    return float(np.mean(returns)), returns


def behavior_mean_return(env, behavior: BehaviorPolicy, episodes: int,
                         seed: int) -> float:
    rng = np.random.default_rng(seed)
    mean, _ = rollout_return(env, behavior.act, episodes, rng)
    return mean


def bandit_oracle(env: BanditEnv, spec: SupportSpec, grid_resolution: int = 400):
    """Exhaustive grid search for the best in-support single-step action."""
    if grid_resolution < 100:
        raise ValueError("grid_resolution must be >= 100")
    axis = np.linspace(-1.0, 1.0, grid_resolution)
    gx, gy = np.meshgrid(axis, axis)
    grid = np.stack([gx.ravel(), gy.ravel()], axis=1)
    mask = spec.contains(grid)
    if not np.any(mask):
        raise ValueError("no grid point lies inside the support")
    cand = grid[mask]
    rewards = -np.linalg.norm(cand - env.optimum, axis=1)
    i = int(np.argmax(rewards))
    return cand[i], float(rewards[i])


def save_dataset(ds: OfflineDataset, path: str):
    """Fixed little-endian layout: magic, version u32, ds u32, da u32,
    n u64, then states/actions/rewards/next_states as float32 row-major,
    then terminals as one byte each."""
    parts = [
        DATASET_MAGIC,
        struct.pack("<I", DATASET_VERSION),
        struct.pack("<I", ds.ds),
        struct.pack("<I", ds.da),
        struct.pack("<Q", ds.n),
        np.ascontiguousarray(ds.states, dtype="<f4").tobytes(),
        np.ascontiguousarray(ds.actions, dtype="<f4").tobytes(),
        np.ascontiguousarray(ds.rewards, dtype="<f4").tobytes(),
        np.ascontiguousarray(ds.next_states, dtype="<f4").tobytes(),
        np.ascontiguousarray(ds.terminals, dtype=np.uint8).tobytes(),
    ]
    ioutil.atomic_write_bytes(path, b"".join(parts))


def dataset_file_size(n: int, ds: int, da: int) -> int:
    return 24 + n * (4 * (2 * ds + da + 1) + 1)


def load_dataset(path: str) -> OfflineDataset:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 24:
        raise ValueError(f"file too short for a dataset header: {len(data)} bytes")
    if data[:4] != DATASET_MAGIC:
        raise ValueError(
            f"bad magic at offset 0: expected {DATASET_MAGIC!r}, found {data[:4]!r}"
        )
    version, ds_dim, da_dim = struct.unpack_from("<III", data, 4)
    if version != DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {version} at offset 4")
    (n,) = struct.unpack_from("<Q", data, 16)
    expected = dataset_file_size(n, ds_dim, da_dim)
    if len(data) != expected:
        raise ValueError(
            f"length mismatch: header implies {expected} bytes, file has {len(data)}"
        )
    ofs = 24

    def block(count, dtype, width):
        nonlocal ofs
        nbytes = count * width * np.dtype(dtype).itemsize
        arr = np.frombuffer(data, dtype=dtype, count=count * width, offset=ofs)
        ofs += nbytes
        return arr.reshape(count, width) if width > 1 else arr

    states = block(n, "<f4", ds_dim).astype(np.float64)
    actions = block(n, "<f4", da_dim).astype(np.float64)
    rewards = block(n, "<f4", 1).astype(np.float64)
    next_states = block(n, "<f4", ds_dim).astype(np.float64)
    terminals = np.frombuffer(data, dtype=np.uint8, count=n, offset=ofs).copy()
    return OfflineDataset(states, actions, rewards, next_states, terminals)


def make_env(name: str):
    if name == "point-nav":
        return PointNavEnv()
    if name == "point-nav-umaze":
        return PointNavEnv(goal=(0.8, 0.8), walls=umaze_walls(),
                           start_low=(-1.0, -1.0), start_high=(-0.2, 1.0))
    if name == "bandit":
        return BanditEnv()
    raise ValueError(
        f"unknown env {name!r}, expected point-nav, point-nav-umaze, or bandit"
    )


def make_behavior(env_name: str, tier: str, env=None) -> BehaviorPolicy:
    if env_name == "bandit":
        return BehaviorPolicy("ring", tier=tier)
    goal = env.goal if env is not None else PointNavEnv().goal
    waypoints = None
    if env_name == "point-nav-umaze":
        waypoints = [np.array([-0.3, 0.7]), np.array([0.3, 0.7])]
    return BehaviorPolicy("waypoint", tier=tier, goal=goal, waypoints=waypoints)
