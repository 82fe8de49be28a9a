"""Partially observable multi-agent environments.

Both environments are value machines: ``reset`` builds a state, ``step``
returns a *new* state and never mutates its argument.  The RNG driving
arrivals lives inside the state, so a seed plus an action sequence fixes the
whole trace.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields

import numpy as np

from . import kernels

GAS, BRAKE = 0, 1


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending field."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class TJConfig:
    grid_dim: int = 7
    n_agents: int = 5
    arrival_prob: float = 0.3
    vision: int = 1
    max_steps: int = 20
    collision_reward: float = -10.0
    delay_penalty: float = 0.01

    def validate(self) -> list[ConfigError]:
        errs = []
        if self.grid_dim < 5 or self.grid_dim % 2 == 0:
            errs.append(ConfigError("grid_dim", f"must be odd and >= 5, got {self.grid_dim}"))
        if self.n_agents < 1:
            errs.append(ConfigError("n_agents", f"must be >= 1, got {self.n_agents}"))
        if not 0.0 <= self.arrival_prob <= 1.0:
            errs.append(ConfigError("arrival_prob", f"must lie in [0, 1], got {self.arrival_prob}"))
        if self.vision < 0:
            errs.append(ConfigError("vision", f"must be >= 0, got {self.vision}"))
        if self.max_steps <= self.grid_dim:
            errs.append(ConfigError("max_steps", f"must exceed grid_dim={self.grid_dim}, got {self.max_steps}"))
        return errs


@dataclass
class Car:
    car_id: int
    route: int
    path_index: int = 0
    age: int = 0


@dataclass
class EnvState:
    tau: int
    slots: list  # Car or None per agent slot
    rng: np.random.Generator
    next_car_id: int = 0
    collisions: int = 0
    ignored_actions: int = 0

    @property
    def active(self) -> np.ndarray:
        return np.array([c is not None for c in self.slots], dtype=bool)

    def car_ids(self) -> np.ndarray:
        return np.array([-1 if c is None else c.car_id for c in self.slots], dtype=np.int64)


@dataclass
class StepResult:
    rewards: np.ndarray
    done: bool
    collisions: int
    exited: int = 0


@dataclass
class EpisodeRecord:
    """Per-step collision/failure counts of one finished episode."""

    collisions: list = field(default_factory=list)
    done: bool = True


def episode_success(record: EpisodeRecord) -> bool:
    if not record.done:
        raise ValueError("episode is not complete")
    return sum(record.collisions) == 0


class TrafficJunction:
    """Two one-way roads crossing at the grid centre.

    The horizontal road flows west to east, the vertical one north to south.
    Each entry feeds three routes: straight, turn left, turn right at the
    junction.  Agent slots are reused after a car leaves the grid.
    """

    n_actions = 2

    def __init__(self, config: TJConfig | None = None):
        self.config = config or TJConfig()
        errs = self.config.validate()
        if errs:
            raise errs[0]
        d = self.config.grid_dim
        mid = d // 2
        self.road = np.zeros((d, d))
        self.road[mid, :] = 1.0
        self.road[:, mid] = 1.0
        west = [(mid, c) for c in range(mid + 1)]
        north = [(r, mid) for r in range(mid + 1)]
        self.routes = [
            west + [(mid, c) for c in range(mid + 1, d)],
            west + [(r, mid) for r in range(mid + 1, d)],
            west + [(r, mid) for r in range(mid - 1, -1, -1)],
            north + [(r, mid) for r in range(mid + 1, d)],
            north + [(mid, c) for c in range(mid + 1, d)],
            north + [(mid, c) for c in range(mid - 1, -1, -1)],
        ]
        self.entries = [(0, (0, 1, 2)), (1, (3, 4, 5))]
        self.entry_cells = [self.routes[rs[0]][0] for _, rs in self.entries]
        self.n_agents = self.config.n_agents
        self.obs_dim = (2 * self.config.vision + 1) ** 2 * 3 + d * d + len(self.routes) + 1

    # -- helpers --------------------------------------------------------

    def position(self, car: Car) -> tuple[int, int]:
        return self.routes[car.route][car.path_index]

    def occupancy(self, state: EnvState) -> dict:
        occ: dict = {}
        for slot, car in enumerate(state.slots):
            if car is not None:
                occ.setdefault(self.position(car), []).append(slot)
        return occ

    def _counts(self, state: EnvState) -> np.ndarray:
        d = self.config.grid_dim
        counts = np.zeros((d, d), dtype=np.int64)
        for car in state.slots:
            if car is not None:
                counts[self.position(car)] += 1
        return counts

    def _arrivals(self, state: EnvState) -> None:
        p = self.config.arrival_prob
        occupied = self.occupancy(state)
        for (_, routes), cell in zip(self.entries, self.entry_cells):
            # draws happen unconditionally so the RNG stream is action-independent
            arrive = state.rng.random() < p
            route = routes[int(state.rng.integers(len(routes)))]
            if not arrive or cell in occupied:
                continue
            free = [i for i, c in enumerate(state.slots) if c is None]
            if not free:
                continue
            state.slots[free[0]] = Car(state.next_car_id, route)
            state.next_car_id += 1
            occupied[cell] = [free[0]]

    def observe(self, state: EnvState) -> np.ndarray:
        n = self.n_agents
        pos = np.zeros((n, 2), dtype=np.int64)
        route = np.zeros(n, dtype=np.int64)
        for i, car in enumerate(state.slots):
            if car is not None:
                pos[i] = self.position(car)
                route[i] = car.route
        return kernels.tj_observe(
            self._counts(state), self.road, pos, route, state.active, self.config.vision, len(self.routes)
        )

    # -- interface ------------------------------------------------------

    def reset(self, seed) -> tuple[EnvState, np.ndarray]:
        state = EnvState(tau=0, slots=[None] * self.n_agents, rng=np.random.default_rng(seed))
        self._arrivals(state)
        return state, self.observe(state)

    def step(self, state: EnvState, actions) -> tuple[EnvState, np.ndarray, StepResult]:
        cfg = self.config
        s = copy.deepcopy(state)
        rewards = np.zeros(self.n_agents)
        exited = 0
        for i, car in enumerate(s.slots):
            a = actions[i]
            if car is None:
                if a is not None and a >= 0:
                    s.ignored_actions += 1
                continue
            if a == GAS:
                if car.path_index == len(self.routes[car.route]) - 1:
                    s.slots[i] = None
                    exited += 1
                    continue
                car.path_index += 1
        s.tau += 1
        for i, car in enumerate(s.slots):
            if car is not None:
                car.age += 1
                rewards[i] -= cfg.delay_penalty * car.age
        collisions = 0
        for cell_slots in self.occupancy(s).values():
            if len(cell_slots) > 1:
                collisions += 1
                for i in cell_slots:
                    rewards[i] += cfg.collision_reward
        s.collisions += collisions
        done = s.tau >= cfg.max_steps
        if not done:
            self._arrivals(s)
        return s, self.observe(s), StepResult(rewards, done, collisions, exited)

    def check_consistency(self, state: EnvState) -> None:
        occ = self.occupancy(state)
        listed = sorted(i for slots in occ.values() for i in slots)
        alive = [i for i, c in enumerate(state.slots) if c is not None]
        assert listed == alive
        for car in state.slots:
            if car is not None:
                assert 0 <= car.path_index < len(self.routes[car.route])


@dataclass(frozen=True)
class ToyConfig:
    n_agents: int = 3
    n_digits: int = 10

    def validate(self) -> list[ConfigError]:
        errs = []
        if self.n_agents < 1:
            errs.append(ConfigError("n_agents", f"must be >= 1, got {self.n_agents}"))
        if self.n_digits < 2:
            errs.append(ConfigError("n_digits", f"must be >= 2, got {self.n_digits}"))
        return errs


@dataclass
class ToyState:
    tau: int
    digits: np.ndarray
    collisions: int = 0

    @property
    def active(self) -> np.ndarray:
        return np.ones(len(self.digits), dtype=bool)

    def car_ids(self) -> np.ndarray:
        return np.arange(len(self.digits), dtype=np.int64)


class ToySumEnv:
    """One-step game: agent i sees digit d_i and must announce (sum d) mod n_digits.

    Each wrong answer counts as one failure event (``collisions``), so the
    shared success predicate applies unchanged.
    """

    max_steps = 1

    def __init__(self, config: ToyConfig | None = None):
        self.config = config or ToyConfig()
        errs = self.config.validate()
        if errs:
            raise errs[0]
        self.n_agents = self.config.n_agents
        self.n_actions = self.config.n_digits
        self.obs_dim = self.config.n_digits

    def observe(self, state: ToyState) -> np.ndarray:
        obs = np.zeros((self.n_agents, self.obs_dim))
        if state.tau == 0:
            obs[np.arange(self.n_agents), state.digits] = 1.0
        return obs

    def reset(self, seed, digits=None) -> tuple[ToyState, np.ndarray]:
        if digits is None:
            digits = np.random.default_rng(seed).integers(self.config.n_digits, size=self.n_agents)
        state = ToyState(0, np.asarray(digits, dtype=np.int64))
        return state, self.observe(state)

    def target(self, state: ToyState) -> int:
        return int(state.digits.sum() % self.config.n_digits)

    def step(self, state: ToyState, actions) -> tuple[ToyState, np.ndarray, StepResult]:
        correct = np.asarray(actions) == self.target(state)
        wrong = int((~correct).sum())
        s = ToyState(state.tau + 1, state.digits.copy(), state.collisions + wrong)
        return s, self.observe(s), StepResult(correct.astype(float), True, wrong)


def make_env(kind: str, params: dict | None = None):
    params = dict(params or {})
    if kind == "traffic_junction":
        allowed = {f.name for f in fields(TJConfig)}
        cls, env_cls = TJConfig, TrafficJunction
    elif kind == "toy_sum":
        allowed = {f.name for f in fields(ToyConfig)}
        cls, env_cls = ToyConfig, ToySumEnv
    else:
        raise ConfigError("environment.kind", f"unknown environment {kind!r}")
    unknown = set(params) - allowed
    if unknown:
        raise ConfigError(f"environment.{sorted(unknown)[0]}", "unknown key")
    return env_cls(cls(**params))
