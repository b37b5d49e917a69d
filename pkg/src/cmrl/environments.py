"""Deterministic seeded test environments with brute-force-solvable optima.

Bundled tasks: T-maze and delayed-recall (partially observable, cue must be
remembered), a two-room world contrasting a regular pattern with pure noise
(for curiosity experiments), a 4-state oracle MDP with known tables, a
2-state toggle task, and a constant-signal emitter. Observations are real
vectors in [-1, 1]; reward lives only in the reward vector.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .errors import ContractViolation, DimensionMismatch

Params = tuple[tuple[str, float], ...]


@dataclass(frozen=True)
class EnvSpec:
    name: str
    m: int
    n: int
    o: int
    max_steps: int
    seed: int
    params: Params = ()

    def param(self, key: str, default: float | None = None) -> float:
        for k, v in self.params:
            if k == key:
                return v
        if default is None:
            raise KeyError(key)
        return default


@dataclass(frozen=True)
class EnvState:
    latent: tuple
    t: int  # index of the current observation, 1-based
    done: bool
    trial_seed: int


def decode_action(out_vec: np.ndarray, o: int) -> int:
    out_vec = np.asarray(out_vec, dtype=np.float64)
    if out_vec.shape != (o,):
        raise DimensionMismatch(f"action vector length {out_vec.shape} != o={o}")
    return int(np.argmax(out_vec))  # lowest index wins ties


def one_hot(a: int, o: int) -> np.ndarray:
    v = np.zeros(o)
    v[a] = 1.0
    return v


class Environment:
    """Pure-transition environment: step() never mutates its argument."""

    spec: EnvSpec
    discount: float = 1.0

    def __init__(self, spec: EnvSpec):
        self.spec = spec

    def reset(self, trial_seed: int) -> tuple[EnvState, np.ndarray, np.ndarray]:
        state = self._initial(trial_seed)
        return state, self._observe(state), np.zeros(self.spec.n)

    def step(
        self, state: EnvState, out_vec: np.ndarray
    ) -> tuple[EnvState, np.ndarray, np.ndarray, bool]:
        if state.done:
            raise ContractViolation("step after done; reset the environment first")
        a = decode_action(out_vec, self.spec.o)
        nxt, reward = self._transition(state, a)
        truncated = nxt.t > self.spec.max_steps
        nxt = replace(nxt, done=nxt.done or truncated)
        return nxt, self._observe(nxt), reward, nxt.done

    def latent_key(self, state: EnvState):
        return state.latent

    def eval_seeds(self) -> list[int]:
        return [0]

    # subclass hooks
    def _initial(self, trial_seed: int) -> EnvState:
        raise NotImplementedError

    def _observe(self, state: EnvState) -> np.ndarray:
        raise NotImplementedError

    def _transition(self, state: EnvState, a: int) -> tuple[EnvState, np.ndarray]:
        raise NotImplementedError

    def _reward(self, value: float) -> np.ndarray:
        r = np.zeros(self.spec.n)
        r[0] = value
        return r


def _trial_rng_value(spec_seed: int, trial_seed: int, key: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([spec_seed & 0xFFFFFFFF, trial_seed & 0xFFFFFFFFFFFF, key]))
    )


class TMazeEnv(Environment):
    """Corridor of length L ending in a junction. The cue (±1) is visible only
    at the start cell; turning toward the cued arm pays +1, away pays -1."""

    def __init__(self, spec: EnvSpec):
        super().__init__(spec)
        self.length = int(spec.param("corridor_length", 3))

    def _initial(self, trial_seed: int) -> EnvState:
        rng = _trial_rng_value(self.spec.seed, trial_seed, 0)
        cue = 1 if rng.random() < 0.5 else -1
        return EnvState(latent=(cue, 0), t=1, done=False, trial_seed=trial_seed)

    def _observe(self, state: EnvState) -> np.ndarray:
        cue, pos = state.latent
        if state.t == 1:
            return np.array([float(cue), 1.0, 0.0])
        if pos < self.length:
            return np.array([0.0, 1.0, 0.0])
        return np.array([0.0, 0.0, 1.0])

    def _transition(self, state: EnvState, a: int) -> tuple[EnvState, np.ndarray]:
        cue, pos = state.latent
        done = False
        reward = 0.0
        if pos < self.length:
            if a == 0:
                pos += 1
        else:  # junction: 1 = left arm, 2 = right arm
            if a == 1:
                reward, done = (1.0 if cue > 0 else -1.0), True
            elif a == 2:
                reward, done = (1.0 if cue < 0 else -1.0), True
        nxt = EnvState((cue, pos), state.t + 1, done, state.trial_seed)
        return nxt, self._reward(reward)

    def eval_seeds(self) -> list[int]:
        return list(range(8))


class DelayedRecallEnv(Environment):
    """A bit shown at t=1 must be answered when the prompt flag rises at
    t=delay+1; the matching action pays +1, the other -1."""

    def __init__(self, spec: EnvSpec):
        super().__init__(spec)
        self.delay = int(spec.param("delay", 5))

    def _initial(self, trial_seed: int) -> EnvState:
        rng = _trial_rng_value(self.spec.seed, trial_seed, 0)
        bit = 1 if rng.random() < 0.5 else -1
        return EnvState(latent=(bit,), t=1, done=False, trial_seed=trial_seed)

    def _observe(self, state: EnvState) -> np.ndarray:
        (bit,) = state.latent
        if state.t == 1:
            return np.array([float(bit), 0.0])
        if state.t == self.delay + 1 and not state.done:
            return np.array([0.0, 1.0])
        return np.array([0.0, 0.0])

    def _transition(self, state: EnvState, a: int) -> tuple[EnvState, np.ndarray]:
        (bit,) = state.latent
        reward, done = 0.0, False
        if state.t == self.delay + 1:
            answered_plus = a == 0
            reward = 1.0 if answered_plus == (bit > 0) else -1.0
            done = True
        return EnvState((bit,), state.t + 1, done, state.trial_seed), self._reward(reward)

    def eval_seeds(self) -> list[int]:
        return list(range(8))


_TWO_ROOM_PATTERN = {0: (0.8, -0.4), 1: (-0.8, 0.4)}
_LOC_J, _LOC_R, _LOC_N = 0, 1, 2
_NOISE_SCALE = 32767  # 16-bit observation resolution


class TwoRoomEnv(Environment):
    """Junction cell between a regular room R (pattern channels follow a
    deterministic period-2 sequence) and a noise room N (fresh i.i.d. uniform
    values each step). Small negative step cost, no terminal reward. The
    optional goal_room parameter (1=R, 2=N) adds a per-step bonus for being
    in that room, for navigation curricula."""

    STEP_COST = -0.01
    GOAL_BONUS = 0.1

    def __init__(self, spec: EnvSpec):
        super().__init__(spec)
        self.goal_room = int(spec.param("goal_room", 0))

    def _initial(self, trial_seed: int) -> EnvState:
        return EnvState(latent=(_LOC_J,), t=1, done=False, trial_seed=trial_seed)

    def _pattern(self, loc: int, t: int, trial_seed: int) -> tuple[float, float]:
        if loc == _LOC_R:
            return _TWO_ROOM_PATTERN[t % 2]
        if loc == _LOC_N:
            rng = _trial_rng_value(self.spec.seed, trial_seed, t)
            raw = rng.uniform(-1.0, 1.0, 2)
            q = np.round(raw * _NOISE_SCALE) / _NOISE_SCALE
            return float(q[0]), float(q[1])
        return 0.0, 0.0

    def _observe(self, state: EnvState) -> np.ndarray:
        (loc,) = state.latent
        obs = np.zeros(5)
        obs[loc] = 1.0
        obs[3], obs[4] = self._pattern(loc, state.t, state.trial_seed)
        return obs

    def _transition(self, state: EnvState, a: int) -> tuple[EnvState, np.ndarray]:
        (loc,) = state.latent
        if a == 0:  # toward the regular room
            loc = _LOC_R if loc in (_LOC_J, _LOC_R) else _LOC_J
        elif a == 1:  # toward the noise room
            loc = _LOC_N if loc in (_LOC_J, _LOC_N) else _LOC_J
        nxt = EnvState((loc,), state.t + 1, False, state.trial_seed)
        reward = self.STEP_COST
        if self.goal_room in (_LOC_R, _LOC_N) and loc == self.goal_room:
            reward += self.GOAL_BONUS
        return nxt, self._reward(reward)

    def latent_key(self, state: EnvState):
        return (state.latent, state.t % 2)


# 4-state, 2-action deterministic chain: action 0 moves left, 1 moves right.
# Staying left at state 0 pays 0.8, staying right at state 3 pays 1.0.
MDP_N_STATES = 4
MDP_P = np.array([[0, 1], [0, 2], [1, 3], [2, 3]])  # P[s][a] -> s'
MDP_R = np.array([[0.8, 0.0], [0.0, 0.0], [0.0, 0.0], [0.0, 1.0]])


def value_iteration(
    P: np.ndarray, R: np.ndarray, gamma: float, tol: float = 1e-10
) -> tuple[np.ndarray, np.ndarray]:
    """Infinite-horizon optimal values and greedy policy (lowest-index ties)."""
    V = np.zeros(len(P))
    while True:
        Q = R + gamma * V[P]
        V2 = Q.max(axis=1)
        if np.max(np.abs(V2 - V)) < tol:
            break
        V = V2
    Q = R + gamma * V2[P]
    return V2, Q.argmax(axis=1)


class OracleMdpEnv(Environment):
    """Fully observable 4-state chain with known tables; start state 0."""

    def __init__(self, spec: EnvSpec):
        super().__init__(spec)
        self.discount = float(spec.param("gamma", 0.9))

    def _initial(self, trial_seed: int) -> EnvState:
        return EnvState(latent=(0,), t=1, done=False, trial_seed=trial_seed)

    def _observe(self, state: EnvState) -> np.ndarray:
        obs = np.zeros(MDP_N_STATES)
        obs[state.latent[0]] = 1.0
        return obs

    def _transition(self, state: EnvState, a: int) -> tuple[EnvState, np.ndarray]:
        (s,) = state.latent
        nxt = EnvState((int(MDP_P[s][a]),), state.t + 1, False, state.trial_seed)
        return nxt, self._reward(float(MDP_R[s][a]))


class ToggleEnv(Environment):
    """Hidden bit starts at 0 and flips every step; matching it with the
    action pays +1, mismatching -1. The observation never reveals it."""

    def _initial(self, trial_seed: int) -> EnvState:
        return EnvState(latent=(0,), t=1, done=False, trial_seed=trial_seed)

    def _observe(self, state: EnvState) -> np.ndarray:
        return np.zeros(1)

    def _transition(self, state: EnvState, a: int) -> tuple[EnvState, np.ndarray]:
        (z,) = state.latent
        reward = 1.0 if a == z else -1.0
        return EnvState((1 - z,), state.t + 1, False, state.trial_seed), self._reward(reward)


class ConstantEnv(Environment):
    """Emits a constant observation; rewards are always zero."""

    def __init__(self, spec: EnvSpec):
        super().__init__(spec)
        self.value = np.array([spec.param(f"c{i}", 0.0) for i in range(spec.m)])

    def _initial(self, trial_seed: int) -> EnvState:
        return EnvState(latent=(), t=1, done=False, trial_seed=trial_seed)

    def _observe(self, state: EnvState) -> np.ndarray:
        return self.value.copy()

    def _transition(self, state: EnvState, a: int) -> tuple[EnvState, np.ndarray]:
        return EnvState((), state.t + 1, False, state.trial_seed), self._reward(0.0)


_ENV_DIMS = {
    # name: (m, n, o, default max_steps, class)
    "tmaze": (3, 1, 3, None, TMazeEnv),
    "delayed_recall": (2, 1, 2, None, DelayedRecallEnv),
    "two_room": (5, 1, 3, 16, TwoRoomEnv),
    "mdp": (4, 1, 2, 10, OracleMdpEnv),
    "toggle": (1, 1, 2, 20, ToggleEnv),
    "constant": (2, 1, 2, 10, ConstantEnv),
}


def make_env_spec(name: str, seed: int = 0, max_steps: int | None = None, **params) -> EnvSpec:
    if name not in _ENV_DIMS:
        raise ValueError(f"unknown environment {name!r}; known: {sorted(_ENV_DIMS)}")
    m, n, o, default_steps, _ = _ENV_DIMS[name]
    if name == "tmaze":
        default_steps = int(params.get("corridor_length", 3)) + 4
    elif name == "delayed_recall":
        default_steps = int(params.get("delay", 5)) + 2
    elif name == "constant":
        cdims = [k for k in params if k.startswith("c")]
        m = max(len(cdims), 1) if cdims else m
    items = tuple(sorted((k, float(v)) for k, v in params.items()))
    return EnvSpec(name, m, n, o, int(max_steps or default_steps), int(seed), items)


def make_env(spec: EnvSpec) -> Environment:
    if spec.name not in _ENV_DIMS:
        raise ValueError(f"unknown environment {spec.name!r}")
    return _ENV_DIMS[spec.name][4](spec)


def optimal_return(spec: EnvSpec) -> float:
    """Maximum expected external return, by exhaustive search over action
    sequences up to max_steps (identical subtrees cached by latent state)."""
    env = make_env(spec)
    values = []
    for trial_seed in env.eval_seeds():
        state, _, _ = env.reset(trial_seed)
        values.append(_search_best(env, state, {}))
    return float(np.mean(values))


def _search_best(env: Environment, state: EnvState, memo: dict) -> float:
    if state.done:
        return 0.0
    key = (env.latent_key(state), state.t)
    if key in memo:
        return memo[key]
    best = -np.inf
    for a in range(env.spec.o):
        nxt, _, r, done = env.step(state, one_hot(a, env.spec.o))
        v = float(r.sum())
        if not done:
            v += env.discount * _search_best(env, nxt, memo)
        best = max(best, v)
    memo[key] = best
    return best


def delayed_recall_sequences(delay: int, count: int, seed: int):
    """Supervised sequences from the delayed-recall task: observation stream,
    the recall step index, and the cue value to reproduce there."""
    spec = make_env_spec("delayed_recall", seed=seed, delay=delay)
    env = make_env(spec)
    out = []
    for trial_seed in range(count):
        state, obs, _ = env.reset(trial_seed)
        cue = float(state.latent[0])
        inputs = [obs]
        while state.t < delay + 1:
            state, obs, _, _ = env.step(state, one_hot(0, spec.o))
            inputs.append(obs)
        out.append((inputs, delay + 1, cue))
    return out
