"""Controllers that exploit the predictive world model.

Three variants: linear Q-learning on the Markovized state (sense, hidden,
pred); an evolutionary policy network on the same state; and a coupled
controller-model network whose genome carries learnable read/write
connections into a frozen model plus a gate unit that can scale the model's
environmental input down to nothing, freeing it for internal use. Incremental
learning freezes a trained controller and searches only over newly added
units and links.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import nn_core
from .environments import Environment, one_hot
from .errors import ContractViolation, DimensionMismatch
from .history import HistoryStore, StepRecord
from .nn_core import LinkSpec, NetParams, NetSpec, UnitSpec
from .world_model import ModelState, WorldModel, initial_model_state, predict_step


def markov_state(model: WorldModel, sense_t: np.ndarray, prev: ModelState | None) -> np.ndarray:
    """Concatenation (sense(t), hidden(t), pred(t)); hidden and pred are zero
    vectors at a trial start."""
    if prev is None:
        prev = initial_model_state(model)
    sense_t = np.asarray(sense_t, dtype=np.float64)
    if sense_t.shape != (model.m + model.n,):
        raise DimensionMismatch(f"sense must have length {model.m + model.n}")
    return np.concatenate([sense_t, prev.hidden(model), prev.pred])


def markov_dim(model: WorldModel) -> int:
    return 2 * model.m + 2 * model.n + model.h


# ---------------------------------------------------------------------------
# Variant 1: linear Q-learning


@dataclass(frozen=True, eq=False)
class QFunction:
    weights: np.ndarray  # (n_actions, dim + 1); last column is the bias feature
    gamma: float
    alpha: float
    epsilon: float

    def __post_init__(self):
        if not (0.0 <= self.gamma < 1.0):
            raise ContractViolation("gamma must lie in [0, 1)")
        w = np.asarray(self.weights, dtype=np.float64)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def n_actions(self) -> int:
        return self.weights.shape[0]


def make_qfunction(n_actions: int, dim: int, gamma: float = 0.95, alpha: float = 0.1, epsilon: float = 0.3) -> QFunction:
    return QFunction(np.zeros((n_actions, dim + 1)), gamma, alpha, epsilon)


def _features(s: np.ndarray) -> np.ndarray:
    return np.append(np.asarray(s, dtype=np.float64), 1.0)


def q_values(q: QFunction, s: np.ndarray) -> np.ndarray:
    return q.weights @ _features(s)


def greedy_action(q: QFunction, s: np.ndarray) -> int:
    return int(np.argmax(q_values(q, s)))  # lowest index wins ties


def epsilon_greedy_action(q: QFunction, s: np.ndarray, eps: float, rng: np.random.Generator) -> int:
    if rng.random() < eps:
        return int(rng.integers(q.n_actions))
    return greedy_action(q, s)


def q_step(q: QFunction, s: np.ndarray, a: int, r: float, s_next: np.ndarray, done: bool = False) -> QFunction:
    """One Q-learning update on the linear approximator."""
    feats = _features(s)
    target = r if done else r + q.gamma * float(np.max(q_values(q, s_next)))
    td = target - float(q.weights[a] @ feats)
    w = q.weights.copy()
    w[a] += q.alpha * td * feats
    return QFunction(w, q.gamma, q.alpha, q.epsilon)


# ---------------------------------------------------------------------------
# Variant 2/3: evolutionary search


@dataclass
class Genome:
    vector: np.ndarray
    fitness: float | None = None


@dataclass(frozen=True)
class EvolutionConfig:
    mu: int = 5
    lam: int = 20
    sigma: float = 0.1
    generations: int = 100
    sigma_adapt: bool = True  # 1/5th success rule
    min_sigma: float = 1e-4
    max_sigma: float = 2.0

    def __post_init__(self):
        if self.mu < 1 or self.lam < self.mu:
            raise ContractViolation("need mu >= 1 and lam >= mu")


def init_population(size: int, length: int, rng: np.random.Generator, scale: float = 0.1) -> list[Genome]:
    return [Genome(rng.uniform(-scale, scale, length)) for _ in range(size)]


def _safe_eval(evaluate, genome: Genome) -> float:
    try:
        f = float(evaluate(genome))
    except Exception:
        return -np.inf
    return f if np.isfinite(f) or f == -np.inf else -np.inf


def _rank(pop: list[Genome]) -> list[Genome]:
    return sorted(pop, key=lambda g: -np.inf if g.fitness is None else g.fitness, reverse=True)


def evolution_step(
    parents: list[Genome], lam: int, sigma: float, rng: np.random.Generator
) -> list[tuple[Genome, Genome]]:
    """lam Gaussian-mutated offspring with their parents (fitness unset)."""
    out = []
    for _ in range(lam):
        p = parents[int(rng.integers(len(parents)))]
        out.append((Genome(p.vector + sigma * rng.normal(size=len(p.vector))), p))
    return out


def select_mu(pop: list[Genome], mu: int) -> list[Genome]:
    return _rank(pop)[:mu]


def adapt_sigma(sigma: float, success_rate: float, cfg: EvolutionConfig) -> float:
    if not cfg.sigma_adapt:
        return sigma
    if success_rate > 0.2:
        sigma *= 1.22
    elif success_rate < 0.2:
        sigma /= 1.22
    return float(np.clip(sigma, cfg.min_sigma, cfg.max_sigma))


@dataclass
class EvolutionState:
    population: list[Genome]  # ranked, best first
    sigma: float
    best: Genome
    generation: int = 0


def start_evolution(population: list[Genome], evaluate, cfg: EvolutionConfig, rng: np.random.Generator) -> EvolutionState:
    for g in population:
        if g.fitness is None:
            g.fitness = _safe_eval(evaluate, g)
    ranked = _rank(population)
    return EvolutionState(population=ranked, sigma=cfg.sigma, best=ranked[0])


def evolve_generation(state: EvolutionState, evaluate, cfg: EvolutionConfig, rng: np.random.Generator) -> EvolutionState:
    """One (mu+lam) generation: mutate, evaluate, select; failures are culled
    and the step size follows the 1/5th success rule."""
    parents = select_mu(state.population, cfg.mu)
    successes = 0
    children = []
    for child, parent in evolution_step(parents, cfg.lam, state.sigma, rng):
        child.fitness = _safe_eval(evaluate, child)
        if child.fitness > parent.fitness:
            successes += 1
        if child.fitness > -np.inf:
            children.append(child)
    sigma = adapt_sigma(state.sigma, successes / cfg.lam, cfg)
    population = select_mu(parents + children, cfg.mu)
    best = population[0] if population[0].fitness > state.best.fitness else state.best
    return EvolutionState(population=population, sigma=sigma, best=best, generation=state.generation + 1)


def evolve(
    population: list[Genome],
    evaluate,
    cfg: EvolutionConfig,
    rng: np.random.Generator,
    on_generation=None,
) -> Genome:
    """(mu+lam) elitist evolution strategy with Gaussian mutation and 1/5th
    rule step-size adaptation. Returns the best genome ever evaluated;
    best-so-far fitness never decreases across generations."""
    state = start_evolution(population, evaluate, cfg, rng)
    for _ in range(cfg.generations):
        state = evolve_generation(state, evaluate, cfg, rng)
        if on_generation is not None:
            fits = [g.fitness for g in state.population]
            on_generation(state.generation - 1, state.best.fitness, float(np.mean(fits)))
    return state.best


# ---------------------------------------------------------------------------
# Variant 3: the coupled controller-model network


@dataclass(frozen=True)
class CMSpec:
    """Small controller net plus learnable interface links into a frozen
    model. Genome layout: learnable controller weights (ascending index),
    then C->M interface weights, then M->C interface weights."""

    c_spec: NetSpec
    action_units: tuple[int, ...]
    gate_unit: int  # sigmoid output scaling the model's environment input
    interface_out: tuple[tuple[int, int], ...]  # (C unit, M hidden unit)
    interface_in: tuple[tuple[int, int], ...]  # (M unit, C hidden unit)
    interface_mode: str = "additive"
    frozen_c: tuple[tuple[int, float], ...] = ()  # (weight index, frozen value)
    frozen_iface: tuple[tuple[int, float], ...] = ()  # (slot, frozen value)

    @property
    def n_iface(self) -> int:
        return len(self.interface_out) + len(self.interface_in)

    @property
    def learnable_c_indices(self) -> tuple[int, ...]:
        frozen = {i for i, _ in self.frozen_c}
        return tuple(i for i in range(self.c_spec.n_w) if i not in frozen)

    @property
    def learnable_iface_slots(self) -> tuple[int, ...]:
        frozen = {i for i, _ in self.frozen_iface}
        return tuple(i for i in range(self.n_iface) if i not in frozen)

    @property
    def n_learnable(self) -> int:
        return len(self.learnable_c_indices) + len(self.learnable_iface_slots)


def make_cm_spec(
    model: WorldModel,
    c_hidden: int = 6,
    n_iface_out: int = 4,
    n_iface_in: int = 4,
    recurrent: bool = True,
    interface_mode: str = "additive",
) -> CMSpec:
    """Controller RNN with m+n sense inputs, o action outputs (tanh) and the
    sigmoid gate output; interface links target the first hidden units by
    index on both sides."""
    m, n, o = model.m, model.n, model.o
    units = []
    uid = 0
    for _ in range(m + n):
        units.append(UnitSpec(uid, "input", "identity"))
        uid += 1
    bias = uid
    units.append(UnitSpec(uid, "bias", "identity"))
    uid += 1
    hidden = []
    for _ in range(c_hidden):
        units.append(UnitSpec(uid, "hidden", "tanh"))
        hidden.append(uid)
        uid += 1
    actions = []
    for _ in range(o):
        units.append(UnitSpec(uid, "output", "tanh"))
        actions.append(uid)
        uid += 1
    gate = uid
    units.append(UnitSpec(uid, "output", "sigmoid"))
    uid += 1

    links = []
    w = 0
    for hu in hidden:
        for src in range(m + n):
            links.append(LinkSpec(src, hu, w))
            w += 1
        links.append(LinkSpec(bias, hu, w))
        w += 1
        if recurrent:
            for src in hidden:
                links.append(LinkSpec(src, hu, w, delay=1))
                w += 1
    for ou in (*actions, gate):
        for src in hidden:
            links.append(LinkSpec(src, ou, w))
            w += 1
        links.append(LinkSpec(bias, ou, w))
        w += 1
    c_spec = NetSpec(tuple(units), tuple(links), w)
    nn_core.validate_spec(c_spec)

    m_hidden = model.hidden_ids
    iface_out = tuple(
        (hidden[k % len(hidden)], m_hidden[k % len(m_hidden)]) for k in range(n_iface_out)
    )
    iface_in = tuple(
        (m_hidden[k % len(m_hidden)], hidden[k % len(hidden)]) for k in range(n_iface_in)
    )
    return CMSpec(c_spec, tuple(actions), gate, iface_out, iface_in, interface_mode)


def split_genome(cm: CMSpec, vector: np.ndarray) -> tuple[NetParams, np.ndarray, np.ndarray]:
    """Assemble the full controller weight vector and the two interface
    weight arrays from frozen values plus the learnable genome entries."""
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (cm.n_learnable,):
        raise DimensionMismatch(f"genome length {vector.shape} != learnable count {cm.n_learnable}")
    c_w = np.zeros(cm.c_spec.n_w)
    for i, v in cm.frozen_c:
        c_w[i] = v
    c_idx = cm.learnable_c_indices
    c_w[list(c_idx)] = vector[: len(c_idx)]
    iface = np.zeros(cm.n_iface)
    for i, v in cm.frozen_iface:
        iface[i] = v
    iface[list(cm.learnable_iface_slots)] = vector[len(c_idx) :]
    k = len(cm.interface_out)
    return NetParams(c_w), iface[:k], iface[k:]


def _interface_injections(pairs, weights, source_acts, mode: str) -> dict[int, float]:
    inj: dict[int, float] = {}
    for (src, dst), w in zip(pairs, weights):
        term = float(w * source_acts[src])
        if mode == "additive":
            inj[dst] = inj.get(dst, 0.0) + term
        else:
            inj[dst] = inj.get(dst, 1.0) * term
    return inj


def initial_cm_state(cm: CMSpec, model: WorldModel) -> tuple[np.ndarray, ModelState]:
    return nn_core.initial_state(cm.c_spec), initial_model_state(model)


def cm_forward(
    cm: CMSpec,
    genome: np.ndarray,
    model: WorldModel,
    c_state: np.ndarray,
    m_state: ModelState,
    sense_t: np.ndarray,
    gate_override: float | None = None,
) -> tuple[np.ndarray, ModelState, np.ndarray]:
    """One joint step. The controller reads sense(t) plus interface
    activations from the model's previous state; the model then consumes the
    gated input u*all(t) plus interface injections from the controller's new
    activations. The model's own weights are never touched."""
    c_params, w_out, w_in = split_genome(cm, genome)
    inj_c = _interface_injections(cm.interface_in, w_in, m_state.acts, cm.interface_mode)
    c_acts = nn_core.forward_step(
        cm.c_spec, c_params, c_state, sense_t, injections=inj_c or None, injection_mode=cm.interface_mode
    )
    a = int(np.argmax(c_acts[list(cm.action_units)]))
    out = one_hot(a, len(cm.action_units))
    u_hat = float(c_acts[cm.gate_unit]) if gate_override is None else float(gate_override)
    all_t = u_hat * np.concatenate([sense_t, out])
    inj_m = _interface_injections(cm.interface_out, w_out, c_acts, cm.interface_mode)
    m_acts = nn_core.forward_step(
        model.spec, model.params, m_state.acts, all_t, injections=inj_m or None, injection_mode=cm.interface_mode
    )
    pred = m_acts[list(model.spec.unit_ids("output"))]
    return c_acts, ModelState(m_acts, pred), out


def think_steps(
    cm: CMSpec,
    genome: np.ndarray,
    model: WorldModel,
    k: int,
    c_state: np.ndarray,
    m_state: ModelState,
    sense_t: np.ndarray,
    gate_override: float | None = None,
) -> tuple[np.ndarray, ModelState]:
    """k joint steps with the environment input held at the last observation
    and no action executed: time to think before acting."""
    for _ in range(k):
        c_state, m_state, _ = cm_forward(cm, genome, model, c_state, m_state, sense_t, gate_override)
    return c_state, m_state


def freeze_and_grow(
    cm: CMSpec,
    genome: np.ndarray,
    extra_units: int,
    extra_links: int,
    rng: np.random.Generator,
) -> tuple[CMSpec, np.ndarray]:
    """Freeze every currently learnable weight at its genome value, then add
    new units and links whose fresh weights form the new genome (returned as
    a zero template, so the grown controller starts out behaving exactly like
    the frozen one)."""
    c_params, w_out, w_in = split_genome(cm, genome)
    frozen_c = tuple((i, float(c_params.weights[i])) for i in range(cm.c_spec.n_w))
    frozen_iface = tuple((i, float(v)) for i, v in enumerate(np.concatenate([w_out, w_in])))

    spec = cm.c_spec
    units = list(spec.units)
    links = list(spec.links)
    next_w = spec.n_w
    inputs = spec.unit_ids("input")
    bias = spec.unit_ids("bias")[0]
    hidden = list(spec.unit_ids("hidden"))
    outputs = spec.unit_ids("output")

    for _ in range(extra_units):
        new_id = len(units)
        units.append(UnitSpec(new_id, "hidden", "tanh"))
        picked = [u for u in inputs if rng.random() < 0.5] or [int(rng.choice(inputs))]
        for src in picked:
            links.append(LinkSpec(src, new_id, next_w))
            next_w += 1
        links.append(LinkSpec(bias, new_id, next_w))
        next_w += 1
        for src in (*hidden, new_id):
            if rng.random() < 0.5:
                links.append(LinkSpec(src, new_id, next_w, delay=1))
                next_w += 1
        targets = [u for u in outputs if rng.random() < 0.5] or [int(rng.choice(outputs))]
        for dst in targets:
            links.append(LinkSpec(new_id, dst, next_w))
            next_w += 1
        hidden.append(new_id)

    existing = {(lk.src, lk.dst, lk.delay) for lk in links}
    added = 0
    tries = 0
    while added < extra_links and tries < 200:
        tries += 1
        src = int(rng.integers(len(units)))
        dst = int(rng.choice([*hidden, *outputs]))
        delay = int(rng.integers(0, 2))
        if (src, dst, delay) in existing:
            continue
        trial_links = links + [LinkSpec(src, dst, next_w, delay)]
        trial_spec = NetSpec(tuple(units), tuple(trial_links), next_w + 1)
        try:
            nn_core.validate_spec(trial_spec)
        except Exception:
            continue
        links = trial_links
        existing.add((src, dst, delay))
        next_w += 1
        added += 1

    new_c_spec = NetSpec(tuple(units), tuple(links), next_w)
    nn_core.validate_spec(new_c_spec)
    grown = replace(cm, c_spec=new_c_spec, frozen_c=frozen_c, frozen_iface=frozen_iface)
    return grown, np.zeros(grown.n_learnable)


# ---------------------------------------------------------------------------
# Trial runners shared by training, evaluation and the orchestrator


def _terminal_record(store: HistoryStore, obs, r) -> None:
    store.append(StepRecord(len(store) + 1, obs, r, np.zeros(store.o)))


def run_q_trial(
    env: Environment,
    model: WorldModel,
    q: QFunction,
    trial_seed: int,
    eps: float,
    rng: np.random.Generator,
    store: HistoryStore | None = None,
    learn: bool = True,
) -> tuple[QFunction, float]:
    """One trial with epsilon-greedy actions on the Markovized state; the
    Q-function is updated online when learn is set."""
    if store is not None:
        store.begin_trial(env.spec.name)
    env_state, obs, r = env.reset(trial_seed)
    m_state = None
    sense = np.concatenate([obs, r])
    s = markov_state(model, sense, m_state)
    total = 0.0
    done = False
    while not done:
        a = epsilon_greedy_action(q, s, eps, rng)
        out = one_hot(a, env.spec.o)
        m_state = predict_step(model, m_state, np.concatenate([sense, out]))
        env_state, obs2, r2, done = env.step(env_state, out)
        if store is not None:
            store.append(StepRecord(len(store) + 1, obs, r, out))
        sense2 = np.concatenate([obs2, r2])
        s2 = markov_state(model, sense2, m_state)
        reward = float(r2.sum())
        if learn:
            q = q_step(q, s, a, reward, s2, done)
        total += reward
        s, sense, obs, r = s2, sense2, obs2, r2
    if store is not None:
        _terminal_record(store, obs, r)
        store.end_trial()
    return q, total


def run_policy_trial(
    env: Environment,
    model: WorldModel,
    act,
    trial_seed: int,
    store: HistoryStore | None = None,
) -> float:
    """One trial driven by act(markov_state_vector) -> action index."""
    if store is not None:
        store.begin_trial(env.spec.name)
    env_state, obs, r = env.reset(trial_seed)
    m_state = None
    total = 0.0
    done = False
    while not done:
        sense = np.concatenate([obs, r])
        a = int(act(markov_state(model, sense, m_state)))
        out = one_hot(a, env.spec.o)
        m_state = predict_step(model, m_state, np.concatenate([sense, out]))
        env_state, obs2, r2, done = env.step(env_state, out)
        if store is not None:
            store.append(StepRecord(len(store) + 1, obs, r, out))
        total += float(r2.sum())
        obs, r = obs2, r2
    if store is not None:
        _terminal_record(store, obs, r)
        store.end_trial()
    return total


def run_cm_trial(
    env: Environment,
    model: WorldModel,
    cm: CMSpec,
    genome: np.ndarray,
    trial_seed: int,
    think_k: int = 0,
    gate_override: float | None = None,
    store: HistoryStore | None = None,
) -> float:
    """One trial of the coupled controller-model network; before each real
    action the pair may run think_k internal steps."""
    if store is not None:
        store.begin_trial(env.spec.name)
    env_state, obs, r = env.reset(trial_seed)
    c_state, m_state = initial_cm_state(cm, model)
    total = 0.0
    done = False
    while not done:
        sense = np.concatenate([obs, r])
        if think_k > 0:
            c_state, m_state = think_steps(cm, genome, model, think_k, c_state, m_state, sense, gate_override)
        c_state, m_state, out = cm_forward(cm, genome, model, c_state, m_state, sense, gate_override)
        env_state, obs2, r2, done = env.step(env_state, out)
        if store is not None:
            store.append(StepRecord(len(store) + 1, obs, r, out))
        total += float(r2.sum())
        obs, r = obs2, r2
    if store is not None:
        _terminal_record(store, obs, r)
        store.end_trial()
    return total


# ---------------------------------------------------------------------------
# Policy network for the evolutionary variant on the Markov state


def make_policy_spec(in_dim: int, hidden: int, out_dim: int) -> NetSpec:
    """Feedforward tanh policy net; memory comes from the model's state."""
    units = []
    uid = 0
    for _ in range(in_dim):
        units.append(UnitSpec(uid, "input", "identity"))
        uid += 1
    bias = uid
    units.append(UnitSpec(uid, "bias", "identity"))
    uid += 1
    hid = []
    for _ in range(hidden):
        units.append(UnitSpec(uid, "hidden", "tanh"))
        hid.append(uid)
        uid += 1
    outs = []
    for _ in range(out_dim):
        units.append(UnitSpec(uid, "output", "tanh"))
        outs.append(uid)
        uid += 1
    links = []
    w = 0
    for hu in hid:
        for src in range(in_dim):
            links.append(LinkSpec(src, hu, w))
            w += 1
        links.append(LinkSpec(bias, hu, w))
        w += 1
    for ou in outs:
        for src in hid:
            links.append(LinkSpec(src, ou, w))
            w += 1
        links.append(LinkSpec(bias, ou, w))
        w += 1
    spec = NetSpec(tuple(units), tuple(links), w)
    nn_core.validate_spec(spec)
    return spec


def policy_action(spec: NetSpec, weights: np.ndarray, markov_vec: np.ndarray) -> int:
    acts = nn_core.forward_step(spec, NetParams(weights), nn_core.initial_state(spec), markov_vec)
    return int(np.argmax(acts[list(spec.unit_ids("output"))]))
