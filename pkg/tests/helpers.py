"""Shared test utilities: random valid net specs, a central-difference
gradient oracle kept independent of the backprop path it checks, and the
experiment harnesses reused by module and acceptance tests."""

import numpy as np

from cmrl.controllers import (
    EvolutionConfig,
    evolve_generation,
    init_population,
    make_cm_spec,
    run_cm_trial,
    start_evolution,
)
from cmrl.environments import make_env, make_env_spec, one_hot
from cmrl.history import HistoryStore, StepRecord
from cmrl.nn_core import (
    LinkSpec,
    NetParams,
    NetSpec,
    UnitSpec,
    bptt,
    validate_spec,
)
from cmrl.world_model import make_world_model, sleep_train


def random_spec(rng: np.random.Generator, max_units: int = 12) -> NetSpec:
    """Random valid spec: mixed additive/multiplicative units, delays 0/1,
    occasional weight sharing."""
    n_in = int(rng.integers(1, 4))
    n_out = int(rng.integers(1, 3))
    n_hidden = int(rng.integers(0, max(1, max_units - n_in - n_out - 1)))
    units = []
    uid = 0
    for _ in range(n_in):
        units.append(UnitSpec(uid, "input", "identity"))
        uid += 1
    units.append(UnitSpec(uid, "bias", "identity"))
    bias = uid
    uid += 1
    hidden = []
    for _ in range(n_hidden):
        act = str(rng.choice(["tanh", "sigmoid", "identity"]))
        units.append(UnitSpec(uid, "hidden", act))
        hidden.append(uid)
        uid += 1
    outs = []
    for _ in range(n_out):
        act = str(rng.choice(["tanh", "identity"]))
        units.append(UnitSpec(uid, "output", act))
        outs.append(uid)
        uid += 1

    # delay-0 links only "forward" in listing order keeps the subgraph acyclic
    links = []
    widx = 0
    used = set()

    def add_link(src, dst, delay, combine):
        nonlocal widx
        if (src, dst, delay) in used:
            return
        used.add((src, dst, delay))
        if widx > 0 and rng.random() < 0.15:
            w = int(rng.integers(0, widx))
        else:
            w = widx
            widx += 1
        links.append(LinkSpec(src, dst, w, delay, combine))

    for dst in hidden + outs:
        combine = "multiplicative" if rng.random() < 0.25 else "additive"
        n_incoming = int(rng.integers(1, 4))
        earlier = [u.id for u in units if u.id < dst and u.kind != "output"]
        anyunit = [u.id for u in units if u.kind in ("hidden", "output")]
        for _ in range(n_incoming):
            if anyunit and rng.random() < 0.35:
                add_link(int(rng.choice(anyunit)), dst, 1, combine)
            else:
                add_link(int(rng.choice(earlier)), dst, 0, combine)
        if not any(l.dst == dst for l in links):
            add_link(bias, dst, 0, combine)

    # compact weight indices so every index is referenced
    seen = sorted({l.widx for l in links})
    remap = {w: i for i, w in enumerate(seen)}
    links = [LinkSpec(l.src, l.dst, remap[l.widx], l.delay, l.combine) for l in links]
    spec = NetSpec(tuple(units), tuple(links), len(seen))
    validate_spec(spec)
    return spec


def random_episode(rng: np.random.Generator, spec: NetSpec, max_steps: int = 8):
    T = int(rng.integers(1, max_steps + 1))
    inputs = [rng.uniform(-1, 1, spec.n_in) for _ in range(T)]
    targets = {t: rng.uniform(-1, 1, spec.n_out) for t in range(1, T + 1)}
    return inputs, targets


def fd_gradient(spec, params, inputs, loss_terms, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences on the total episode loss."""
    grad = np.zeros(spec.n_w)
    w0 = params.weights.copy()
    for i in range(spec.n_w):
        wp = w0.copy()
        wp[i] += eps
        lp, _ = bptt(spec, NetParams(wp), inputs, loss_terms)
        wm = w0.copy()
        wm[i] -= eps
        lm, _ = bptt(spec, NetParams(wm), inputs, loss_terms)
        grad[i] = (lp - lm) / (2 * eps)
    return grad


def rel_err(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


# ---------------------------------------------------------------------------
# Experiment harnesses


def record_random_trials(env, store, n_trials, policy_rng, start_seed=0):
    """Random-policy rollouts appended to the store; a final no-op record
    carries each trial's terminal reward."""
    for k in range(n_trials):
        store.begin_trial(env.spec.name)
        state, obs, r = env.reset(start_seed + k)
        done = False
        while not done:
            a = int(policy_rng.integers(0, env.spec.o))
            out = one_hot(a, env.spec.o)
            nstate, nobs, nr, done = env.step(state, out)
            store.append(StepRecord(len(store) + 1, obs, r, out))
            state, obs, r = nstate, nobs, nr
        store.append(StepRecord(len(store) + 1, obs, r, np.zeros(env.spec.o)))
        store.end_trial()


def pretrain_model_on_env(env, seed, h=6, n_trials=30, epochs=300, lr=0.5):
    """Random-policy history plus one sleep phase; returns the trained model
    and the store."""
    spec = env.spec
    store = HistoryStore(spec.m, spec.n, spec.o, seed=seed)
    record_random_trials(env, store, n_trials, np.random.default_rng(seed + 1000))
    model = make_world_model(spec.m, spec.n, spec.o, h=h, rng=np.random.default_rng(seed + 2000))
    res = sleep_train(
        model, store, epochs=epochs, lr=lr, rng=np.random.default_rng(seed + 3000),
        scoring_spans=list(store.trials)[: min(8, store.n_trials)],
    )
    return res.model, store


def balanced_tmaze_seeds(env, per_cue, search=300):
    """Trial seeds whose cue draws split evenly between the two arms."""
    plus, minus = [], []
    for s in range(search):
        _, obs, _ = env.reset(s)
        (plus if obs[0] > 0 else minus).append(s)
        if len(plus) >= per_cue and len(minus) >= per_cue:
            break
    return plus[:per_cue] + minus[:per_cue]


def evolve_cm_on_tmaze(
    seed,
    generations=150,
    corridor_length=3,
    think_k=0,
    recurrent=True,
    n_iface_out=4,
    n_iface_in=4,
    c_hidden=5,
    target=0.9,
    measure_trials=20,
):
    """Evolve a coupled controller against a frozen pretrained model on the
    T-maze. Fitness uses 6 cue-balanced trial seeds; whenever the best
    improves, it is measured over `measure_trials` fresh balanced trials.
    Returns (best genome, final measured mean return, generations used,
    model, cm spec)."""
    spec = make_env_spec("tmaze", seed=seed, corridor_length=corridor_length)
    env = make_env(spec)
    model, _ = pretrain_model_on_env(env, seed)
    cm = make_cm_spec(model, c_hidden=c_hidden, n_iface_out=n_iface_out, n_iface_in=n_iface_in, recurrent=recurrent)
    fit_seeds = balanced_tmaze_seeds(env, 3)
    meas_pool = [s for s in balanced_tmaze_seeds(env, measure_trials) if s not in fit_seeds]
    meas_seeds = meas_pool[: measure_trials // 2] + meas_pool[-(measure_trials // 2):]
    rng = np.random.default_rng(seed + 5000)

    def fitness(g):
        return float(
            np.mean([run_cm_trial(env, model, cm, g.vector, ts, think_k=think_k) for ts in fit_seeds])
        )

    def measure(g):
        return float(
            np.mean([run_cm_trial(env, model, cm, g.vector, ts, think_k=think_k) for ts in meas_seeds])
        )

    cfg = EvolutionConfig(mu=5, lam=24, sigma=0.5, generations=generations, min_sigma=0.1)
    state = start_evolution(init_population(5, cm.n_learnable, rng, scale=0.3), fitness, cfg, rng)
    measured = measure(state.best)
    last_best = state.best.fitness
    gens_used = 0
    for gen in range(generations):
        state = evolve_generation(state, fitness, cfg, rng)
        gens_used = gen + 1
        if state.best.fitness > last_best or measured < target:
            last_best = state.best.fitness
            measured = measure(state.best)
        if measured >= target:
            break
    return state.best, measured, gens_used, model, cm


def evaluations_until(env, model, cm, criterion, rng, max_evals=400, trials_per_eval=2):
    """Evolve until a genome's mean return reaches the criterion; returns the
    number of evaluations spent, or None within the budget."""
    count = [0]

    def fitness(g):
        count[0] += 1
        return float(
            np.mean([run_cm_trial(env, model, cm, g.vector, ts) for ts in range(trials_per_eval)])
        )

    cfg = EvolutionConfig(mu=4, lam=8, sigma=0.4, generations=10**9, min_sigma=0.1)
    state = start_evolution(init_population(4, cm.n_learnable, rng, scale=0.3), fitness, cfg, rng)
    if state.best.fitness >= criterion:
        return count[0]
    while count[0] < max_evals:
        state = evolve_generation(state, fitness, cfg, rng)
        if state.best.fitness >= criterion:
            return count[0]
    return None
