"""The alternating training loop: freeze the model, run controller trials
that prolong the history, unfreeze and sleep-train the model on replayed
trials, occasionally propose a structural change, credit curiosity, repeat.

Also owns run configuration, named-substream seeding, checkpoint/resume and
the metric exports. Every stochastic draw flows from the master seed through
one of four named streams (init, evolution, replay, structural, qlearn), so
equal configs reproduce bit-identical histories.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .controllers import (
    EvolutionConfig,
    EvolutionState,
    Genome,
    QFunction,
    adapt_sigma,
    evolution_step,
    init_population,
    make_cm_spec,
    make_policy_spec,
    make_qfunction,
    markov_dim,
    policy_action,
    run_cm_trial,
    run_policy_trial,
    run_q_trial,
    select_mu,
)
from .curiosity import CuriosityConfig, intrinsic_reward
from .environments import EnvSpec, make_env, make_env_spec, optimal_return
from .errors import CheckpointError, ContractViolation
from .history import HistoryStore
from .seeding import generator_state, restore_generator, substream
from .world_model import (
    CodeLengthReport,
    CodingScheme,
    accept_if_shorter,
    code_length,
    make_world_model,
    model_from_text,
    model_to_text,
    propose_structural_change,
    select_scoring_spans,
    sleep_train,
)

VARIANTS = ("C1", "C2", "C3")
STREAMS = ("evolution", "replay", "structural", "qlearn")


@dataclass(frozen=True)
class RunConfig:
    env: EnvSpec
    variant: str = "C3"
    model_h: int = 6
    coding: CodingScheme = field(default_factory=CodingScheme)
    curiosity: CuriosityConfig = field(default_factory=CuriosityConfig)
    phases: int = 10
    trials_per_phase: int = 8  # C1 trials per controller phase
    gens_per_phase: int = 10  # C2/C3 generations per controller phase
    eval_trials: int = 3
    think_k: int = 0
    c_hidden: int = 6
    n_iface_out: int = 4
    n_iface_in: int = 4
    c_recurrent: bool = True
    mu: int = 5
    lam: int = 20
    sigma: float = 0.5
    min_sigma: float = 0.1
    genome_init_scale: float = 0.3
    q_gamma: float = 0.95
    q_alpha: float = 0.1
    eps_start: float = 0.3
    eps_end: float = 0.02
    sleep_epochs: int = 200
    sleep_lr: float = 0.5
    weight_penalty: float = 1e-4
    sample_k: int = 4
    score_k: int = 3
    structural_period: int = 2  # 0 disables structural search
    retrain_epochs: int = 50
    stop_fraction: float = 0.95
    master_seed: int = 0
    out_dir: str | None = None

    def __post_init__(self):
        if self.phases < 1:
            raise ContractViolation("phases must be >= 1")
        if self.variant not in VARIANTS:
            raise ContractViolation(f"unknown controller variant {self.variant!r}")


@dataclass(frozen=True)
class PhaseReport:
    phase: int
    controller_metric: float
    code: CodeLengthReport
    intrinsic_total: float
    duration: float
    model_hash: str


# ---------------------------------------------------------------------------
# Config file format: one dotted key per line, `key = value`


_ENV_KEYS = {"name", "seed", "max_steps"}


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractViolation(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _first(override, fallback):
    return override if override is not None else fallback


def _to_bool(v: str) -> bool:
    if v.lower() in ("true", "1", "yes", "on"):
        return True
    if v.lower() in ("false", "0", "no", "off"):
        return False
    raise ContractViolation(f"expected a boolean, got {v!r}")


def build_run_config(mapping: dict[str, str], seed_override: int | None = None, out_override: str | None = None) -> RunConfig:
    m = dict(mapping)

    def pop(key, conv, default):
        if key in m:
            return conv(m.pop(key))
        return default

    env_name = pop("env.name", str, "tmaze")
    env_seed = pop("env.seed", int, 0)
    env_max = pop("env.max_steps", int, None)
    env_params = {}
    for key in [k for k in m if k.startswith("env.")]:
        env_params[key[len("env."):]] = float(m.pop(key))
    env = make_env_spec(env_name, seed=env_seed, max_steps=env_max, **env_params)

    coding = CodingScheme(
        sigma_e=pop("coding.sigma_e", float, 0.1),
        delta_e=pop("coding.delta_e", float, 1.0 / 256),
        weight_scheme=pop("coding.scheme", str, "gaussian"),
        sigma_w=pop("coding.sigma_w", float, 1.0),
        delta_w=pop("coding.delta_w", float, 1.0 / 256),
        bits_per_weight=pop("coding.bits_per_weight", int, 16),
        zero_weight_threshold=pop("coding.zero_weight_threshold", float, 1e-3),
    )
    curiosity = CuriosityConfig(
        eta=pop("curiosity.eta", float, 0.01),
        clip_negative=pop("curiosity.clip_negative", _to_bool, True),
        enabled=pop("curiosity.enabled", _to_bool, False),
    )
    cfg = RunConfig(
        env=env,
        coding=coding,
        curiosity=curiosity,
        variant=pop("controller.variant", str, "C3"),
        c_hidden=pop("controller.c_hidden", int, 6),
        n_iface_out=pop("controller.iface_out", int, 4),
        n_iface_in=pop("controller.iface_in", int, 4),
        c_recurrent=pop("controller.recurrent", _to_bool, True),
        think_k=pop("controller.think_k", int, 0),
        model_h=pop("model.h", int, 6),
        mu=pop("evolution.mu", int, 5),
        lam=pop("evolution.lam", int, 20),
        sigma=pop("evolution.sigma", float, 0.5),
        min_sigma=pop("evolution.min_sigma", float, 0.1),
        genome_init_scale=pop("evolution.init_scale", float, 0.3),
        gens_per_phase=pop("evolution.gens_per_phase", int, 10),
        eval_trials=pop("evolution.eval_trials", int, 3),
        q_gamma=pop("qlearning.gamma", float, 0.95),
        q_alpha=pop("qlearning.alpha", float, 0.1),
        eps_start=pop("qlearning.eps_start", float, 0.3),
        eps_end=pop("qlearning.eps_end", float, 0.02),
        sleep_epochs=pop("sleep.epochs", int, 200),
        sleep_lr=pop("sleep.lr", float, 0.5),
        weight_penalty=pop("sleep.weight_penalty", float, 1e-4),
        sample_k=pop("sleep.sample_k", int, 4),
        score_k=pop("sleep.score_k", int, 3),
        structural_period=pop("sleep.structural_period", int, 2),
        retrain_epochs=pop("sleep.retrain_epochs", int, 50),
        stop_fraction=pop("run.stop_fraction", float, 0.95),
        phases=pop("run.phases", int, 10),
        trials_per_phase=pop("run.trials_per_phase", int, 8),
        master_seed=_first(seed_override, pop("run.master_seed", int, 0)),
        out_dir=_first(out_override, pop("run.out_dir", str, None)),
    )
    if m:
        raise ContractViolation(f"unknown config keys: {sorted(m)}")
    return cfg


def config_to_text(cfg: RunConfig) -> str:
    lines = [f"env.name = {cfg.env.name}", f"env.seed = {cfg.env.seed}", f"env.max_steps = {cfg.env.max_steps}"]
    for k, v in cfg.env.params:
        lines.append(f"env.{k} = {v:.17g}")
    c = cfg.coding
    lines += [
        f"controller.variant = {cfg.variant}",
        f"controller.c_hidden = {cfg.c_hidden}",
        f"controller.iface_out = {cfg.n_iface_out}",
        f"controller.iface_in = {cfg.n_iface_in}",
        f"controller.recurrent = {str(cfg.c_recurrent).lower()}",
        f"controller.think_k = {cfg.think_k}",
        f"model.h = {cfg.model_h}",
        f"coding.sigma_e = {c.sigma_e:.17g}",
        f"coding.delta_e = {c.delta_e:.17g}",
        f"coding.scheme = {c.weight_scheme}",
        f"coding.sigma_w = {c.sigma_w:.17g}",
        f"coding.delta_w = {c.delta_w:.17g}",
        f"coding.bits_per_weight = {c.bits_per_weight}",
        f"coding.zero_weight_threshold = {c.zero_weight_threshold:.17g}",
        f"evolution.mu = {cfg.mu}",
        f"evolution.lam = {cfg.lam}",
        f"evolution.sigma = {cfg.sigma:.17g}",
        f"evolution.min_sigma = {cfg.min_sigma:.17g}",
        f"evolution.init_scale = {cfg.genome_init_scale:.17g}",
        f"evolution.gens_per_phase = {cfg.gens_per_phase}",
        f"evolution.eval_trials = {cfg.eval_trials}",
        f"qlearning.gamma = {cfg.q_gamma:.17g}",
        f"qlearning.alpha = {cfg.q_alpha:.17g}",
        f"qlearning.eps_start = {cfg.eps_start:.17g}",
        f"qlearning.eps_end = {cfg.eps_end:.17g}",
        f"sleep.epochs = {cfg.sleep_epochs}",
        f"sleep.lr = {cfg.sleep_lr:.17g}",
        f"sleep.weight_penalty = {cfg.weight_penalty:.17g}",
        f"sleep.sample_k = {cfg.sample_k}",
        f"sleep.score_k = {cfg.score_k}",
        f"sleep.structural_period = {cfg.structural_period}",
        f"sleep.retrain_epochs = {cfg.retrain_epochs}",
        f"curiosity.enabled = {str(cfg.curiosity.enabled).lower()}",
        f"curiosity.eta = {cfg.curiosity.eta:.17g}",
        f"curiosity.clip_negative = {str(cfg.curiosity.clip_negative).lower()}",
        f"run.stop_fraction = {cfg.stop_fraction:.17g}",
        f"run.phases = {cfg.phases}",
        f"run.trials_per_phase = {cfg.trials_per_phase}",
        f"run.master_seed = {cfg.master_seed}",
    ]
    if cfg.out_dir:
        lines.append(f"run.out_dir = {cfg.out_dir}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# The run loop


class Orchestrator:
    """Owns the model, controller, history and named rng streams between
    phases; the single writer of all run state."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.env = make_env(cfg.env)
        self.rngs = {name: substream(cfg.master_seed, name) for name in STREAMS}
        init_rng = substream(cfg.master_seed, "init")
        self.history = HistoryStore(cfg.env.m, cfg.env.n, cfg.env.o, seed=cfg.master_seed)
        self.model = make_world_model(cfg.env.m, cfg.env.n, cfg.env.o, cfg.model_h, init_rng, cfg.coding)
        self.phase_idx = 0
        self.trials_done = 0
        self.reports: list[PhaseReport] = []
        self.optimal = optimal_return(cfg.env)
        self._init_controller(init_rng)

    # -- controller state ------------------------------------------------------

    def _init_controller(self, rng: np.random.Generator) -> None:
        cfg = self.cfg
        if cfg.variant == "C1":
            self.q = make_qfunction(cfg.env.o, markov_dim(self.model), cfg.q_gamma, cfg.q_alpha, cfg.eps_start)
            self.evo = None
        else:
            if cfg.variant == "C2":
                self.policy_spec = make_policy_spec(markov_dim(self.model), cfg.c_hidden, cfg.env.o)
                length = self.policy_spec.n_w
            else:
                self.cm = make_cm_spec(
                    self.model, cfg.c_hidden, cfg.n_iface_out, cfg.n_iface_in, cfg.c_recurrent
                )
                length = self.cm.n_learnable
            pop = init_population(cfg.mu, length, rng, scale=cfg.genome_init_scale)
            for g in pop:
                g.fitness = -np.inf  # evaluated lazily during the first phase
            self.evo = EvolutionState(population=pop, sigma=cfg.sigma, best=pop[0])

    def _evo_cfg(self) -> EvolutionConfig:
        cfg = self.cfg
        return EvolutionConfig(
            mu=cfg.mu, lam=cfg.lam, sigma=cfg.sigma, generations=1, min_sigma=cfg.min_sigma
        )

    # -- trial execution --------------------------------------------------------

    def _next_trial_seed(self) -> int:
        return self.history.n_trials + 1

    def _epsilon(self) -> float:
        cfg = self.cfg
        total = max(cfg.phases * cfg.trials_per_phase - 1, 1)
        frac = min(self.trials_done / total, 1.0)
        return cfg.eps_start + (cfg.eps_end - cfg.eps_start) * frac

    def _run_genome_trials(self, genome: Genome, n: int, think_k: int) -> tuple[list[int], float]:
        """Execute n recorded trials for the genome; returns trial ids and
        mean external return."""
        cfg = self.cfg
        ids = []
        returns = []
        for _ in range(n):
            seed = self._next_trial_seed()
            if cfg.variant == "C2":
                w = genome.vector
                ret = run_policy_trial(
                    self.env, self.model, lambda s: policy_action(self.policy_spec, w, s), seed, store=self.history
                )
            else:
                ret = run_cm_trial(
                    self.env, self.model, self.cm, genome.vector, seed, think_k=think_k, store=self.history
                )
            ids.append(self.history.latest_trial().trial_id)
            returns.append(ret)
            self.trials_done += 1
        return ids, float(np.mean(returns))

    # -- controller phases -------------------------------------------------------

    def _c1_phase(self) -> float:
        cfg = self.cfg
        returns = []
        for _ in range(cfg.trials_per_phase):
            seed = self._next_trial_seed()
            self.q, ret = run_q_trial(
                self.env, self.model, self.q, seed, self._epsilon(), self.rngs["qlearn"], store=self.history
            )
            returns.append(ret)
            self.trials_done += 1
        return float(np.mean(returns))

    def _evolution_phase(self) -> tuple[float, list[tuple[Genome, list[int], float]]]:
        """Run this phase's generations. Returns (metric, pending) where
        pending holds offspring awaiting curiosity-adjusted selection."""
        cfg = self.cfg
        rng = self.rngs["evolution"]
        # unevaluated genomes (fresh population / after a model rebuild)
        for g in self.evo.population:
            if g.fitness is None or g.fitness == -np.inf:
                ids, ext = self._run_genome_trials(g, cfg.eval_trials, cfg.think_k)
                g.fitness = ext
        self.evo.population[:] = select_mu(self.evo.population, cfg.mu)
        if self.evo.best.fitness in (None, -np.inf):
            self.evo = replace_evo_best(self.evo)

        if cfg.curiosity.enabled:
            # one generation per phase; selection deferred until the sleep
            # phase credits each trial's compression progress
            offspring = evolution_step(self.evo.population, cfg.lam, self.evo.sigma, rng)
            pending = []
            for child, parent in offspring:
                ids, ext = self._run_genome_trials(child, cfg.eval_trials, cfg.think_k)
                pending.append((child, ids, parent.fitness))
            metric = self.evo.best.fitness
            return metric, pending

        for _ in range(cfg.gens_per_phase):
            offspring = evolution_step(self.evo.population, cfg.lam, self.evo.sigma, rng)
            successes = 0
            children = []
            for child, parent in offspring:
                _, ext = self._run_genome_trials(child, cfg.eval_trials, cfg.think_k)
                child.fitness = ext
                if child.fitness > parent.fitness:
                    successes += 1
                children.append(child)
            sigma = adapt_sigma(self.evo.sigma, successes / cfg.lam, self._evo_cfg())
            population = select_mu(self.evo.population + children, cfg.mu)
            best = population[0] if population[0].fitness > self.evo.best.fitness else self.evo.best
            self.evo = EvolutionState(population, sigma, best, self.evo.generation + 1)
        return self.evo.best.fitness, []

    def _finish_deferred_selection(self, pending, per_trial_intrinsic: dict[int, float]) -> None:
        cfg = self.cfg
        successes = 0
        children = []
        for child, trial_ids, parent_fitness in pending:
            spans = [self.history.trials[i - 1] for i in trial_ids]
            ext = float(np.mean([sp.external_return for sp in spans]))
            intr = float(np.mean([per_trial_intrinsic.get(i, 0.0) for i in trial_ids]))
            child.fitness = ext + intr
            if child.fitness > parent_fitness:
                successes += 1
            children.append(child)
        sigma = adapt_sigma(self.evo.sigma, successes / max(cfg.lam, 1), self._evo_cfg())
        population = select_mu(self.evo.population + children, cfg.mu)
        best = population[0] if population[0].fitness > self.evo.best.fitness else self.evo.best
        self.evo = EvolutionState(population, sigma, best, self.evo.generation + 1)

    # -- model phase --------------------------------------------------------------

    def _sleep_phase(self, phase_trial_ids: list[int]) -> tuple[CodeLengthReport, dict[int, float]]:
        cfg = self.cfg
        rng = self.rngs["replay"]
        scoring = select_scoring_spans(self.history, cfg.score_k, rng)
        credit_spans = (
            [self.history.trials[i - 1] for i in phase_trial_ids] if cfg.curiosity.enabled else []
        )
        before = {sp.trial_id: code_length(self.model, self.history, [sp]) for sp in credit_spans}
        # under curiosity, train on strictly older trials so memorizing the
        # scored spans cannot masquerade as compression progress
        train_pool = None
        if cfg.curiosity.enabled and phase_trial_ids:
            older = list(self.history.trials[: phase_trial_ids[0] - 1])
            if older:
                train_pool = older
        result = sleep_train(
            self.model,
            self.history,
            cfg.sleep_epochs,
            cfg.sleep_lr,
            rng=rng,
            weight_penalty=cfg.weight_penalty,
            sample_k=cfg.sample_k,
            scoring_spans=scoring,
            train_pool=train_pool,
        )
        self.model = result.model

        if cfg.structural_period > 0 and (self.phase_idx + 1) % cfg.structural_period == 0:
            info: dict = {}
            candidate = propose_structural_change(self.model, self.rngs["structural"], out_info=info)
            new_model = accept_if_shorter(
                self.model,
                candidate,
                self.history,
                cfg.retrain_epochs,
                rng,
                lr=cfg.sleep_lr,
                weight_penalty=cfg.weight_penalty,
                sample_k=cfg.sample_k,
                scoring_spans=scoring,
            )
            if new_model is not self.model:
                old_h = self.model.h
                self.model = new_model
                if self.model.h != old_h:
                    self._remap_controller(old_h, info)

        per_trial = {}
        for sp in credit_spans:
            after = code_length(self.model, self.history, [sp])
            gain = intrinsic_reward(before[sp.trial_id], after, cfg.curiosity)
            if gain != 0.0:
                self.history.credit_intrinsic(sp.trial_id, gain)
            per_trial[sp.trial_id] = gain
        # report spans are the latest trials so the numbers can be recomputed
        # from the persisted model and history alone
        report_spans = list(self.history.trials[-cfg.score_k :])
        return code_length(self.model, self.history, report_spans), per_trial

    def _remap_controller(self, old_h: int, info: dict) -> None:
        """The model's hidden layer changed size: realign controller state
        feature dimensions (new hidden features start at zero weight)."""
        cfg = self.cfg
        m_n = cfg.env.m + cfg.env.n
        new_h = self.model.h
        if info.get("kind") == "prune_unit":
            feature_map = [j for j in range(old_h) if j != info["pruned_hidden_pos"]]
        else:
            feature_map = list(range(old_h)) + [None] * (new_h - old_h)

        def remap_vec(vec: np.ndarray) -> np.ndarray:
            # markov layout: [sense (m+n), hidden (h), pred (m+n)]
            out = np.zeros(m_n + new_h + m_n)
            out[:m_n] = vec[:m_n]
            for new_j, old_j in enumerate(feature_map):
                if old_j is not None:
                    out[m_n + new_j] = vec[m_n + old_j]
            out[m_n + new_h :] = vec[m_n + old_h :]
            return out

        if cfg.variant == "C1":
            w = np.array([np.append(remap_vec(row[:-1]), row[-1]) for row in self.q.weights])
            self.q = QFunction(w, self.q.gamma, self.q.alpha, self.q.epsilon)
        elif cfg.variant == "C2":
            old_spec = self.policy_spec
            self.policy_spec = make_policy_spec(markov_dim(self.model), cfg.c_hidden, cfg.env.o)
            old_in = m_n + old_h + m_n
            new_in = m_n + new_h + m_n
            full_map = list(range(m_n)) + [None if j is None else m_n + j for j in feature_map] + [
                m_n + old_h + k for k in range(m_n)
            ]

            def remap_policy(vec: np.ndarray) -> np.ndarray:
                out = np.zeros(self.policy_spec.n_w)
                pos_old = 0
                pos_new = 0
                for _ in range(cfg.c_hidden):  # per-hidden blocks: inputs then bias
                    for new_i in range(new_in):
                        src = full_map[new_i]
                        if src is not None:
                            out[pos_new + new_i] = vec[pos_old + src]
                    out[pos_new + new_in] = vec[pos_old + old_in]
                    pos_old += old_in + 1
                    pos_new += new_in + 1
                out[pos_new:] = vec[pos_old:]  # output blocks depend only on hidden
                return out

            for g in self.evo.population:
                g.vector = remap_policy(g.vector)
            if all(g is not self.evo.best for g in self.evo.population):
                self.evo.best.vector = remap_policy(self.evo.best.vector)
        else:  # C3: rebuild interface targets; genome length is unchanged
            self.cm = make_cm_spec(
                self.model, cfg.c_hidden, cfg.n_iface_out, cfg.n_iface_in, cfg.c_recurrent
            )

    # -- phases -------------------------------------------------------------------

    def run_phase(self) -> PhaseReport:
        cfg = self.cfg
        t0 = time.perf_counter()
        hash_before = self.model.weight_hash()
        first_new_trial = self.history.n_trials + 1
        if cfg.variant == "C1":
            metric = self._c1_phase()
            pending = []
        else:
            metric, pending = self._evolution_phase()
        if self.model.weight_hash() != hash_before:
            raise ContractViolation("model weights changed during a controller phase")
        phase_trial_ids = list(range(first_new_trial, self.history.n_trials + 1))
        report, per_trial = self._sleep_phase(phase_trial_ids)
        if pending:
            self._finish_deferred_selection(pending, per_trial)
            metric = self.evo.best.fitness
        intrinsic_total = float(sum(per_trial.values()))
        out = PhaseReport(
            phase=self.phase_idx,
            controller_metric=float(metric),
            code=report,
            intrinsic_total=intrinsic_total,
            duration=time.perf_counter() - t0,
            model_hash=self.model.weight_hash(),
        )
        self.reports.append(out)
        self.phase_idx += 1
        return out

    def stop_reached(self) -> bool:
        recent = self.history.trials[-20:]
        if len(recent) < 20:
            return False
        mean = float(np.mean([sp.external_return for sp in recent]))
        return mean >= self.cfg.stop_fraction * self.optimal

    def run(self, limit: int | None = None) -> list[PhaseReport]:
        """Run phases until the budget (or `limit` phases, for interrupting
        mid-run) is exhausted or the stopping criterion fires."""
        target = self.cfg.phases if limit is None else min(self.cfg.phases, limit)
        while self.phase_idx < target:
            self.run_phase()
            if self.cfg.out_dir:
                self.checkpoint(self.cfg.out_dir)
            if self.stop_reached():
                break
        return self.reports

    # -- persistence -----------------------------------------------------------------

    def checkpoint(self, out_dir) -> None:
        path = Path(out_dir)
        path.mkdir(parents=True, exist_ok=True)
        (path / "config.cfg").write_text(config_to_text(self.cfg))
        (path / "model.txt").write_text(model_to_text(self.model))
        (path / "history.txt").write_text(self.history.save_text())
        (path / "controller.txt").write_text(self._controller_to_text())
        state = {
            "phase_idx": self.phase_idx,
            "trials_done": self.trials_done,
            "rngs": {name: generator_state(rng) for name, rng in self.rngs.items()},
            "reports": [
                {
                    "phase": r.phase,
                    "controller_metric": r.controller_metric,
                    "E": r.code.E,
                    "bits_H": r.code.bits_H,
                    "bits_M": r.code.bits_M,
                    "steps_scored": r.code.steps_scored,
                    "intrinsic_total": r.intrinsic_total,
                    "duration": r.duration,
                    "model_hash": r.model_hash,
                }
                for r in self.reports
            ],
        }
        (path / "state.json").write_text(json.dumps(state, indent=1))

    def _controller_to_text(self) -> str:
        cfg = self.cfg
        lines = [f"controller,v1,variant={cfg.variant}"]
        if cfg.variant == "C1":
            lines.append(f"qshape,{self.q.weights.shape[0]},{self.q.weights.shape[1]}")
            for row in self.q.weights:
                lines.append("qrow," + ",".join(f"{v:.17g}" for v in row))
        else:
            lines.append(f"sigma,{self.evo.sigma:.17g}")
            lines.append(f"generation,{self.evo.generation}")

            def genome_line(tag, g):
                fit = "none" if g.fitness is None else f"{g.fitness:.17g}"
                return f"{tag},{fit}," + ",".join(f"{v:.17g}" for v in g.vector)

            lines.append(genome_line("best", self.evo.best))
            for g in self.evo.population:
                lines.append(genome_line("genome", g))
        return "\n".join(lines) + "\n"

    def _controller_from_text(self, text: str) -> None:
        lines = [ln for ln in text.splitlines() if ln.strip()]
        head = lines[0].split(",")
        if head[:2] != ["controller", "v1"]:
            raise CheckpointError(f"bad controller header: {lines[0]!r}")
        variant = dict(p.split("=") for p in head[2:])["variant"]
        if variant != self.cfg.variant:
            raise CheckpointError(f"checkpoint variant {variant} != config {self.cfg.variant}")
        if variant == "C1":
            rows = []
            for ln in lines[2:]:
                f = ln.split(",")
                if f[0] == "qrow":
                    rows.append([float(v) for v in f[1:]])
            self.q = QFunction(np.array(rows), self.cfg.q_gamma, self.cfg.q_alpha, self.cfg.eps_start)
        else:
            sigma = self.cfg.sigma
            generation = 0
            pop = []
            best = None
            for ln in lines[1:]:
                f = ln.split(",")
                if f[0] == "sigma":
                    sigma = float(f[1])
                elif f[0] == "generation":
                    generation = int(f[1])
                elif f[0] in ("genome", "best"):
                    fit = None if f[1] == "none" else float(f[1])
                    g = Genome(np.array([float(v) for v in f[2:]]), fit)
                    if f[0] == "best":
                        best = g
                    else:
                        pop.append(g)
            self.evo = EvolutionState(population=pop, sigma=sigma, best=best, generation=generation)

    @classmethod
    def restore(cls, out_dir) -> "Orchestrator":
        path = Path(out_dir)
        for fname in ("config.cfg", "model.txt", "history.txt", "controller.txt", "state.json"):
            if not (path / fname).exists():
                raise CheckpointError(f"checkpoint incomplete: missing {fname}")
        try:
            cfg = build_run_config(parse_config_text((path / "config.cfg").read_text()))
            run = cls.__new__(cls)
            run.cfg = cfg
            run.env = make_env(cfg.env)
            run.model = model_from_text((path / "model.txt").read_text())
            run.history = HistoryStore.load((path / "history.txt"))
            state = json.loads((path / "state.json").read_text())
        except CheckpointError:
            raise
        except Exception as e:
            raise CheckpointError(f"corrupt checkpoint in {out_dir}: {e}") from e
        if (run.history.m, run.history.n, run.history.o) != (cfg.env.m, cfg.env.n, cfg.env.o):
            raise CheckpointError(
                f"history dims ({run.history.m},{run.history.n},{run.history.o}) do not match "
                f"environment ({cfg.env.m},{cfg.env.n},{cfg.env.o})"
            )
        run.rngs = {name: restore_generator(state["rngs"][name]) for name in STREAMS}
        run.phase_idx = state["phase_idx"]
        run.trials_done = state["trials_done"]
        run.optimal = optimal_return(cfg.env)
        run.reports = [
            PhaseReport(
                phase=r["phase"],
                controller_metric=r["controller_metric"],
                code=CodeLengthReport(r["E"], r["bits_H"], r["bits_M"], r["steps_scored"]),
                intrinsic_total=r["intrinsic_total"],
                duration=r["duration"],
                model_hash=r["model_hash"],
            )
            for r in state["reports"]
        ]
        if cfg.variant == "C2":
            run.policy_spec = make_policy_spec(markov_dim(run.model), cfg.c_hidden, cfg.env.o)
        elif cfg.variant == "C3":
            run.cm = make_cm_spec(run.model, cfg.c_hidden, cfg.n_iface_out, cfg.n_iface_in, cfg.c_recurrent)
        run._controller_from_text((path / "controller.txt").read_text())
        if cfg.variant == "C1" and run.q.weights.shape != (cfg.env.o, markov_dim(run.model) + 1):
            raise CheckpointError("checkpoint Q-function shape does not match the restored model")
        return run


def run(cfg: RunConfig) -> list[PhaseReport]:
    """Execute the alternating loop for cfg.phases phases (or until the
    controller metric reaches the stopping threshold)."""
    return Orchestrator(cfg).run()


def replace_evo_best(evo: EvolutionState) -> EvolutionState:
    ranked = select_mu(evo.population, len(evo.population))
    return EvolutionState(ranked, evo.sigma, ranked[0], evo.generation)


def evaluate_checkpoint(out_dir, trials: int) -> float:
    """Greedy evaluation of a stored controller: mean external return over
    fresh trials, nothing recorded."""
    run = Orchestrator.restore(out_dir)
    cfg = run.cfg
    returns = []
    for k in range(trials):
        seed = 1_000_000 + k
        if cfg.variant == "C1":
            _, ret = run_q_trial(
                run.env, run.model, run.q, seed, eps=0.0, rng=substream(cfg.master_seed, "eval"), learn=False
            )
        elif cfg.variant == "C2":
            w = run.evo.best.vector
            ret = run_policy_trial(run.env, run.model, lambda s: policy_action(run.policy_spec, w, s), seed)
        else:
            ret = run_cm_trial(run.env, run.model, run.cm, run.evo.best.vector, seed, think_k=cfg.think_k)
        returns.append(ret)
    return float(np.mean(returns))


def export_metrics(out_dir) -> tuple[str, str]:
    """Per-trial and per-phase CSV exports from a checkpoint directory."""
    path = Path(out_dir)
    if not (path / "history.txt").exists() or not (path / "state.json").exists():
        raise CheckpointError(f"no checkpoint in {out_dir}")
    history = HistoryStore.load(path / "history.txt")
    state = json.loads((path / "state.json").read_text())
    phase_rows = ["phase,controller_metric,E,bits_H,bits_M,total,intrinsic_total,duration"]
    for r in state["reports"]:
        total = r["bits_H"] + r["bits_M"]
        phase_rows.append(
            f'{r["phase"]},{r["controller_metric"]:.17g},{r["E"]:.17g},{r["bits_H"]:.17g},'
            f'{r["bits_M"]:.17g},{total:.17g},{r["intrinsic_total"]:.17g},{r["duration"]:.3f}'
        )
    return history.export_trial_returns(), "\n".join(phase_rows) + "\n"
