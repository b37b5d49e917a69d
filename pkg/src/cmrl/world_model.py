"""Recurrent predictive world model trained to shorten a two-part code:
bits to describe the model plus bits to encode the history's deviations
from its predictions.

Residuals d = pred - sense are coded under a discretized zero-centered
Gaussian, so large errors cost more bits than small ones; model weights are
coded either the same way or by a flat per-nonzero-weight cost. Structural
candidates (grow/prune units and links) are retrained and kept only if they
strictly shorten the total code on the scoring spans.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import nn_core
from .errors import ContractViolation, DimensionMismatch, NumericOverflow, SpecError
from .history import HistoryStore, StepRecord, TrialSpan
from .nn_core import LinkSpec, NetParams, NetSpec, UnitSpec

LOG2E = 1.0 / math.log(2.0)


@dataclass(frozen=True)
class CodingScheme:
    sigma_e: float = 0.1
    delta_e: float = 1.0 / 256
    weight_scheme: str = "gaussian"  # "gaussian" | "count_based"
    sigma_w: float = 1.0
    delta_w: float = 1.0 / 256
    bits_per_weight: int = 16
    zero_weight_threshold: float = 1e-3

    def __post_init__(self):
        if min(self.sigma_e, self.delta_e, self.sigma_w, self.delta_w) <= 0:
            raise ContractViolation("coding scales must be positive")
        if self.delta_e > self.sigma_e or self.delta_w > self.sigma_w:
            raise ContractViolation("quantization step must not exceed coding scale")
        if self.weight_scheme not in ("gaussian", "count_based"):
            raise ContractViolation(f"unknown weight coding scheme {self.weight_scheme!r}")


@dataclass(frozen=True)
class CodeLengthReport:
    E: float
    bits_H: float
    bits_M: float
    steps_scored: int

    @property
    def total(self) -> float:
        return self.bits_M + self.bits_H


@dataclass(frozen=True)
class WorldModel:
    spec: NetSpec
    params: NetParams
    coding: CodingScheme
    m: int
    n: int
    o: int

    def __post_init__(self):
        if self.spec.n_in != self.m + self.n + self.o:
            raise DimensionMismatch("model must have m+n+o input units")
        if self.spec.n_out != self.m + self.n:
            raise DimensionMismatch("model must have m+n output units")

    @property
    def h(self) -> int:
        return len(self.spec.unit_ids("hidden"))

    @property
    def hidden_ids(self) -> tuple[int, ...]:
        return self.spec.unit_ids("hidden")

    def weight_hash(self) -> str:
        import hashlib

        return hashlib.sha256(self.params.weights.tobytes()).hexdigest()


@dataclass(frozen=True)
class ModelState:
    """Controller-facing state: full activation vector plus the current
    prediction of the sense vector."""

    acts: np.ndarray
    pred: np.ndarray

    def hidden(self, model: WorldModel) -> np.ndarray:
        return self.acts[list(model.hidden_ids)]


@dataclass(frozen=True)
class SleepResult:
    model: WorldModel
    before: CodeLengthReport
    after: CodeLengthReport
    diverged: bool = False


def make_world_model(
    m: int, n: int, o: int, h: int, rng: np.random.Generator, coding: CodingScheme | None = None
) -> WorldModel:
    """Fully connected recurrent net: m+n+o inputs, h tanh hidden units with
    delay-1 recurrence, m+n tanh outputs. Hidden units are listed last so
    structural growth appends ids without renumbering inputs or outputs."""
    if h < 1:
        raise DimensionMismatch("h must be >= 1")
    units = []
    uid = 0
    for _ in range(m + n + o):
        units.append(UnitSpec(uid, "input", "identity"))
        uid += 1
    bias = uid
    units.append(UnitSpec(uid, "bias", "identity"))
    uid += 1
    outs = []
    for _ in range(m + n):
        units.append(UnitSpec(uid, "output", "tanh"))
        outs.append(uid)
        uid += 1
    hid = []
    for _ in range(h):
        units.append(UnitSpec(uid, "hidden", "tanh"))
        hid.append(uid)
        uid += 1

    links = []
    w = 0
    for hu in hid:
        for src in range(m + n + o):
            links.append(LinkSpec(src, hu, w))
            w += 1
        links.append(LinkSpec(bias, hu, w))
        w += 1
        for src in hid:
            links.append(LinkSpec(src, hu, w, delay=1))
            w += 1
    for ou in outs:
        for src in hid:
            links.append(LinkSpec(src, ou, w))
            w += 1
        links.append(LinkSpec(bias, ou, w))
        w += 1
    spec = NetSpec(tuple(units), tuple(links), w)
    nn_core.validate_spec(spec)
    return WorldModel(spec, nn_core.init_params(spec, rng), coding or CodingScheme(), m, n, o)


def initial_model_state(model: WorldModel) -> ModelState:
    """Hidden activations and prediction at a trial start: zero vectors."""
    return ModelState(nn_core.initial_state(model.spec), np.zeros(model.m + model.n))


def predict_step(model: WorldModel, state: ModelState | None, all_t: np.ndarray) -> ModelState:
    """Consume all(t) = (in, r, out) and produce the prediction of the next
    sense vector along with the updated recurrent state."""
    if state is None:
        state = initial_model_state(model)
    all_t = np.asarray(all_t, dtype=np.float64)
    if all_t.shape != (model.m + model.n + model.o,):
        raise DimensionMismatch(f"all(t) must have length {model.m + model.n + model.o}")
    acts = nn_core.forward_step(model.spec, model.params, state.acts, all_t)
    pred = acts[list(model.spec.unit_ids("output"))]
    return ModelState(acts, pred)


def replay_residuals(model: WorldModel, records: list[StepRecord]) -> np.ndarray:
    """Signed residuals pred - sense over one trial, hidden state starting
    from zeros; the first step is scored against the default zero
    prediction."""
    residuals = np.zeros((len(records), model.m + model.n))
    state = initial_model_state(model)
    for i, rec in enumerate(records):
        residuals[i] = state.pred - rec.sense
        if i + 1 < len(records):
            state = predict_step(model, state, rec.all_vec)
    return residuals


def prediction_error(model: WorldModel, history: HistoryStore, spans: list[TrialSpan]) -> float:
    """E = sum of squared prediction deviations over the replayed spans,
    hidden state reset to zeros at each trial boundary."""
    if not spans:
        raise ContractViolation("need at least one span")
    total = 0.0
    for span in spans:
        d = replay_residuals(model, history.replay(span))
        total += float((d * d).sum())
    return total


def residual_code_bits(residuals: np.ndarray, coding: CodingScheme) -> float:
    """Per-residual cost -log2(delta_e * phi(d/sigma_e) / sigma_e), clamped
    below at zero."""
    base = math.log2(coding.sigma_e * math.sqrt(2 * math.pi) / coding.delta_e)
    with np.errstate(over="ignore"):
        bits = base + (residuals / coding.sigma_e) ** 2 * (0.5 * LOG2E)
    return float(np.maximum(bits, 0.0).sum())


def weight_code_bits(params: NetParams, coding: CodingScheme) -> float:
    w = params.weights
    if coding.weight_scheme == "count_based":
        return float(coding.bits_per_weight * int((np.abs(w) > coding.zero_weight_threshold).sum()))
    base = math.log2(coding.sigma_w * math.sqrt(2 * math.pi) / coding.delta_w)
    with np.errstate(over="ignore"):
        bits = base + (w / coding.sigma_w) ** 2 * (0.5 * LOG2E)
    return float(np.maximum(bits, 0.0).sum())


def code_length(model: WorldModel, history: HistoryStore, spans: list[TrialSpan]) -> CodeLengthReport:
    """Two-part code: bits_M for the weights plus bits_H for the prediction
    residuals on the given spans. Pure: no side effects on model or store."""
    E = 0.0
    bits_H = 0.0
    steps = 0
    for span in spans:
        d = replay_residuals(model, history.replay(span))
        E += float((d * d).sum())
        bits_H += residual_code_bits(d, model.coding)
        steps += len(d)
    return CodeLengthReport(E=E, bits_H=bits_H, bits_M=weight_code_bits(model.params, model.coding), steps_scored=steps)


def select_scoring_spans(history: HistoryStore, k: int, rng: np.random.Generator) -> list[TrialSpan]:
    """Seeded sample of trials that always contains the latest one."""
    return history.sample_trials(k, "always_include_latest", rng)


def _span_loss_grad(model: WorldModel, records: list[StepRecord]) -> tuple[float, np.ndarray]:
    if len(records) < 2:
        return 0.0, np.zeros(model.spec.n_w)
    inputs = [rec.all_vec for rec in records[:-1]]
    targets = {t: records[t].sense for t in range(1, len(records))}
    return nn_core.bptt(model.spec, model.params, inputs, nn_core.squared_error_terms(targets))


def sleep_train(
    model: WorldModel,
    history: HistoryStore,
    epochs: int,
    lr: float,
    replay_rule: str = "always_include_latest",
    rng: np.random.Generator | None = None,
    weight_penalty: float = 1e-4,
    sample_k: int = 4,
    scoring_spans: list[TrialSpan] | None = None,
    train_pool: list[TrialSpan] | None = None,
) -> SleepResult:
    """Gradient descent on E + weight_penalty*sum(w^2) over replayed trials.

    The descent step is normalized by the number of scored steps so the
    learning rate stays meaningful as the history grows. New weights are
    adopted unconditionally (unlike structural changes); on divergence the
    last finite model is returned with a flag. The before and after reports
    are scored on the same spans.

    When train_pool is given, each epoch replays a uniform sample from that
    pool instead of consulting replay_rule (used to keep compression-progress
    scoring honest: train on older trials, score the newest).
    """
    rng = rng or np.random.default_rng(0)
    if scoring_spans is None:
        scoring_spans = select_scoring_spans(history, sample_k, rng)
    before = code_length(model, history, scoring_spans)
    current = model
    diverged = False
    for _ in range(epochs):
        if train_pool is not None:
            picked = sorted(int(i) for i in rng.permutation(len(train_pool))[:sample_k])
            spans = [train_pool[i] for i in picked]
        else:
            spans = history.sample_trials(sample_k, replay_rule, rng)
        grad = np.zeros(current.spec.n_w)
        loss = 0.0
        scored = 0
        try:
            for span in spans:
                l, g = _span_loss_grad(current, history.replay(span))
                loss += l
                grad += g
                scored += max(len(span) - 1, 0)
        except NumericOverflow:
            diverged = True
            break
        grad += 2.0 * weight_penalty * current.params.weights
        if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
            diverged = True
            break
        step = lr / max(scored, 1)
        new_params = nn_core.sgd_step(current.params, grad, step)
        if not np.all(np.isfinite(new_params.weights)):
            diverged = True
            break
        current = replace(current, params=new_params)
    after = code_length(current, history, scoring_spans)
    return SleepResult(model=current, before=before, after=after, diverged=diverged)


# ---------------------------------------------------------------------------
# Sequential network construction: grow/prune proposals


MUTATION_KINDS = ("add_unit", "add_link", "prune_link", "prune_unit")


def _outputs_reachable_from_inputs(spec: NetSpec) -> bool:
    adj: dict[int, set[int]] = {}
    for lk in spec.links:
        adj.setdefault(lk.src, set()).add(lk.dst)
    frontier = list(spec.unit_ids("input"))
    seen = set(frontier)
    while frontier:
        u = frontier.pop()
        for v in adj.get(u, ()):
            if v not in seen:
                seen.add(v)
                frontier.append(v)
    return all(ou in seen for ou in spec.unit_ids("output"))


def _compact_weights(links: list[LinkSpec], weights: np.ndarray) -> tuple[list[LinkSpec], np.ndarray]:
    used = sorted({lk.widx for lk in links if lk.widx is not None})
    remap = {w: i for i, w in enumerate(used)}
    new_links = [
        lk if lk.widx is None else replace(lk, widx=remap[lk.widx]) for lk in links
    ]
    return new_links, weights[used]


def _rebuild(model: WorldModel, units, links, weights) -> WorldModel:
    spec = NetSpec(tuple(units), tuple(links), len(weights), ())
    nn_core.validate_spec(spec)
    return replace(model, spec=spec, params=NetParams(weights))


def _mutate_add_unit(model: WorldModel, rng: np.random.Generator) -> WorldModel:
    spec = model.spec
    new_id = spec.n_u
    units = list(spec.units) + [UnitSpec(new_id, "hidden", "tanh")]
    links = list(spec.links)
    weights = list(model.params.weights)

    def fresh(src, dst, delay):
        links.append(LinkSpec(src, dst, len(weights), delay))
        weights.append(float(rng.uniform(-0.1, 0.1)))

    inputs = spec.unit_ids("input")
    bias = spec.unit_ids("bias")[0]
    hidden = spec.unit_ids("hidden")
    outputs = spec.unit_ids("output")
    picked = [u for u in inputs if rng.random() < 0.5]
    for src in picked or [int(rng.choice(inputs))]:
        fresh(src, new_id, 0)
    fresh(bias, new_id, 0)
    for src in (*hidden, new_id):
        if rng.random() < 0.5:
            fresh(src, new_id, 1)
    targets = [u for u in outputs if rng.random() < 0.5]
    for dst in targets or [int(rng.choice(outputs))]:
        fresh(new_id, dst, 0)
    for dst in hidden:
        if rng.random() < 0.25:
            fresh(new_id, dst, 1)
    return _rebuild(model, units, links, np.array(weights))


def _mutate_add_link(model: WorldModel, rng: np.random.Generator) -> WorldModel | None:
    spec = model.spec
    existing = {(lk.src, lk.dst, lk.delay) for lk in spec.links}
    dst_pool = spec.unit_ids("hidden") + spec.unit_ids("output")
    src_pool = tuple(range(spec.n_u))
    for _ in range(64):
        src = int(rng.choice(src_pool))
        dst = int(rng.choice(dst_pool))
        delay = int(rng.integers(0, 2))
        if (src, dst, delay) in existing:
            continue
        links = list(spec.links) + [LinkSpec(src, dst, spec.n_w, delay)]
        weights = np.append(model.params.weights, rng.uniform(-0.1, 0.1))
        try:
            return _rebuild(model, list(spec.units), links, weights)
        except SpecError:
            continue  # delay-0 cycle or mixed combine; resample
    return None


def _smallest_learnable_link(model: WorldModel) -> int | None:
    best_i, best_w = None, math.inf
    for i, lk in enumerate(model.spec.links):
        if lk.widx is None:
            continue
        w = abs(model.params.weights[lk.widx])
        if w < best_w:
            best_i, best_w = i, w
    return best_i


def _mutate_prune_link(model: WorldModel) -> WorldModel | None:
    spec = model.spec
    i = _smallest_learnable_link(model)
    if i is None:
        return None
    links = [lk for j, lk in enumerate(spec.links) if j != i]
    links, weights = _compact_weights(links, model.params.weights)
    if len(weights) == 0:
        return None
    candidate_spec = NetSpec(tuple(spec.units), tuple(links), len(weights), ())
    if not _outputs_reachable_from_inputs(candidate_spec):
        return None
    return _rebuild(model, list(spec.units), links, weights)


def _mutate_prune_unit(model: WorldModel, prune_eps: float, victim_pos: list[int] | None = None) -> WorldModel | None:
    spec = model.spec
    candidates = []
    for u in spec.unit_ids("hidden"):
        incident = [
            abs(model.params.weights[lk.widx])
            for lk in spec.links
            if lk.widx is not None and (lk.src == u or lk.dst == u)
        ]
        if incident and max(incident) <= prune_eps:
            candidates.append((max(incident), u))
    if not candidates or len(spec.unit_ids("hidden")) <= 1:
        return None
    _, victim = min(candidates)
    if victim_pos is not None:
        victim_pos.append(spec.unit_ids("hidden").index(victim))
    id_map = {}
    units = []
    for old in spec.units:
        if old.id == victim:
            continue
        id_map[old.id] = len(units)
        units.append(UnitSpec(len(units), old.kind, old.activation))
    links = [
        replace(lk, src=id_map[lk.src], dst=id_map[lk.dst])
        for lk in spec.links
        if lk.src != victim and lk.dst != victim
    ]
    links, weights = _compact_weights(links, model.params.weights)
    if len(weights) == 0:
        return None
    candidate_spec = NetSpec(tuple(units), tuple(links), len(weights), ())
    if not _outputs_reachable_from_inputs(candidate_spec):
        return None
    return _rebuild(model, units, links, weights)


def propose_structural_change(
    model: WorldModel,
    rng: np.random.Generator,
    kind: str | None = None,
    prune_eps: float = 0.02,
    out_info: dict | None = None,
) -> WorldModel:
    """One mutation: add a hidden unit, add a link, prune the smallest-|w|
    link, or prune a hidden unit whose weights are all small. The choice is
    uniform over the applicable mutations; inapplicable prunes (e.g. ones
    that would disconnect inputs from outputs) drop out of the menu.

    When out_info is given it receives the applied mutation kind and, for
    unit prunes, the pruned hidden unit's position, so controllers can remap
    their state-feature dimensions."""
    built: dict[str, WorldModel | None] = {}
    pruned_pos: dict[str, int] = {}

    def attempt(name: str) -> WorldModel | None:
        if name not in built:
            if name == "add_unit":
                built[name] = _mutate_add_unit(model, rng)
            elif name == "add_link":
                built[name] = _mutate_add_link(model, rng)
            elif name == "prune_link":
                built[name] = _mutate_prune_link(model)
            elif name == "prune_unit":
                victim_pos: list[int] = []
                built[name] = _mutate_prune_unit(model, prune_eps, victim_pos)
                if victim_pos:
                    pruned_pos[name] = victim_pos[0]
            else:
                raise ValueError(f"unknown mutation kind {name!r}")
        return built[name]

    def finish(name: str, result: WorldModel) -> WorldModel:
        if out_info is not None:
            out_info["kind"] = name
            if name == "prune_unit":
                out_info["pruned_hidden_pos"] = pruned_pos[name]
        return result

    if kind is not None:
        result = attempt(kind)
        if result is None:
            raise ContractViolation(f"mutation {kind!r} not applicable")
        return finish(kind, result)

    # draw the menu first so rng consumption stays uniform across models
    order = list(rng.permutation(len(MUTATION_KINDS)))
    for idx in order:
        name = MUTATION_KINDS[idx]
        result = attempt(name)
        if result is not None:
            return finish(name, result)
    if out_info is not None:
        out_info["kind"] = None
    return model  # nothing applicable; hand back the incumbent unchanged


def accept_if_shorter(
    model: WorldModel,
    candidate: WorldModel,
    history: HistoryStore,
    retrain_epochs: int,
    rng: np.random.Generator,
    lr: float = 0.05,
    weight_penalty: float = 1e-4,
    sample_k: int = 4,
    scoring_spans: list[TrialSpan] | None = None,
) -> WorldModel:
    """Sleep-train the candidate, then keep it only if its total code length
    on the scoring spans is strictly below the incumbent's."""
    if scoring_spans is None:
        scoring_spans = select_scoring_spans(history, sample_k, rng)
    incumbent_report = code_length(model, history, scoring_spans)
    trained = sleep_train(
        candidate,
        history,
        retrain_epochs,
        lr,
        rng=rng,
        weight_penalty=weight_penalty,
        sample_k=sample_k,
        scoring_spans=scoring_spans,
    )
    if trained.diverged:
        return model
    if trained.after.total < incumbent_report.total:
        return trained.model
    return model


# ---------------------------------------------------------------------------
# Checkpoint text format


def model_to_text(model: WorldModel) -> str:
    c = model.coding
    head = (
        f"worldmodel,v1,m={model.m},n={model.n},o={model.o}\n"
        f"coding,sigma_e={c.sigma_e:.17g},delta_e={c.delta_e:.17g},scheme={c.weight_scheme},"
        f"sigma_w={c.sigma_w:.17g},delta_w={c.delta_w:.17g},bits_per_weight={c.bits_per_weight},"
        f"zero_weight_threshold={c.zero_weight_threshold:.17g}\n"
    )
    return head + nn_core.spec_to_text(model.spec) + nn_core.params_to_text(model.params)


def model_from_text(text: str) -> WorldModel:
    lines = text.splitlines()
    head = lines[0].split(",")
    if head[:2] != ["worldmodel", "v1"]:
        raise SpecError(f"bad worldmodel header: {lines[0]!r}")
    dims = dict(p.split("=") for p in head[2:])
    cparts = dict(p.split("=") for p in lines[1].split(",")[1:])
    coding = CodingScheme(
        sigma_e=float(cparts["sigma_e"]),
        delta_e=float(cparts["delta_e"]),
        weight_scheme=cparts["scheme"],
        sigma_w=float(cparts["sigma_w"]),
        delta_w=float(cparts["delta_w"]),
        bits_per_weight=int(cparts["bits_per_weight"]),
        zero_weight_threshold=float(cparts["zero_weight_threshold"]),
    )
    rest = "\n".join(lines[2:])
    end = rest.index("end,netspec") + len("end,netspec")
    spec = nn_core.spec_from_text(rest[:end])
    params = nn_core.params_from_text(rest[end:])
    return WorldModel(spec, params, coding, int(dims["m"]), int(dims["n"]), int(dims["o"]))
