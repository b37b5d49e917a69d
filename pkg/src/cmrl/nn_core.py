"""Minimal neural substrate: explicit-graph networks with additive and
multiplicative units, forward activation spreading, backprop through time,
and an LSTM cell assembled from these primitives.

Within-step (delay-0) links form an acyclic subgraph evaluated in a
topological level order computed once per spec; recurrence happens only
through delay-1 links reading the previous step's activations. All reals
are float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionMismatch, NumericOverflow, SpecError

KINDS = ("input", "hidden", "output", "bias")
ACTIVATIONS = ("identity", "tanh", "sigmoid")
COMBINES = ("additive", "multiplicative")

# loss_terms callback: (step t >= 1, output activations) -> (loss, dloss/doutputs)
LossTerms = Callable[[int, np.ndarray], tuple[float, np.ndarray]]


@dataclass(frozen=True)
class UnitSpec:
    id: int
    kind: str
    activation: str = "identity"


@dataclass(frozen=True)
class LinkSpec:
    src: int
    dst: int
    widx: int | None  # None = fixed, non-learnable weight
    delay: int = 0
    combine: str = "additive"
    fixed: float | None = None  # weight value when widx is None


@dataclass(frozen=True)
class NetSpec:
    """Explicit network graph. Immutable and hashable so forward plans can
    be compiled once and cached."""

    units: tuple[UnitSpec, ...]
    links: tuple[LinkSpec, ...]
    n_w: int
    # optional additive offsets applied to the uniform weight init, keyed by
    # weight index (used for LSTM forget-gate bias +1)
    init_offsets: tuple[tuple[int, float], ...] = ()

    @property
    def n_u(self) -> int:
        return len(self.units)

    def unit_ids(self, kind: str) -> tuple[int, ...]:
        return tuple(u.id for u in self.units if u.kind == kind)

    @property
    def n_in(self) -> int:
        return len(self.unit_ids("input"))

    @property
    def n_out(self) -> int:
        return len(self.unit_ids("output"))


@dataclass(frozen=True, eq=False)
class NetParams:
    """Weight vector of length n_w. Treated as immutable: training steps
    return fresh instances."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return len(self.weights)


def validate_spec(spec: NetSpec) -> None:
    """Check all structural invariants; raises SpecError on violation."""
    ids = [u.id for u in spec.units]
    if ids != list(range(len(ids))):
        raise SpecError("unit ids must be 0..n_u-1 in listing order")
    for u in spec.units:
        if u.kind not in KINDS:
            raise SpecError(f"unknown unit kind {u.kind!r}")
        if u.activation not in ACTIVATIONS:
            raise SpecError(f"unknown activation {u.activation!r}")
    n_u = spec.n_u
    referenced: set[int] = set()
    combine_of: dict[int, str] = {}
    for lk in spec.links:
        if not (0 <= lk.src < n_u and 0 <= lk.dst < n_u):
            raise SpecError(f"link endpoint out of range: {lk}")
        if spec.units[lk.dst].kind in ("input", "bias"):
            raise SpecError(f"links into {spec.units[lk.dst].kind} unit {lk.dst} are not allowed")
        if lk.delay not in (0, 1):
            raise SpecError(f"delay must be 0 or 1: {lk}")
        if lk.combine not in COMBINES:
            raise SpecError(f"unknown combine {lk.combine!r}")
        if lk.widx is None:
            if lk.fixed is None:
                raise SpecError(f"fixed link without value: {lk}")
        else:
            if not (0 <= lk.widx < spec.n_w):
                raise SpecError(f"weight index {lk.widx} outside [0, {spec.n_w})")
            referenced.add(lk.widx)
        prev = combine_of.setdefault(lk.dst, lk.combine)
        if prev != lk.combine:
            raise SpecError(f"unit {lk.dst} mixes additive and multiplicative incoming links")
    if referenced != set(range(spec.n_w)):
        missing = sorted(set(range(spec.n_w)) - referenced)
        raise SpecError(f"unreferenced weight indices: {missing[:8]}")
    for widx, _ in spec.init_offsets:
        if not (0 <= widx < spec.n_w):
            raise SpecError(f"init offset for unknown weight index {widx}")
    _compile_plan(spec)  # raises SpecError on delay-0 cycles


# ---------------------------------------------------------------------------
# Compiled execution plan


@dataclass
class _LinkGroup:
    src: np.ndarray
    dst: np.ndarray
    widx: np.ndarray  # -1 where fixed
    fixed: np.ndarray  # fixed value where widx == -1, else 0

    def weight_values(self, params_w: np.ndarray) -> np.ndarray:
        w = np.where(self.widx >= 0, params_w[np.maximum(self.widx, 0)], self.fixed)
        return w


@dataclass
class _Level:
    number: int
    unit_ids: np.ndarray
    act_groups: list[tuple[str, np.ndarray]]  # (activation name, unit ids)
    add_d0: _LinkGroup
    add_d1: _LinkGroup
    mul_d0: _LinkGroup
    mul_d1: _LinkGroup


@dataclass
class _Plan:
    n_u: int
    input_ids: np.ndarray
    output_ids: np.ndarray
    bias_ids: np.ndarray
    hidden_ids: np.ndarray
    levels: list[_Level]
    net_init: np.ndarray  # 1.0 for multiplicative units, 0.0 otherwise
    level_of: np.ndarray  # -1 for input/bias units
    # per multiplicative unit: list of (src, delay, widx_or_-1, fixed)
    mult_incoming: dict[int, list[tuple[int, int, int, float]]]
    activation_of: list[str]


def _group(links: list[LinkSpec]) -> _LinkGroup:
    links = sorted(links, key=lambda l: (l.dst, l.src, l.delay, -1 if l.widx is None else l.widx))
    return _LinkGroup(
        src=np.array([l.src for l in links], dtype=np.intp),
        dst=np.array([l.dst for l in links], dtype=np.intp),
        widx=np.array([-1 if l.widx is None else l.widx for l in links], dtype=np.intp),
        fixed=np.array([0.0 if l.fixed is None else l.fixed for l in links], dtype=np.float64),
    )


@lru_cache(maxsize=512)
def _compile_plan(spec: NetSpec) -> _Plan:
    n_u = spec.n_u
    kinds = [u.kind for u in spec.units]
    processed = [i for i in range(n_u) if kinds[i] in ("hidden", "output")]
    incoming: dict[int, list[LinkSpec]] = {i: [] for i in range(n_u)}
    for lk in spec.links:
        incoming[lk.dst].append(lk)

    # level(u) = 1 + max level over delay-0 predecessors that are themselves
    # processed units; Kahn-style relaxation detects within-step cycles
    level = {i: 0 for i in range(n_u)}
    remaining = {
        u: sum(1 for lk in incoming[u] if lk.delay == 0 and kinds[lk.src] in ("hidden", "output"))
        for u in processed
    }
    d0_out: dict[int, list[int]] = {i: [] for i in range(n_u)}
    for lk in spec.links:
        if lk.delay == 0 and kinds[lk.src] in ("hidden", "output") and lk.dst in remaining:
            d0_out[lk.src].append(lk.dst)
    ready = sorted(u for u, c in remaining.items() if c == 0)
    order = []
    while ready:
        u = ready.pop(0)
        order.append(u)
        lv = 1
        for lk in incoming[u]:
            if lk.delay == 0 and kinds[lk.src] in ("hidden", "output"):
                lv = max(lv, level[lk.src] + 1)
        level[u] = lv
        for v in sorted(d0_out[u]):
            remaining[v] -= 1
            if remaining[v] == 0:
                ready.append(v)
        ready.sort()
    if len(order) != len(processed):
        stuck = sorted(set(processed) - set(order))
        raise SpecError(f"delay-0 links form a cycle through units {stuck[:8]}")

    mult_units = {lk.dst for lk in spec.links if lk.combine == "multiplicative"}
    net_init = np.zeros(n_u)
    for u in mult_units:
        net_init[u] = 1.0
    level_of = np.full(n_u, -1, dtype=np.intp)
    for u in processed:
        level_of[u] = level[u]

    levels = []
    for lv in range(1, (max(level[u] for u in processed) + 1) if processed else 1):
        members = sorted(u for u in processed if level[u] == lv)
        if not members:
            continue
        lk_of = lambda d, c: [
            lk for u in members for lk in incoming[u] if lk.delay == d and lk.combine == c
        ]
        acts: dict[str, list[int]] = {}
        for u in members:
            acts.setdefault(spec.units[u].activation, []).append(u)
        levels.append(
            _Level(
                number=lv,
                unit_ids=np.array(members, dtype=np.intp),
                act_groups=[(a, np.array(us, dtype=np.intp)) for a, us in sorted(acts.items())],
                add_d0=_group(lk_of(0, "additive")),
                add_d1=_group(lk_of(1, "additive")),
                mul_d0=_group(lk_of(0, "multiplicative")),
                mul_d1=_group(lk_of(1, "multiplicative")),
            )
        )

    mult_incoming = {
        u: [
            (lk.src, lk.delay, -1 if lk.widx is None else lk.widx, 0.0 if lk.fixed is None else lk.fixed)
            for lk in sorted(incoming[u], key=lambda l: (l.src, l.delay))
        ]
        for u in sorted(mult_units)
    }
    return _Plan(
        n_u=n_u,
        input_ids=np.array(spec.unit_ids("input"), dtype=np.intp),
        output_ids=np.array(spec.unit_ids("output"), dtype=np.intp),
        bias_ids=np.array(spec.unit_ids("bias"), dtype=np.intp),
        hidden_ids=np.array(spec.unit_ids("hidden"), dtype=np.intp),
        levels=levels,
        net_init=net_init,
        level_of=level_of,
        mult_incoming=mult_incoming,
        activation_of=[u.activation for u in spec.units],
    )


def initial_state(spec: NetSpec) -> np.ndarray:
    """Default activation vector at an episode start: zeros, bias at 1."""
    x = np.zeros(spec.n_u)
    for b in spec.unit_ids("bias"):
        x[b] = 1.0
    return x


def _apply_acts(x: np.ndarray, net: np.ndarray, level: _Level) -> None:
    for name, ids in level.act_groups:
        if name == "tanh":
            x[ids] = np.tanh(net[ids])
        elif name == "sigmoid":
            x[ids] = 1.0 / (1.0 + np.exp(-net[ids]))
        else:
            x[ids] = net[ids]


def forward_step(
    spec: NetSpec,
    params: NetParams,
    prev_activations: np.ndarray,
    input: Sequence[float] | np.ndarray,
    injections: dict[int, float] | None = None,
    injection_mode: str = "additive",
) -> np.ndarray:
    """One step of activation spreading.

    Delay-1 links read prev_activations, delay-0 links read current values in
    topological order. `injections` adds (or, in multiplicative mode,
    multiplies) extra terms into the net sums of the named units before their
    activation is applied.
    """
    plan = _compile_plan(spec)
    inp = np.asarray(input, dtype=np.float64)
    prev = np.asarray(prev_activations, dtype=np.float64)
    if inp.shape != (len(plan.input_ids),):
        raise DimensionMismatch(f"expected {len(plan.input_ids)} inputs, got {inp.shape}")
    if prev.shape != (plan.n_u,):
        raise DimensionMismatch(f"expected state of length {plan.n_u}, got {prev.shape}")
    if len(params) != spec.n_w:
        raise DimensionMismatch(f"expected {spec.n_w} weights, got {len(params)}")

    inj_by_level: dict[int, list[tuple[int, float]]] = {}
    if injections:
        for u, v in injections.items():
            lv = int(plan.level_of[u])
            if lv < 0:
                raise DimensionMismatch(f"cannot inject into input/bias unit {u}")
            inj_by_level.setdefault(lv, []).append((u, v))

    pw = params.weights
    x = np.zeros(plan.n_u)
    x[plan.input_ids] = inp
    x[plan.bias_ids] = 1.0
    net = plan.net_init.copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for level in plan.levels:
            for grp, vals_src in ((level.add_d0, x), (level.add_d1, prev)):
                if len(grp.src):
                    np.add.at(net, grp.dst, vals_src[grp.src] * grp.weight_values(pw))
            for grp, vals_src in ((level.mul_d0, x), (level.mul_d1, prev)):
                if len(grp.src):
                    np.multiply.at(net, grp.dst, vals_src[grp.src] * grp.weight_values(pw))
            for u, v in inj_by_level.get(level.number, ()):
                if injection_mode == "additive":
                    net[u] += v
                else:
                    net[u] *= v
            _apply_acts(x, net, level)
    if not np.all(np.isfinite(x)):
        bad = int(np.flatnonzero(~np.isfinite(x))[0])
        raise NumericOverflow(bad)
    return x


def run_episode(
    spec: NetSpec, params: NetParams, inputs: Sequence[np.ndarray]
) -> np.ndarray:
    """Activation trace over an episode: row 0 is the initial state, row t the
    activations after consuming inputs[t-1]."""
    acts = np.zeros((len(inputs) + 1, spec.n_u))
    acts[0] = initial_state(spec)
    for t, inp in enumerate(inputs, start=1):
        acts[t] = forward_step(spec, params, acts[t - 1], inp)
    return acts


def _fprime(activation: str, y: np.ndarray) -> np.ndarray:
    if activation == "tanh":
        return 1.0 - y * y
    if activation == "sigmoid":
        return y * (1.0 - y)
    return np.ones_like(y)


def bptt(
    spec: NetSpec,
    params: NetParams,
    inputs: Sequence[np.ndarray],
    loss_terms: LossTerms,
) -> tuple[float, np.ndarray]:
    """Total loss and its exact gradient w.r.t. the weight vector.

    Gradients accumulate over shared weight indices and over time; fixed
    links propagate error but contribute no weight gradient.
    """
    plan = _compile_plan(spec)
    T = len(inputs)
    acts = run_episode(spec, params, inputs)
    pw = params.weights

    total = 0.0
    dout = np.zeros((T + 1, len(plan.output_ids)))
    for t in range(1, T + 1):
        l, g = loss_terms(t, acts[t][plan.output_ids])
        g = np.asarray(g, dtype=np.float64)
        if g.shape != (len(plan.output_ids),):
            raise DimensionMismatch("loss gradient length must match output unit count")
        total += float(l)
        dout[t] = g

    gw = np.zeros(spec.n_w)
    dx = np.zeros((T + 1, plan.n_u))
    for t in range(T, 0, -1):
        dx[t][plan.output_ids] += dout[t]
        for level in reversed(plan.levels):
            ids = level.unit_ids
            gnet = np.zeros(plan.n_u)
            for name, aids in level.act_groups:
                gnet[aids] = dx[t][aids] * _fprime(name, acts[t][aids])
            for grp, src_step in ((level.add_d0, t), (level.add_d1, t - 1)):
                if not len(grp.src):
                    continue
                g_at = gnet[grp.dst]
                w = grp.weight_values(pw)
                xs = acts[src_step][grp.src]
                learn = grp.widx >= 0
                if learn.any():
                    np.add.at(gw, grp.widx[learn], (g_at * xs)[learn])
                np.add.at(dx[src_step], grp.src, g_at * w)
            # multiplicative units need leave-one-out products per link
            for u in ids:
                inc = plan.mult_incoming.get(int(u))
                if not inc:
                    continue
                g = gnet[u]
                terms = []
                for src, delay, widx, fixed in inc:
                    xv = acts[t - delay][src]
                    wv = pw[widx] if widx >= 0 else fixed
                    terms.append((src, delay, widx, xv, wv, xv * wv))
                zeros = [k for k, tm in enumerate(terms) if tm[5] == 0.0]
                if len(zeros) == 0:
                    full = 1.0
                    for tm in terms:
                        full *= tm[5]
                    loo = [full / tm[5] for tm in terms]
                elif len(zeros) == 1:
                    prod_rest = 1.0
                    for k, tm in enumerate(terms):
                        if k != zeros[0]:
                            prod_rest *= tm[5]
                    loo = [prod_rest if k == zeros[0] else 0.0 for k in range(len(terms))]
                else:
                    loo = [0.0] * len(terms)
                for (src, delay, widx, xv, wv, _), lo in zip(terms, loo):
                    if widx >= 0:
                        gw[widx] += g * xv * lo
                    dx[t - delay][src] += g * wv * lo
    return total, gw


def bptt_gradient(
    spec: NetSpec,
    params: NetParams,
    inputs: Sequence[np.ndarray],
    loss_terms: LossTerms,
) -> np.ndarray:
    """Gradient of the total episode loss w.r.t. the weight vector."""
    return bptt(spec, params, inputs, loss_terms)[1]


def squared_error_terms(targets: dict[int, np.ndarray]) -> LossTerms:
    """Loss Σ_t ||y(t) - d(t)||² over the steps present in `targets`."""

    def terms(t: int, y: np.ndarray) -> tuple[float, np.ndarray]:
        d = targets.get(t)
        if d is None:
            return 0.0, np.zeros_like(y)
        r = y - d
        return float(r @ r), 2.0 * r

    return terms


def sgd_step(params: NetParams, gradient: np.ndarray, learning_rate: float) -> NetParams:
    """w ← w − learning_rate · g, elementwise."""
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != params.weights.shape:
        raise DimensionMismatch(f"gradient length {g.shape} != weights {params.weights.shape}")
    if not np.all(np.isfinite(g)):
        raise NumericOverflow(int(np.flatnonzero(~np.isfinite(g))[0]))
    with np.errstate(over="ignore"):
        return NetParams(params.weights - learning_rate * g)


def init_params(spec: NetSpec, rng: np.random.Generator, scale: float = 0.1) -> NetParams:
    """Uniform init in [−scale, scale] plus any per-index offsets the spec
    carries (e.g. LSTM forget-gate bias)."""
    w = rng.uniform(-scale, scale, size=spec.n_w)
    for widx, off in spec.init_offsets:
        w[widx] += off
    return NetParams(w)


# ---------------------------------------------------------------------------
# LSTM construction


def make_lstm_spec(n_in: int, n_cells: int, n_out: int, out_activation: str = "tanh") -> NetSpec:
    """LSTM with input/forget/output gates built from additive sigmoid units
    and multiplicative identity units.

    Per cell: gates i, f, o and cell input g are additive units over
    [inputs, previous cell outputs, bias]; the cell state keeps a fixed
    delay-1 self-link of weight 1 (the carousel) and receives the
    forget-gated correction (f−1)·c(t−1) plus i·g through fixed links, so
    c(t) = f·c(t−1) + i·g with the carousel excluded from n_w.
    """
    if min(n_in, n_cells, n_out) < 1:
        raise SpecError("all counts must be >= 1")
    units: list[UnitSpec] = []
    links: list[LinkSpec] = []
    offsets: list[tuple[int, float]] = []
    uid = 0

    def add_unit(kind: str, activation: str) -> int:
        nonlocal uid
        units.append(UnitSpec(uid, kind, activation))
        uid += 1
        return uid - 1

    inputs = [add_unit("input", "identity") for _ in range(n_in)]
    bias = add_unit("bias", "identity")

    widx = 0

    def learnable(src: int, dst: int, delay: int = 0) -> None:
        nonlocal widx
        links.append(LinkSpec(src, dst, widx, delay, "additive"))
        widx += 1

    def fixed(src: int, dst: int, value: float, delay: int = 0, combine: str = "additive") -> None:
        links.append(LinkSpec(src, dst, None, delay, combine, fixed=value))

    cells = []
    for _ in range(n_cells):
        i = add_unit("hidden", "sigmoid")
        f = add_unit("hidden", "sigmoid")
        g = add_unit("hidden", "tanh")
        o = add_unit("hidden", "sigmoid")
        fshift = add_unit("hidden", "identity")
        fm1c = add_unit("hidden", "identity")
        ig = add_unit("hidden", "identity")
        c = add_unit("hidden", "identity")
        ctanh = add_unit("hidden", "tanh")
        h = add_unit("hidden", "identity")
        cells.append(dict(i=i, f=f, g=g, o=o, fshift=fshift, fm1c=fm1c, ig=ig, c=c, ctanh=ctanh, h=h))

    outs = [add_unit("output", out_activation) for _ in range(n_out)]

    for cell in cells:
        for gate in (cell["i"], cell["f"], cell["g"], cell["o"]):
            for x in inputs:
                learnable(x, gate, delay=0)
            for other in cells:
                learnable(other["h"], gate, delay=1)
            if gate == cell["f"]:
                offsets.append((widx, 1.0))
            learnable(bias, gate, delay=0)
        fixed(cell["f"], cell["fshift"], 1.0)
        fixed(bias, cell["fshift"], -1.0)
        fixed(cell["fshift"], cell["fm1c"], 1.0, combine="multiplicative")
        fixed(cell["c"], cell["fm1c"], 1.0, delay=1, combine="multiplicative")
        fixed(cell["i"], cell["ig"], 1.0, combine="multiplicative")
        fixed(cell["g"], cell["ig"], 1.0, combine="multiplicative")
        fixed(cell["c"], cell["c"], 1.0, delay=1)  # carousel self-link
        fixed(cell["fm1c"], cell["c"], 1.0)
        fixed(cell["ig"], cell["c"], 1.0)
        fixed(cell["c"], cell["ctanh"], 1.0)
        fixed(cell["o"], cell["h"], 1.0, combine="multiplicative")
        fixed(cell["ctanh"], cell["h"], 1.0, combine="multiplicative")

    for out in outs:
        for cell in cells:
            learnable(cell["h"], out, delay=0)
        learnable(bias, out, delay=0)

    spec = NetSpec(units=tuple(units), links=tuple(links), n_w=widx, init_offsets=tuple(offsets))
    validate_spec(spec)
    return spec


# ---------------------------------------------------------------------------
# Text serialization (checkpoint format)


def spec_to_text(spec: NetSpec) -> str:
    lines = ["netspec,v1," + str(spec.n_w)]
    for u in spec.units:
        lines.append(f"unit,{u.id},{u.kind},{u.activation}")
    for l in spec.links:
        wi = "F" if l.widx is None else str(l.widx)
        fv = "-" if l.fixed is None else f"{l.fixed:.17g}"
        lines.append(f"link,{l.src},{l.dst},{wi},{l.delay},{l.combine},{fv}")
    for widx, off in spec.init_offsets:
        lines.append(f"offset,{widx},{off:.17g}")
    lines.append("end,netspec")
    return "\n".join(lines) + "\n"


def spec_from_text(text: str) -> NetSpec:
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    head = lines[0].split(",")
    if head[:2] != ["netspec", "v1"]:
        raise SpecError(f"bad netspec header: {lines[0]!r}")
    n_w = int(head[2])
    units, links, offsets = [], [], []
    for ln in lines[1:]:
        f = ln.split(",")
        if f[0] == "unit":
            units.append(UnitSpec(int(f[1]), f[2], f[3]))
        elif f[0] == "link":
            widx = None if f[3] == "F" else int(f[3])
            fixed = None if f[6] == "-" else float(f[6])
            links.append(LinkSpec(int(f[1]), int(f[2]), widx, int(f[4]), f[5], fixed))
        elif f[0] == "offset":
            offsets.append((int(f[1]), float(f[2])))
        elif f[0] == "end":
            break
        else:
            raise SpecError(f"unknown netspec line: {ln!r}")
    spec = NetSpec(tuple(units), tuple(links), n_w, tuple(offsets))
    validate_spec(spec)
    return spec


def params_to_text(params: NetParams) -> str:
    lines = [f"netparams,v1,{len(params)}"]
    for i, v in enumerate(params.weights):
        lines.append(f"w,{i},{v:.17g}")
    lines.append("end,netparams")
    return "\n".join(lines) + "\n"


def params_from_text(text: str) -> NetParams:
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    head = lines[0].split(",")
    if head[:2] != ["netparams", "v1"]:
        raise SpecError(f"bad netparams header: {lines[0]!r}")
    n = int(head[2])
    w = np.zeros(n)
    for ln in lines[1:]:
        f = ln.split(",")
        if f[0] == "w":
            w[int(f[1])] = float(f[2])
        elif f[0] == "end":
            break
    return NetParams(w)
