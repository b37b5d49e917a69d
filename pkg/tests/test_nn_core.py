import numpy as np
import pytest

from cmrl.errors import DimensionMismatch, NumericOverflow, SpecError
from cmrl.nn_core import (
    LinkSpec,
    NetParams,
    NetSpec,
    UnitSpec,
    bptt,
    bptt_gradient,
    forward_step,
    init_params,
    initial_state,
    make_lstm_spec,
    params_from_text,
    params_to_text,
    run_episode,
    sgd_step,
    spec_from_text,
    spec_to_text,
    squared_error_terms,
    validate_spec,
)
from helpers import fd_gradient, random_episode, random_spec, rel_err


def _chain_spec(weight=None, activation="identity"):
    """input -> single output unit through one delay-0 link."""
    units = (UnitSpec(0, "input"), UnitSpec(1, "output", activation))
    links = (LinkSpec(0, 1, 0 if weight is None else None, 0, "additive", fixed=weight),)
    return NetSpec(units, links, 1 if weight is None else 0)


def test_identity_chain():
    spec = _chain_spec()
    out = forward_step(spec, NetParams([1.0]), initial_state(spec), [0.7])
    assert out[1] == pytest.approx(0.7)


def test_additive_tanh_symmetry():
    units = (UnitSpec(0, "input"), UnitSpec(1, "input"), UnitSpec(2, "output", "tanh"))
    links = (LinkSpec(0, 2, 0), LinkSpec(1, 2, 1))
    spec = NetSpec(units, links, 2)
    out = forward_step(spec, NetParams([1.0, 1.0]), initial_state(spec), [0.5, -0.5])
    assert out[2] == 0.0


def test_multiplicative_unit_product():
    units = (UnitSpec(0, "input"), UnitSpec(1, "input"), UnitSpec(2, "output", "identity"))
    links = (
        LinkSpec(0, 2, 0, 0, "multiplicative"),
        LinkSpec(1, 2, 1, 0, "multiplicative"),
    )
    spec = NetSpec(units, links, 2)
    out = forward_step(spec, NetParams([1.0, 1.0]), initial_state(spec), [2.0, 3.0])
    assert out[2] == pytest.approx(6.0)


def test_multiplicative_empty_product_is_one():
    units = (UnitSpec(0, "input"), UnitSpec(1, "output", "identity"), UnitSpec(2, "output", "identity"))
    # unit 2 multiplicative with a single link; unit 1 has none at all -> f(0)
    links = (LinkSpec(0, 2, 0, 0, "multiplicative"),)
    spec = NetSpec(units, links, 1)
    out = forward_step(spec, NetParams([2.0]), initial_state(spec), [3.0])
    assert out[1] == 0.0
    assert out[2] == pytest.approx(6.0)


def test_dimension_mismatch_rejected():
    spec = _chain_spec()
    with pytest.raises(DimensionMismatch):
        forward_step(spec, NetParams([1.0]), initial_state(spec), [0.1, 0.2])
    with pytest.raises(DimensionMismatch):
        forward_step(spec, NetParams([1.0]), np.zeros(5), [0.1])


def test_overflow_names_unit():
    units = (UnitSpec(0, "input"), UnitSpec(1, "output", "identity"))
    links = (LinkSpec(0, 1, 0),)
    spec = NetSpec(units, links, 1)
    with pytest.raises(NumericOverflow) as e:
        forward_step(spec, NetParams([1e308]), initial_state(spec), [1e10])
    assert e.value.unit_id == 1


def test_delay0_cycle_rejected():
    units = (UnitSpec(0, "input"), UnitSpec(1, "hidden"), UnitSpec(2, "output"))
    links = (LinkSpec(0, 1, 0), LinkSpec(1, 2, 1), LinkSpec(2, 1, 2))
    with pytest.raises(SpecError):
        validate_spec(NetSpec(units, links, 3))


def test_mixed_combine_rejected():
    units = (UnitSpec(0, "input"), UnitSpec(1, "input"), UnitSpec(2, "output"))
    links = (LinkSpec(0, 2, 0, 0, "additive"), LinkSpec(1, 2, 1, 0, "multiplicative"))
    with pytest.raises(SpecError):
        validate_spec(NetSpec(units, links, 2))


def test_unreferenced_weight_rejected():
    units = (UnitSpec(0, "input"), UnitSpec(1, "output"))
    links = (LinkSpec(0, 1, 0),)
    with pytest.raises(SpecError):
        validate_spec(NetSpec(units, links, 2))


# --- gradients ---------------------------------------------------------------


def test_constant_loss_zero_gradient():
    rng = np.random.default_rng(0)
    spec = random_spec(rng)
    params = init_params(spec, rng)
    inputs = [rng.uniform(-1, 1, spec.n_in) for _ in range(4)]
    g = bptt_gradient(spec, params, inputs, lambda t, y: (1.0, np.zeros_like(y)))
    assert np.all(g == 0.0)


def test_scalar_chain_closed_form():
    spec = _chain_spec()
    w, x, d = 0.8, 0.6, -0.4
    terms = squared_error_terms({1: np.array([d])})
    g = bptt_gradient(spec, NetParams([w]), [np.array([x])], terms)
    assert g[0] == pytest.approx(2 * (w * x - d) * x, rel=1e-12)


def test_random_rnn_matches_finite_differences():
    rng = np.random.default_rng(42)
    spec = random_spec(rng, max_units=6)
    params = init_params(spec, rng, scale=0.5)
    inputs, targets = random_episode(rng, spec, max_steps=5)
    terms = squared_error_terms(targets)
    g = bptt_gradient(spec, params, inputs, terms)
    fd = fd_gradient(spec, params, inputs, terms)
    mask = np.abs(g) > 1e-8
    assert rel_err(g[mask], fd[mask]).max() < 1e-4


def test_weight_sharing_doubles_contribution():
    # 3 units; duplicating the input->hidden link (same weight index) doubles
    # that weight's gradient contribution from that site
    units = (UnitSpec(0, "input"), UnitSpec(1, "hidden", "identity"), UnitSpec(2, "output", "identity"))
    single = NetSpec(units, (LinkSpec(0, 1, 0), LinkSpec(1, 2, 1)), 2)
    doubled = NetSpec(units, (LinkSpec(0, 1, 0), LinkSpec(0, 1, 0), LinkSpec(1, 2, 1)), 2)
    params = NetParams([0.7, 1.0])
    linear_loss = lambda t, y: (float(y[0]), np.array([1.0]))
    x = [np.array([0.5])]
    g1 = bptt_gradient(single, params, x, linear_loss)
    g2 = bptt_gradient(doubled, params, x, linear_loss)
    assert g1[0] != 0.0
    assert g2[0] == pytest.approx(2 * g1[0], rel=1e-12)


def test_determinism_bit_identical():
    rng = np.random.default_rng(7)
    spec = random_spec(rng)
    params = init_params(spec, rng)
    inputs = [rng.uniform(-1, 1, spec.n_in) for _ in range(6)]
    a = run_episode(spec, params, inputs)
    b = run_episode(spec, params, inputs)
    assert np.array_equal(a, b)


def test_link_order_invariance():
    rng = np.random.default_rng(11)
    spec = random_spec(rng)
    params = init_params(spec, rng)
    inputs = [rng.uniform(-1, 1, spec.n_in) for _ in range(4)]
    ref = run_episode(spec, params, inputs)
    perm = list(spec.links)
    rng.shuffle(perm)
    shuffled = NetSpec(spec.units, tuple(perm), spec.n_w, spec.init_offsets)
    assert np.array_equal(run_episode(shuffled, params, inputs), ref)


# --- sgd ---------------------------------------------------------------------


def test_sgd_zero_gradient_noop():
    p = NetParams([1.0, -2.0])
    q = sgd_step(p, np.zeros(2), 0.5)
    assert np.array_equal(q.weights, p.weights)


def test_sgd_arithmetic():
    q = sgd_step(NetParams([1.0]), np.array([2.0]), 0.5)
    assert q.weights[0] == 0.0


def test_sgd_converges_on_convex_scalar():
    # loss (w-3)^2 from w=0, lr=0.1: contraction factor 0.8 per step
    w = NetParams([0.0])
    for _ in range(200):
        g = 2 * (w.weights - 3.0)
        w = sgd_step(w, g, 0.1)
    assert abs(w.weights[0] - 3.0) < 1e-6


def test_sgd_rejects_nonfinite():
    with pytest.raises(NumericOverflow):
        sgd_step(NetParams([1.0]), np.array([np.nan]), 0.1)


# --- LSTM --------------------------------------------------------------------


def test_lstm_cell_state_self_link():
    spec = make_lstm_spec(1, 1, 1)
    self_links = [l for l in spec.links if l.src == l.dst]
    assert len(self_links) == 1
    (l,) = self_links
    assert l.delay == 1 and l.widx is None and l.fixed == 1.0
    validate_spec(spec)


def test_lstm_zero_weights_cell_stays_zero():
    spec = make_lstm_spec(2, 3, 1)
    params = NetParams(np.zeros(spec.n_w))
    rng = np.random.default_rng(3)
    state = initial_state(spec)
    cell_units = [l.dst for l in spec.links if l.src == l.dst]
    for _ in range(10):
        state = forward_step(spec, params, state, rng.uniform(-1, 1, 2))
        for c in cell_units:
            assert state[c] == 0.0


def test_lstm_forget_bias_offset():
    spec = make_lstm_spec(1, 2, 1)
    rng = np.random.default_rng(0)
    params = init_params(spec, rng)
    offs = dict(spec.init_offsets)
    assert len(offs) == 2
    for widx in offs:
        assert 0.9 <= params.weights[widx] <= 1.1


def test_lstm_gradient_matches_fd():
    spec = make_lstm_spec(1, 2, 1)
    rng = np.random.default_rng(5)
    params = init_params(spec, rng, scale=0.3)
    inputs, targets = random_episode(rng, spec, max_steps=5)
    terms = squared_error_terms(targets)
    g = bptt_gradient(spec, params, inputs, terms)
    fd = fd_gradient(spec, params, inputs, terms)
    mask = np.abs(g) > 1e-8
    assert rel_err(g[mask], fd[mask]).max() < 1e-4


def test_lstm_learns_delayed_recall():
    # hold a binary cue for 20 steps: the output must keep reproducing the
    # cue through the delay, per-step squared error < 0.01 at every step
    from cmrl.environments import delayed_recall_sequences

    spec = make_lstm_spec(2, 4, 1)
    rng = np.random.default_rng(12)
    params = init_params(spec, rng)
    seqs = delayed_recall_sequences(delay=20, count=4, seed=99)
    out_unit = spec.unit_ids("output")[0]
    for epoch in range(450):
        for inputs, recall_t, target in seqs:
            targets = {t: np.array([target]) for t in range(1, recall_t + 1)}
            g = bptt_gradient(spec, params, inputs, squared_error_terms(targets))
            params = sgd_step(params, g / len(targets), 0.5)
    worst = 0.0
    for inputs, recall_t, target in seqs:
        acts = run_episode(spec, params, inputs)
        outs = acts[1 : recall_t + 1, out_unit]
        worst = max(worst, float(((outs - target) ** 2).max()))
    assert worst < 0.01


# --- serialization -----------------------------------------------------------


def test_spec_params_roundtrip():
    rng = np.random.default_rng(23)
    spec = make_lstm_spec(2, 2, 3)
    params = init_params(spec, rng)
    spec2 = spec_from_text(spec_to_text(spec))
    params2 = params_from_text(params_to_text(params))
    assert spec2 == spec
    assert np.array_equal(params2.weights, params.weights)
    inputs = [rng.uniform(-1, 1, 2) for _ in range(5)]
    assert np.array_equal(run_episode(spec2, params2, inputs), run_episode(spec, params, inputs))
