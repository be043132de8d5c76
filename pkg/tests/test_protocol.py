import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gopa import graph as gr
from gopa import protocol as pr
from gopa.errors import NumericalError, ParameterError, ProtocolError
from gopa.graph import NetworkGraph
from gopa.protocol import PrivateValues

from conftest import complete, path


def test_private_values_bound_and_clip():
    x = PrivateValues.gaussian(100, 2.0, 0)
    assert x.bound == pytest.approx(np.abs(x.values).max())
    c = PrivateValues.gaussian(100, 2.0, 0, bound=1.0)
    assert np.abs(c.values).max() <= 1.0
    with pytest.raises(ParameterError):
        PrivateValues(np.array([2.0]), 1.0)


def test_randomization_phase_antisymmetric_noise():
    g = gr.generate_k_out(40, 3, 0)
    x = PrivateValues.gaussian(40, 1.0, 1)
    state, ledger = pr.randomization_phase(g, x, 2.0, 3)
    assert len(ledger) == g.num_edges
    for u, v in g.edges.tolist():
        assert ledger.get(u, v) == -ledger.get(v, u)
    for u in range(g.n):
        assert state.noise_sums[u] == pytest.approx(sum(ledger.get(u, v) for v in g.neighbors(u).tolist()))
    assert np.allclose(state.noisy, x.values + state.noise_sums)
    assert state.sum_noisy() == pytest.approx(x.values.sum(), abs=1e-10)


def test_randomization_zero_noise_is_identity():
    g = path(5)
    x = PrivateValues(np.arange(5.0), 4.0)
    state, _ = pr.randomization_phase(g, x, 0.0, 0)
    assert np.array_equal(state.noisy, x.values)


def test_fixed_mode_sum_exact():
    g = gr.generate_k_out(60, 4, 2)
    x = PrivateValues.gaussian(60, 1.0, 2)
    state, _ = pr.randomization_phase(g, x, 100.0, 4, mode="fixed")
    assert state.noisy.dtype == np.int64
    assert state.sum_noisy() == int(x.quantised(32).sum())
    out = pr.run_averaging(state, g, 20_000, 5, record_every=5000)
    assert out.sum_noisy() == state.sum_noisy()
    assert all(d == 0.0 for _, _, d in out.trace)


def test_gossip_step_pure_and_checks_edges():
    g = path(3)
    s = pr.initial_state(PrivateValues(np.array([0.0, 1.0, 5.0]), 5.0))
    s2 = pr.gossip_step(s, (1, 2), g)
    assert s.noisy.tolist() == [0.0, 1.0, 5.0]
    assert s2.noisy.tolist() == [0.0, 3.0, 3.0] and s2.t == 1
    with pytest.raises(ProtocolError):
        pr.gossip_step(s, (0, 2), g)


def test_fixed_step_floor_split():
    s = pr.initial_state(PrivateValues(np.array([0.0, 0.0]), 1.0), mode="fixed")
    s.noisy[:] = [3, -8]
    out = pr.gossip_step(s, (0, 1))
    assert out.noisy.tolist() == [-3, -2]


def test_run_averaging_converges_and_traces():
    g = complete(10)
    x = PrivateValues.gaussian(10, 1.0, 0)
    state, _ = pr.randomization_phase(g, x, 1.0, 0)
    out = pr.run_averaging(state, g, 2000, 1, record_every=100)
    assert out.t == 2000
    assert [r[0] for r in out.trace] == list(range(0, 2001, 100))
    assert out.relative_error() < 1e-6
    assert np.allclose(out.real_values(), x.average, atol=1e-6)
    text = pr.trace_csv(out, method="gopa")
    assert text.splitlines()[0] == "t,rel_error,sum_drift,method"


def test_run_averaging_deterministic():
    g = gr.generate_k_out(30, 3, 0)
    s, _ = pr.randomization_phase(g, PrivateValues.gaussian(30, 1.0, 0), 1.0, 0)
    a = pr.run_averaging(s, g, 3000, 9)
    b = pr.run_averaging(s, g, 3000, 9)
    assert np.array_equal(a.noisy, b.noisy)


def test_batched_matches_sequential_for_one_trial():
    g = gr.generate_k_out(20, 3, 0)
    x = PrivateValues.gaussian(20, 1.0, 1)
    s, _ = pr.randomization_phase(g, x, 1.0, 2)
    res = pr.batched_gossip(s.noisy, x.values, g, 500, record_every=100, shared_edges=True, rng_seed=4)
    # replay the same edge stream by hand
    picks = np.random.default_rng(4).integers(0, g.num_edges, size=500)
    vals = s.noisy.copy()
    for e in picks:
        u, v = g.edges[e]
        vals[u] = vals[v] = 0.5 * (vals[u] + vals[v])
    assert np.allclose(res.final[:, 0], vals)
    err = np.linalg.norm(vals - x.average) / np.linalg.norm(x.values)
    assert res.errors[-1, 0] == pytest.approx(err, rel=1e-9)


def test_batched_crossing_time_exact():
    g = complete(6)
    x = PrivateValues.gaussian(6, 1.0, 3)
    res = pr.batched_gossip(x.values, x.values, g, 400, threshold=1e-2, record_every=1, shared_edges=True,
                            rng_seed=0)
    err = res.errors[:, 0]
    first = int(np.argmax(err < 1e-2))
    assert res.hits[0] == res.times[first]
    assert np.all(err[:first] >= 1e-2)


def test_convergence_factor_and_bound_complete_graph():
    g = complete(5)
    # lambda2(K5) = 5, |E| = 10
    assert pr.convergence_factor(g) == pytest.approx(0.5)
    b = pr.tau_averaging_time_bound(g, 0.01, 1.0, 6.0)
    expect = 3 * math.log(2 * 6.0 * (4 + 3) / 0.01) / math.log(2.0)
    assert float(b) == pytest.approx(expect)
    assert not b.degenerate


def test_bound_degenerate_on_triangle():
    b = pr.tau_averaging_time_bound(complete(3), 0.01, 1.0, 1.0)
    assert b.degenerate and b.c_g <= np.finfo(float).eps and b.iterations >= 1


def test_bound_disconnected_raises():
    g = NetworkGraph.from_edges(4, [(0, 1), (2, 3)])
    with pytest.raises(NumericalError):
        pr.tau_averaging_time_bound(g, 0.01, 1.0, 1.0)


@given(tau=st.floats(1e-6, 0.5), bd=st.floats(0.1, 100))
@settings(max_examples=30, deadline=None)
def test_bound_monotone_in_tau_and_noise(tau, bd):
    g = gr.generate_k_out(30, 3, 0)
    b = float(pr.tau_averaging_time_bound(g, tau, 1.0, bd))
    assert float(pr.tau_averaging_time_bound(g, tau / 2, 1.0, bd)) > b
    assert float(pr.tau_averaging_time_bound(g, tau, 1.0, bd * 2)) > b


def test_empirical_tau_time_below_bound():
    g = gr.generate_k_out(60, 4, 0)
    emp = pr.empirical_tau_averaging_time(g, 0.05, 1.0, 1.0, trials=40, rng_seed=1, value_bound=3.0,
                                          noise_bound=6.0)
    assert 0 < emp < float(pr.tau_averaging_time_bound(g, 0.05, 3.0, 6.0))


def test_dropout_residual_and_rollback():
    g = gr.generate_k_out(20, 3, 0)
    x = PrivateValues.gaussian(20, 1.0, 0)
    state, ledger = pr.randomization_phase(g, x, 5.0, 1, mode="fixed")
    drop = [0, 7]
    res = pr.simulate_dropout(state, ledger, g, drop, "residual")
    expect = sum(ledger.get(u, v) for u in range(20) if u not in drop for v in g.neighbors(u).tolist()
                 if v in drop) / 2 ** 32
    assert res.bias == pytest.approx(expect)
    rb = pr.simulate_dropout(state, ledger, g, drop, "rollback")
    assert rb.bias == 0.0
    assert rb.survivors.tolist() == [u for u in range(20) if u not in drop]
    with pytest.raises(ParameterError):
        pr.simulate_dropout(state, ledger, g, drop, "bogus")


def test_quantise_overflow():
    with pytest.raises(ParameterError):
        pr.quantise(np.array([2.0 ** 31]), 32)
