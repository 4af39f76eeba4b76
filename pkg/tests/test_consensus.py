import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mecsched.consensus import (ConsensusNodeState, PrimalStep, Topology, default_alpha, desired_migration,
                                dual_step, global_cost, node_cost, primal_step, run_dual_ascent,
                                step_size_bound)
from mecsched.model import GB, ContractError, Job, JobType
from instances import network_instance, primal_instance
from oracles import consensus_oracle, lagrangian_pg_oracle


def accepted_cases(b, lin, q, Qd, p_hat):
    """Which of the three candidate minimizers satisfy their own optimality condition."""
    x_free = b - lin / (2 * Qd)
    x_full = x_free - q / (2 * Qd)
    curv = q @ (q / (2 * Qd))
    theta = (q @ x_free - p_hat) / curv if curv > 0 else math.nan
    return [q @ x_free - p_hat < 0, q @ x_full - p_hat > 0, 0 <= theta <= 1]


def two_nodes(**kw):
    a = ConsensusNodeState(0, (1,), [1.0], [0.0], p_hat=100.0, f_hat=5.0, m_hat=10 * GB, xi_M=1e-9,
                           q_out=-30.0, q_in=60.0, **kw)
    b = ConsensusNodeState(1, (0,), [0.0], [1.0], p_hat=100.0, f_hat=5.0, m_hat=10 * GB, xi_M=1e-9,
                           q_out=-30.0, q_in=60.0, **kw)
    return [a, b]


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_exactly_one_case_and_matches_oracle(seed):
    b, lin, q, Qd, p_hat = primal_instance(np.random.default_rng(seed))
    assert sum(accepted_cases(b, lin, q, Qd, p_hat)) == 1
    n = (len(b) - 1) // 2
    s = ConsensusNodeState(0, tuple(range(1, n + 1)), b[:n], b[n:2 * n], p_hat=p_hat, f_hat=1.0, m_hat=1.0,
                           xi_M=1.0, q_out=q[0], q_in=q[n], rho=2 * Qd[0], c_hat=Qd[-1])
    s.lam = 0.0
    s.gamma_o, s.gamma_ot, s.mu, s.mu_tilde = (np.zeros(n) for _ in range(4))
    step = primal_step(s)
    ref = lagrangian_pg_oracle(b, s.multiplier_term(), q, Qd, p_hat)
    got = np.concatenate([step.o, step.o_tilde, [step.delta_hat]])
    assert np.abs(got - ref).max() <= 1e-6
    assert step.case == 1 + accepted_cases(b, s.multiplier_term(), q, Qd, p_hat).index(True)


def test_primal_cases_examples():
    s = two_nodes()[0]
    assert primal_step(s).case == 1  # cheap, plenty of green power
    s.p_hat = -1e5
    assert primal_step(s).case == 2
    s.p_hat = -30.0 * 1.0 - 5.0
    assert primal_step(s).case == 3
    with pytest.raises(ContractError):
        primal_step(s, Q_diag=np.zeros(3))


def test_dual_step_example():
    s = two_nodes()[0]
    s.f_hat, s.m_hat = 0.0, 0.0
    x = PrimalStep(o=np.array([0.0]), o_tilde=np.array([1.0]), delta_hat=0.0, case=1)
    new = dual_step(s, x, np.array([0.0]), 0.1)
    assert new.lam == pytest.approx(0.1)
    assert new.mu == pytest.approx([0.0])
    x = PrimalStep(o=np.array([2.0]), o_tilde=np.array([0.0]), delta_hat=0.5, case=1)
    new = dual_step(s, x, np.array([1.0]), 0.1)
    assert new.lam == 0.0 and new.phi == 0.0
    assert new.mu == pytest.approx([0.1])
    assert np.all(new.gamma_o == 0) and np.all(new.gamma_ot == 0)
    with pytest.raises(ContractError):
        dual_step(s, x, np.array([1.0]), 0.0)


def test_step_size_bound_examples():
    assert step_size_bound(np.array([[1.0]]), np.zeros((0, 1)), np.array([[2.0]])) == pytest.approx(4.0)
    assert step_size_bound(np.eye(2), np.zeros((0, 2)), np.diag([1.0, 4.0])) == pytest.approx(2.0)
    assert step_size_bound(np.zeros((0, 2)), np.zeros((0, 2)), np.eye(2)) == math.inf
    with pytest.raises(ContractError):
        step_size_bound(np.eye(2), np.zeros((0, 2)), np.diag([0.0, 1.0]))


def test_topology_must_be_symmetric():
    a, b = two_nodes()
    b = ConsensusNodeState(1, (), [], [], p_hat=1, f_hat=1, m_hat=1, xi_M=1, q_out=0, q_in=0)
    with pytest.raises(ContractError):
        Topology.from_states([a, b])


def test_isolated_nodes_converge_trivially():
    s = ConsensusNodeState(0, (), [], [], p_hat=1, f_hat=1, m_hat=1, xi_M=1, q_out=0, q_in=0)
    res = run_dual_ascent([s])
    assert res.converged and res.iterations == 0 and res.o == {}


def test_engines_agree_and_match_oracle():
    rng = np.random.default_rng(3)
    for _ in range(3):
        states = network_instance(rng)
        fast = run_dual_ascent(states, max_iters=3000)
        msg = run_dual_ascent(states, max_iters=3000, engine="messages")
        assert fast.iterations == msg.iterations
        assert max(abs(fast.o[e] - msg.o[e]) for e in fast.o) < 1e-9
        assert msg.messages == fast.messages
        if fast.converged:
            ref, _, _ = consensus_oracle(fast.states)
            got = global_cost(fast.o, fast.o_tilde, fast.delta_hat, fast.states)
            assert got == pytest.approx(ref, rel=1e-2, abs=1e-6)


def test_no_migration_wanted_and_free_energy():
    states = two_nodes()
    for s in states:
        s.w_bar = np.zeros(1)
    res = run_dual_ascent(states)
    assert res.converged
    assert all(abs(v) < 1e-6 for v in res.o.values())


def test_warm_start_keeps_multipliers():
    states = two_nodes()
    states[0].f_hat = states[1].f_hat = 0.0
    first = run_dual_ascent(states, max_iters=5)
    cold = run_dual_ascent(first.states, max_iters=5)
    assert cold.o == first.o
    warm = run_dual_ascent(first.states, max_iters=5, warm_start=True)
    assert warm.o != first.o


def test_node_cost_terms():
    c = node_cost(np.array([1.0]), np.array([0.5]), 0.2, np.array([2.0]), 10.0, 20.0, 4.0, 2.5, 10.0)
    assert c == pytest.approx(12.0 + 2.5 * 1.0 + 10 * 0.04)
    assert node_cost(np.zeros(1), np.zeros(1), 0.0, np.zeros(1), 5.0, 1.0, 1.0, 1.0, 1.0) == 0.0


def test_default_alpha_below_bound():
    states = network_instance(np.random.default_rng(0))
    A1, A2, Qd = Topology.from_states(states).constraint_matrices([2.5] * 8, [10.0] * 8)
    assert default_alpha(states) == pytest.approx(0.9 * step_size_bound(A1, A2, Qd))


def test_desired_migration_groups_by_likeliest_cell():
    jt = JobType("t", 10.0, 20.0, 2 * GB, 1.0)
    jobs = [Job.spawn(k, k, jt, host=0) for k in range(3)]
    dm = desired_migration(jobs, {0: [0.2, 0.8], 1: [0.6, 0.4]}, (4, 5))
    assert dm.k_sets == {4: (1,), 5: (0,)}
    assert dm.w_bar == pytest.approx([0.5, 0.5])
    assert dm.m_bar == pytest.approx([2 * GB, 2 * GB])
    with pytest.raises(ContractError):
        desired_migration(jobs, {0: [0.2, 0.7]}, (4, 5))
    with pytest.raises(ContractError):
        desired_migration(jobs, {0: [1.0]}, (4, 5))


def test_global_cost_examples():
    states = two_nodes()
    states[0].p_hat = states[1].p_hat = 1e6
    follow = {(0, 1): 1.0, (1, 0): 0.0}
    assert global_cost(follow, follow, {0: 0.0, 1: 0.0}, states) == 0.0
    states[0].w_bar = np.array([0.5])
    none = {(0, 1): 0.0, (1, 0): 0.0}
    assert global_cost(none, none, {0: 0.0, 1: 0.0}, states) == pytest.approx(0.625)


def test_abundant_energy_follows_the_vehicles():
    states = two_nodes()
    for s in states:
        s.p_hat, s.f_hat = 1e6, 1e3
    res = run_dual_ascent(states)
    assert res.converged
    assert res.o[(0, 1)] == pytest.approx(1.0, abs=1e-4)
    assert res.o[(1, 0)] == pytest.approx(0.0, abs=1e-4)
