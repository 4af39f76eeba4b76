import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mecsched.localctl import (ArrivalPredictor, HorizonEstimates, MpcWeights, forecast_horizon,
                               local_objective, receding_step, residual_estimates, solve_local)
from mecsched.model import GB, SERVER_PRESETS, ContractError, Job, JobType, NodeConfig, harvested_energy
from instances import mpc_instance
from oracles import local_mpc_oracle, mpc_plan_cost

TAU = 3.0
W = MpcWeights()


def node(kind="hp"):
    return NodeConfig(id=0, position=(0.0, 0.0), neighbors=frozenset(), **SERVER_PRESETS[kind])


def job(I, D, S=2 * GB, jid=0, I0=None):
    j = Job.spawn(jid, jid, JobType("t", I0 or I, 40.0, S * (I0 or I) / I, 1.0), host=0)
    j.intensity, j.deadline, j.size = I, D, S
    return j


def est_for(cfg, T, pv=370.0, **kw):
    return forecast_horizon(cfg, p_pv_now=pv, T=T, tau=TAU, pv_mean=pv, **kw)


def test_stationary_forecast():
    cfg = node()
    est = est_for(cfg, 5)
    assert np.allclose(est.e_h, harvested_energy(cfg, 370, 0, 0, TAU))
    assert est.incoming_rate == 0.0
    with pytest.raises(ContractError):
        est_for(cfg, 1)


def test_border_vehicles_charge_the_next_slot():
    cfg = node()
    est = est_for(cfg, 4, n_inc=2, n_out=1)
    assert est.e_h[1] == pytest.approx(harvested_energy(cfg, 370, 2, 1, TAU))
    assert est.e_h[0] == est.e_h[2] == pytest.approx(harvested_energy(cfg, 370, 0, 0, TAU))


def test_predictor_mean_rate_and_window():
    pred = ArrivalPredictor(window=300.0)
    assert pred.mean_rate(0.0) == 0.0
    pred.push(0.0, 0.5)
    pred.push(3.0, 16 / 30)
    assert pred.mean_rate(3.0) == pytest.approx(0.5167, abs=1e-4)
    assert pred.mean_rate(400.0) == 0.0
    pred.push(400.0, 1.0)
    pred.flush()
    assert pred.mean_rate(400.0) == 0.0


def test_no_jobs_objective_is_grid_penalty():
    cfg = node()
    est = est_for(cfg, 3, pv=150.0)
    sol = solve_local([], est, cfg, W, TAU)
    assert sol.w.shape == (3, 0)
    f0 = -est.e_h
    assert sol.objective == pytest.approx(float(np.sum(np.maximum(f0, 0) ** 2)))
    assert np.all(sol.delta == 0)


def test_forced_execution_rows_hold_exactly():
    cfg = node()
    j = job(10.0, 4.0)
    sol = solve_local([j], est_for(cfg, 5), cfg, W, TAU)
    assert sol.w[:2, 0].sum() == pytest.approx(10.0, abs=1e-12)
    # the deadline slot takes exactly what is left
    assert sol.w[1, 0] == 10.0 - sol.w[0, 0]
    assert np.all(sol.w[2:, 0] == 0)


def test_due_job_is_preassigned():
    cfg = node("nettrix")
    j = job(5.0, 2.0)
    sol = solve_local([j], est_for(cfg, 3), cfg, W, TAU)
    assert sol.w[0, 0] == 5.0 and np.all(sol.w[1:, 0] == 0)


def test_front_loads_with_abundant_energy():
    cfg = node()
    j = job(10.0, 20.0)
    est = HorizonEstimates(np.full(3, 1e6))
    sol = solve_local([j], est, cfg, W, TAU)
    zero_obj, _, _ = local_objective([j], np.zeros((3, 1)), est, cfg, W, TAU)
    assert sol.w[0, 0] > 0
    assert sol.objective < zero_obj


def test_rejects_expired_job():
    cfg = node()
    with pytest.raises(ContractError):
        solve_local([job(1.0, 0.0)], est_for(cfg, 3), cfg, W, TAU)


def test_residual_estimates_idle_node():
    cfg = node("hp")
    est = est_for(cfg, 5)
    sol = solve_local([], est, cfg, W, TAU)
    p_hat, f_hat, m_hat = residual_estimates(sol, est, cfg, TAU)
    assert p_hat == pytest.approx(205.8)
    assert f_hat == pytest.approx(3.3)
    assert m_hat == pytest.approx(64 * GB)


def test_residual_estimates_saturated_and_over_memory():
    cfg = node("hp")
    est = HorizonEstimates(np.full(3, 1e6), extra_load=np.full(3, 3.3 * TAU))
    sol = solve_local([], est, cfg, W, TAU)
    assert residual_estimates(sol, est, cfg, TAU)[1] == pytest.approx(0.0, abs=1e-12)
    # an idle job in a deep deficit keeps its full size resident in every slot
    x = 1 * GB
    big = job(10.0, 400.0, S=64 * GB + x)
    sol = solve_local([big], HorizonEstimates(np.full(3, -1e6)), cfg, MpcWeights(gamma=1e-9), TAU)
    assert np.allclose(sol.w, 0.0, atol=1e-6)
    assert sol.m_hat == pytest.approx(-x, rel=1e-6)


def test_receding_step_and_stationarity():
    cfg = node()
    jobs = [job(10.0, 20.0, jid=0), job(12.0, 40.0, S=0.1 * GB, jid=1)]
    est = est_for(cfg, 5)
    a = solve_local(jobs, est, cfg, W, TAU)
    b = solve_local(jobs, est, cfg, W, TAU)
    assert np.array_equal(receding_step(a), a.w[0])
    assert np.allclose(a.w0, b.w0, atol=1e-9)


def test_low_gamma_and_deficit_processes_only_forced_work():
    cfg = node()
    jobs = [job(10.0, 20.0, jid=0), job(4.0, 5.0, jid=1)]
    sol = solve_local(jobs, HorizonEstimates(np.full(4, -1e5)), cfg, MpcWeights(gamma=1e-9), TAU)
    assert np.allclose(sol.w[:, 0], 0.0, atol=1e-6)
    assert sol.w[:2, 1].sum() == pytest.approx(4.0)


def test_matches_conic_oracle_on_small_instances():
    rng = np.random.default_rng(11)
    for _ in range(12):
        jobs, est, cfg = mpc_instance(rng)
        sol = solve_local(jobs, est, cfg, W, TAU)
        ref, _ = local_mpc_oracle(jobs, est.e_h, est.extra_load, est.v_seq, est.c_seq, cfg,
                                  W.gamma, W.c_F, W.c_M, TAU)
        own = mpc_plan_cost(jobs, sol.w, est.e_h, est.extra_load, est.v_seq, est.c_seq, cfg,
                            W.gamma, W.c_F, W.c_M, TAU)
        assert sol.objective == pytest.approx(own, rel=1e-9, abs=1e-9)
        assert own <= ref * (1 + 1e-4) + 1e-6
        assert np.all(sol.w >= 0) and np.all(sol.delta >= 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 500.0))
def test_more_harvest_never_costs_more(seed, bump):
    jobs, est, cfg = mpc_instance(np.random.default_rng(seed))
    lo = solve_local(jobs, est, cfg, W, TAU).objective
    richer = HorizonEstimates(est.e_h + bump, est.incoming_rate, est.v_seq, est.c_seq, est.extra_load)
    hi = solve_local(jobs, richer, cfg, W, TAU).objective
    assert hi <= lo * (1 + 1e-6) + 1e-6
