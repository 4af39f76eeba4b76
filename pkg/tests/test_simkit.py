import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mecsched.model import GB, SERVER_PRESETS, ContractError, Job, JobType, NodeConfig, default_catalog
from mecsched.simkit.geometry import HexGrid
from mecsched.simkit.metrics import Counters, finalize_metrics
from mecsched.simkit.mobility import Vehicle, handover_probs, mobility_step, place_fleet
from mecsched.simkit.policies import baseline_decision, pathological_handler
from mecsched.simkit.scenario import ScenarioConfig
from mecsched.simkit.world import World, run_slot, simulate, spawn_jobs
from mecsched.model import EnergyLedger

TAU = 3.0
GRID = HexGrid()


def node(F=3.3, M=64 * GB):
    preset = dict(SERVER_PRESETS["hp"], F=F, M=M)
    return NodeConfig(id=0, position=(0.0, 0.0), neighbors=frozenset(), **preset)


def job(jid, I, D, S=1 * GB, I0=None):
    j = Job.spawn(jid, jid, JobType("t", I0 or I, 40.0, S, 1.0), host=0)
    j.intensity, j.deadline = I, D
    j.size = S * I / (I0 or I)
    return j


# ---------------------------------------------------------------- geometry and mobility

def test_hex_layout():
    adj = GRID.adjacency()
    assert len(adj) == 8 and len(adj[0]) == 6
    assert all(i in adj[j] for i, nb in adj.items() for j in nb)
    d = np.linalg.norm(GRID.centers[1] - GRID.centers[0])
    assert d == pytest.approx(400.0)
    for k in range(8):
        assert GRID.nearest(GRID.centers[k]) == k
    assert not GRID.in_border(GRID.centers[0], 0, 40.0)
    edge = (GRID.centers[0] + GRID.centers[1]) / 2
    assert GRID.in_border(edge, 0, 40.0)


def test_handover_probabilities():
    c0 = GRID.centers[0]
    nbrs = GRID.neighbors(0)
    assert handover_probs(c0, np.array([10.0, 0.0]), GRID, 0, kappa=0.0) == pytest.approx(np.full(6, 1 / 6))
    assert handover_probs(c0, np.zeros(2), GRID, 0) == pytest.approx(np.full(6, 1 / 6))
    target = nbrs.index(1)
    heading = GRID.centers[1] - c0
    sharp = handover_probs(c0, heading, GRID, 0, kappa=200.0)
    assert sharp[target] == pytest.approx(1.0)
    # 20 degrees off the heading to cell 1: still the likeliest
    rot = np.array([[np.cos(0.35), -np.sin(0.35)], [np.sin(0.35), np.cos(0.35)]])
    p = handover_probs(c0, rot @ heading, GRID, 0, kappa=4.0)
    dirs = GRID.centers[list(nbrs)] - c0
    cos = dirs @ (rot @ heading) / (np.linalg.norm(dirs, axis=1) * np.linalg.norm(heading))
    ref = np.exp(4 * cos) / np.exp(4 * cos).sum()
    assert p == pytest.approx(ref)
    assert int(np.argmax(p)) == target


def test_stationary_vehicle_stays():
    v = Vehicle(0, GRID.centers[2].copy(), np.zeros(2), 2)
    events = mobility_step([v], GRID, TAU, np.random.default_rng(0))
    assert events == [] and np.array_equal(v.position, GRID.centers[2])


def test_fleet_hands_over_to_neighbours():
    rng = np.random.default_rng(1)
    fleet = place_fleet(50, GRID, rng)
    count = 0
    for _ in range(1000):
        for ev in mobility_step(fleet, GRID, TAU, rng):
            count += 1
            assert ev.new in GRID.neighbors(ev.old)
            assert fleet[ev.vehicle].serving_cell == ev.new
    assert count > 0
    for v in fleet:
        assert v.serving_cell == GRID.nearest(v.position)
        assert 5.0 - 1e-9 <= v.speed <= 15.0 + 1e-9


# ---------------------------------------------------------------- arrivals

def world(**kw):
    return World.create(ScenarioConfig(**kw))


def test_no_jobs_when_p_is_zero():
    w = world(p=0.0, n_vehicles=20)
    for _ in range(20):
        assert spawn_jobs(w) == []


def test_every_idle_vehicle_spawns_at_p_one():
    only = (JobType("type1", 10.0, 20.0, 2 * GB, 1.0),)
    w = world(p=1.0, n_vehicles=15, catalog=only)
    new = spawn_jobs(w)
    assert len(new) == 15
    assert all((j.intensity, j.deadline, j.size) == (10.0, 20.0, 1.6e10) for j in new)
    assert all(j.host == w.vehicles[j.owner_vehicle].serving_cell for j in new)
    assert spawn_jobs(w) == []


def test_spawn_rate_concentrates():
    w = world(p=0.25, n_vehicles=100)
    spawned = 0
    for _ in range(100):
        spawned += len(spawn_jobs(w))
        for v in w.vehicles:
            v.outstanding_job = None
        w.jobs.clear()
    assert spawned / 1e4 == pytest.approx(0.25, abs=0.02)


# ---------------------------------------------------------------- repair and baselines

def test_handler_identity_when_feasible():
    jobs = [job(0, 5.0, 20.0), job(1, 4.0, 30.0)]
    rep = pathological_handler(node(), jobs, [2.0, 1.0], TAU)
    assert rep.w == pytest.approx([2.0, 1.0])
    assert (rep.suspended, rep.dropped, rep.extended) == ([], [], [])


def test_handler_pauses_later_expiring_job():
    a, b = job(0, 9.0, 6.0), job(1, 9.0, 30.0)
    rep = pathological_handler(node(F=3.0), [a, b], [5.0, 5.0], TAU)
    assert rep.suspended == [1]
    assert rep.w == pytest.approx([9.0, 0.0])


def test_handler_memory_eviction_by_size():
    a, b = job(0, 5.0, 6.0, S=40 * GB), job(1, 5.0, 6.0, S=30 * GB)
    rep = pathological_handler(node(), [a, b], [1.0, 1.0], TAU)
    assert rep.suspended == [0]
    assert rep.w == pytest.approx([0.0, 1.0])


def test_handler_deadline_cases():
    big_left = job(0, 0.05 * 10, 2.0, I0=10.0)
    tiny_left = job(1, 0.005 * 10, 2.0, I0=10.0)
    rep = pathological_handler(node(), [big_left, tiny_left], [0.0, 0.0], TAU, eps_fraction=0.01)
    assert rep.dropped == [0]
    assert rep.extended == [1]
    tiny_left.extended = True
    rep = pathological_handler(node(), [tiny_left], [0.0], TAU, eps_fraction=0.01)
    assert rep.dropped == [1]


def test_baseline_decisions():
    j = job(0, 5.0, 20.0)
    assert baseline_decision("keep", j, 3, 100.0, TAU) is None
    assert baseline_decision("migrate", j, 3, -100.0, TAU) == 3
    assert baseline_decision("threshold", j, 3, -5.0, TAU) is None
    assert baseline_decision("threshold", j, 3, 5.0, TAU) == 3
    assert baseline_decision("migrate", job(1, 5.0, 2.0), 3, 0.0, TAU) is None
    with pytest.raises(ValueError):
        baseline_decision("ease", j, 3, 0.0, TAU)


# ---------------------------------------------------------------- closed loop

def test_finalize_metrics_examples():
    led = EnergyLedger()
    assert finalize_metrics([led], Counters(), 3.0).efficiency == 1.0
    led.book(90.0, 100.0, 0.0, 0.0, 0.0)
    assert finalize_metrics([led], Counters(), 3.0).efficiency == pytest.approx(0.9)
    with pytest.raises(ContractError):
        finalize_metrics([led], Counters(), 0.0)


def test_empty_world_burns_idle_power_only():
    rep = simulate(ScenarioConfig(n_vehicles=0, duration=20, pv_mean=250.0, pv_min=250.0))
    assert rep.avg_processing_power == 0.0 and rep.avg_migration_power == 0.0
    assert rep.generated == 0 and rep.efficiency == 1.0


def test_single_job_completes_without_migrating():
    cfg = ScenarioConfig(cells=((0, 0),), n_vehicles=1, p=0.0, duration=1, speed_min=5.0, speed_max=5.0)
    w = World.create(cfg)
    w.vehicles[0].waypoint = None
    w.vehicles[0].velocity = np.zeros(2)
    jt = default_catalog()[0]
    j = Job.spawn(0, 0, jt, w.vehicles[0].serving_cell)
    w.jobs[0] = j
    w.next_job_id = 1
    w.vehicles[0].outstanding_job = 0
    w.counters.generated = 1
    w.counters.generated_work = j.intensity
    for _ in range(int(jt.deadline_total / cfg.tau)):
        run_slot(w)
        if not w.jobs:
            break
    assert w.counters.finished == 1
    assert sum(led.migration for led in w.ledgers) == 0.0


@pytest.mark.parametrize("policy", ["keep", "migrate", "threshold", "ease"])
def test_short_runs_are_deterministic(policy):
    cfg = ScenarioConfig(policy=policy, duration=30, n_vehicles=60, seed=7)
    a, b = simulate(cfg), simulate(cfg)
    assert a == b
    assert 0.0 <= a.efficiency <= 1.0
    if policy == "keep":
        assert a.avg_migration_power == 0.0 and a.migrations == 0


def test_config_invariants():
    with pytest.raises(ContractError):
        ScenarioConfig(p=1.5)
    with pytest.raises(ContractError):
        ScenarioConfig(pv_min=400.0, pv_max=300.0)
    with pytest.raises(ContractError):
        ScenarioConfig(policy="lyapunov")


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["keep", "migrate", "threshold", "ease"]),
       st.floats(0.05, 0.6))
def test_random_short_runs_keep_their_books(seed, policy, p):
    # run_slot asserts job and energy closure after every slot
    rep = simulate(ScenarioConfig(policy=policy, p=p, seed=seed, duration=15, n_vehicles=40))
    assert rep.generated == rep.finished + rep.dropped + (rep.generated - rep.finished - rep.dropped)
    for frac in (rep.executed_fraction, rep.finished_fraction, rep.drop_rate, rep.min_latency_fraction):
        assert 0.0 <= frac <= 1.0 + 1e-12
