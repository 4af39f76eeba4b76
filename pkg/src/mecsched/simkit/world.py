"""Slot-by-slot simulation of the edge network under a migration policy."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from ..consensus import ConsensusNodeState, default_alpha, desired_migration, run_dual_ascent
from ..localctl import ArrivalPredictor, LocalSolution, MpcWeights, forecast_horizon, solve_local
from ..model import (SERVER_PRESETS, EnergyLedger, Job, NodeConfig, advance_job, derived_costs,
                     migration_energy)
from ..rounding import movable, round_allocation
from .geometry import HexGrid
from .metrics import Counters, MetricsReport, SlotRecord, finalize_metrics
from .mobility import Handover, Vehicle, handover_probs, mobility_step, place_fleet
from .policies import baseline_decision, pathological_handler
from .scenario import ScenarioConfig


class InvariantError(AssertionError):
    """A conservation law of the simulation was broken."""


def build_nodes(cfg: ScenarioConfig, grid: HexGrid) -> list[NodeConfig]:
    costs = derived_costs(cfg.catalog, sigma_s=cfg.sigma_s, sigma_d=cfg.sigma_d, E_s=cfg.E_s,
                          E_d=cfg.E_d, E_b_wired=cfg.E_b_wired, L=cfg.container_size)
    for key in ("q_tx", "q_rx", "xi_M"):
        if getattr(cfg, key) is not None:
            costs[key] = getattr(cfg, key)
    nodes = []
    for k in range(len(grid.cells)):
        kind = cfg.server_kinds[k % len(cfg.server_kinds)]
        preset = SERVER_PRESETS[kind]
        nodes.append(NodeConfig(
            id=k, position=tuple(grid.center(k)), neighbors=frozenset(grid.neighbors(k)),
            P_ran=cfg.P_ran, P_wired=cfg.P_wired, E_b_ran=cfg.E_b_ran, E_b_wired=cfg.E_b_wired,
            sigma_s=cfg.sigma_s, sigma_d=cfg.sigma_d, E_s=cfg.E_s, E_d=cfg.E_d,
            L=cfg.container_size, T_migr=cfg.T_migr,
            q_tx=costs["q_tx"], q_rx=costs["q_rx"], xi_M=costs["xi_M"], kind=kind, **preset))
    return nodes


@dataclass
class World:
    cfg: ScenarioConfig
    grid: HexGrid
    nodes: list[NodeConfig]
    vehicles: list[Vehicle]
    jobs: dict[int, Job] = field(default_factory=dict)
    slot: int = 0
    next_job_id: int = 0
    counters: Counters = field(default_factory=Counters)
    ledgers: list[EnergyLedger] = field(default_factory=list)
    predictors: list[ArrivalPredictor] = field(default_factory=list)
    series: list[SlotRecord] = field(default_factory=list)
    deadline_shift: dict[int, float] = field(default_factory=dict)  # s granted by extensions
    multipliers: Optional[list[ConsensusNodeState]] = None  # last consensus run, for warm starts
    rng_move: Optional[np.random.Generator] = None
    rng_jobs: Optional[np.random.Generator] = None
    rng_pv: Optional[np.random.Generator] = None
    rng_forecast: Optional[np.random.Generator] = None

    @classmethod
    def create(cls, cfg: ScenarioConfig) -> "World":
        grid = HexGrid(cfg.cells, cfg.pitch)
        place, move, jobs, pv, fc = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(5))
        fleet = place_fleet(cfg.n_vehicles, grid, place, (cfg.speed_min, cfg.speed_max))
        nodes = build_nodes(cfg, grid)
        return cls(cfg, grid, nodes, fleet,
                   ledgers=[EnergyLedger() for _ in nodes],
                   predictors=[ArrivalPredictor(cfg.window) for _ in nodes],
                   rng_move=move, rng_jobs=jobs, rng_pv=pv, rng_forecast=fc)

    @property
    def now(self) -> float:
        return self.slot * self.cfg.tau

    def hosted(self, node: int) -> list[Job]:
        return sorted((j for j in self.jobs.values() if j.host == node), key=lambda j: j.id)


# ---------------------------------------------------------------- slot phases

def spawn_jobs(world: World) -> list[Job]:
    """Every vehicle without a pending job submits one with probability p."""
    cfg = world.cfg
    u = world.rng_jobs.random(len(world.vehicles))
    probs = np.array([jt.gen_prob for jt in cfg.catalog])
    kinds = world.rng_jobs.choice(len(cfg.catalog), size=len(world.vehicles), p=probs)
    new = []
    for v, draw, kind in zip(world.vehicles, u, kinds):
        if v.outstanding_job is not None or draw >= cfg.p:
            continue
        job = Job.spawn(world.next_job_id, v.id, cfg.catalog[kind], v.serving_cell, world.slot)
        world.next_job_id += 1
        world.jobs[job.id] = job
        v.outstanding_job = job.id
        world.predictors[job.host].push(world.now, job.rate)
        world.counters.generated += 1
        world.counters.generated_work += job.intensity
        new.append(job)
    return new


def _border_jobs(world: World, node: int) -> dict[int, np.ndarray]:
    """Handover probabilities of hosted jobs whose vehicle is about to leave the cell."""
    cfg = world.cfg
    out = {}
    for job in world.hosted(node):
        v = world.vehicles[job.owner_vehicle]
        if v.serving_cell != node or not movable(job, cfg.tau, cfg.min_fraction):
            continue
        # only vehicles in the annulus that leave the cell within a slot at their current velocity
        leaving = world.grid.nearest(v.position + v.velocity * cfg.tau) != node
        if leaving and world.grid.in_border(v.position, node, cfg.border_width):
            out[job.id] = handover_probs(v.position, v.velocity, world.grid, node, cfg.kappa)
    return out


def local_phase(world: World, pv: np.ndarray, border: list[dict[int, np.ndarray]]):
    cfg = world.cfg
    weights = MpcWeights(cfg.gamma, cfg.c, cfg.c)
    expected_in = np.zeros(len(world.nodes), dtype=int)
    for i, probs in enumerate(border):
        nbrs = world.grid.neighbors(i)
        for p in probs.values():
            expected_in[nbrs[int(np.argmax(p))]] += 1
    sols = []
    for i, node in enumerate(world.nodes):
        jobs = world.hosted(i)
        remote = frozenset(j.id for j in jobs if world.vehicles[j.owner_vehicle].serving_cell != i)
        est = forecast_horizon(
            node, p_pv_now=pv[i], T=cfg.T, tau=cfg.tau, pv_mean=cfg.pv_mean, pv_sigma=cfg.pv_sigma,
            pv_bounds=(cfg.pv_min, cfg.pv_max), predictor=world.predictors[i], now=world.now,
            n_inc=int(expected_in[i]), n_out=len(border[i]), jobs=jobs, remote_jobs=remote,
            result_size=cfg.result_size, rng=world.rng_forecast if cfg.sampled_forecast else None)
        sols.append((jobs, solve_local(jobs, est, node, weights, cfg.tau)))
    return sols


def ease_migrations(world: World, sols, border: list[dict[int, np.ndarray]]) -> tuple[list[tuple[int, int]], int]:
    """Consensus on link rates, then rounding to jobs at every node."""
    cfg = world.cfg
    states = []
    desired = []
    for i, node in enumerate(world.nodes):
        jobs, sol = sols[i]
        nbrs = world.grid.neighbors(i)
        dm = desired_migration(jobs, border[i], nbrs)
        desired.append(dm)
        state = ConsensusNodeState(
            i, nbrs, dm.w_bar, np.zeros(len(nbrs)), p_hat=sol.p_hat, f_hat=sol.f_hat, m_hat=sol.m_hat,
            xi_M=node.xi_M, q_out=node.q_tx - node.q_proc, q_in=node.q_rx + node.q_proc,
            rho=cfg.rho, c_hat=cfg.c_hat)
        if cfg.warm_start and world.multipliers is not None:
            old = world.multipliers[i]
            state = replace(state, lam=old.lam, phi=old.phi, gamma_o=old.gamma_o, gamma_ot=old.gamma_ot,
                            mu=old.mu, mu_tilde=old.mu_tilde)
        states.append(state)
    alpha = default_alpha(states, cfg.alpha_safety)
    res = run_dual_ascent(states, alpha=alpha, max_iters=cfg.max_iters, primal_tol=cfg.primal_tol,
                          warm_start=cfg.warm_start)
    world.multipliers = res.states
    world.counters.consensus_runs += 1
    world.counters.consensus_iterations += res.iterations
    if not res.converged:
        world.counters.consensus_failures += 1
    moves = []
    for i in range(len(world.nodes)):
        jobs, _ = sols[i]
        nbrs = world.grid.neighbors(i)
        if not nbrs:
            continue
        # without agreement the node follows its desired migrations
        o_opt = res.outgoing(i, nbrs) if res.converged else desired[i].w_bar
        p_matrix = {}
        for job in jobs:
            if movable(job, cfg.tau, cfg.min_fraction):
                p = border[i].get(job.id)
                if p is None:
                    v = world.vehicles[job.owner_vehicle]
                    p = handover_probs(v.position, v.velocity, world.grid, i, cfg.kappa)
                p_matrix[job.id] = p
        plan = round_allocation(p_matrix, o_opt, jobs, desired[i].k_sets, nbrs, cfg.tau, cfg.eps_p, cfg.min_fraction)
        for j, ks in plan.z_sets.items():
            moves.extend((k, j) for k in ks)
    return moves, res.iterations


def baseline_migrations(world: World, sols, events: list[Handover]) -> list[tuple[int, int]]:
    moves = []
    for ev in events:
        k = world.vehicles[ev.vehicle].outstanding_job
        if k is None:
            continue
        job = world.jobs[k]
        _, sol = sols[job.host]
        target = baseline_decision(world.cfg.policy, job, ev.new, float(sol.f[0]), world.cfg.tau)
        if target is not None:
            moves.append((k, target))
    return moves


def run_slot(world: World) -> SlotRecord:
    cfg = world.cfg
    tau = cfg.tau
    n = len(world.nodes)
    # 1. mobility and handovers
    events = mobility_step(world.vehicles, world.grid, tau, world.rng_move, (cfg.speed_min, cfg.speed_max))
    world.counters.handovers += len(events)
    # 2. arrivals
    spawn_jobs(world)
    pv = np.clip(world.rng_pv.normal(cfg.pv_mean, cfg.pv_sigma, size=n), cfg.pv_min, cfg.pv_max)
    # 3. local control at every node
    border = [_border_jobs(world, i) for i in range(n)]
    sols = local_phase(world, pv, border)
    plan = {}
    for jobs, sol in sols:
        for job, w in zip(jobs, sol.w[0]):
            plan[job.id] = float(w)
    # 4. migration decisions
    iterations = 0
    if cfg.policy == "ease":
        moves, iterations = ease_migrations(world, sols, border)
    elif cfg.policy == "keep":
        moves = []
    else:
        moves = baseline_migrations(world, sols, events)
    # 5. apply migrations; containers in transit are not processed this slot
    migr_energy = np.zeros(n)
    in_transit = set()
    for k, dst in moves:
        job = world.jobs[k]
        src = job.host
        e_src, _ = migration_energy(job, world.nodes[src])
        _, e_dst = migration_energy(job, world.nodes[dst])
        migr_energy[src] += e_src
        migr_energy[dst] += e_dst
        job.host = dst
        job.deadline -= cfg.T_migr
        job.migrations += 1
        in_transit.add(k)
        plan[k] = 0.0
    world.counters.migrations += len(moves)
    # 6-7. repair the plan where it is infeasible, then process
    proc_energy = np.zeros(n)
    tx_energy = np.zeros(n)
    finished, dropped = [], []
    for i, node in enumerate(world.nodes):
        jobs = world.hosted(i)
        w = np.array([min(max(plan.get(j.id, 0.0), 0.0), j.intensity) for j in jobs])
        rep = pathological_handler(node, jobs, w, tau, cfg.min_fraction)
        world.counters.suspended += len(rep.suspended)
        drop_ids = set(rep.dropped)
        ext_ids = set(rep.extended)
        for job, wk in zip(jobs, rep.w):
            if job.id in drop_ids:
                dropped.append(job.id)
                continue
            if job.intensity - wk <= 1e-9 * job.intensity0:
                wk = job.intensity
            new = advance_job(job, wk, tau)
            proc_energy[i] += node.q_proc * wk
            world.counters.processed_work += wk
            if job.id in ext_ids:
                shift = tau - new.deadline
                world.deadline_shift[job.id] = world.deadline_shift.get(job.id, 0.0) + shift
                new.deadline = tau
                new.extended = True
                world.counters.extended += 1
            world.jobs[job.id] = new
            if new.intensity <= 0.0:
                finished.append(job.id)
    # 8. deliver results and release vehicles
    for k in finished:
        job = world.jobs.pop(k)
        v = world.vehicles[job.owner_vehicle]
        R = cfg.result_size
        if v.serving_cell == job.host:
            tx_energy[job.host] += world.nodes[job.host].E_b_ran * R
            world.counters.finished_at_serving += 1
        else:
            tx_energy[job.host] += world.nodes[job.host].E_b_wired * R
            tx_energy[v.serving_cell] += world.nodes[v.serving_cell].E_b_ran * R
        v.outstanding_job = None
        world.counters.finished += 1
        world.deadline_shift.pop(k, None)
    for k in dropped:
        job = world.jobs.pop(k)
        world.vehicles[job.owner_vehicle].outstanding_job = None
        world.counters.dropped += 1
        world.deadline_shift.pop(k, None)
    # 9. energy books
    grid_total = green_total = 0.0
    for i, node in enumerate(world.nodes):
        led = world.ledgers[i]
        before_green, before_grid = led.harvested_used, led.grid_drawn
        idle = node.circuit_power * tau
        led.book(pv[i] * tau, idle, proc_energy[i], migr_energy[i], tx_energy[i])
        green, grid = led.harvested_used - before_green, led.grid_drawn - before_grid
        consumed = idle + proc_energy[i] + migr_energy[i] + tx_energy[i]
        if abs(consumed - (green + grid)) > 1e-9 * max(consumed, 1.0):
            raise InvariantError(f"node {i}: energy books do not close in slot {world.slot}")
        grid_total += grid
        green_total += green
    world.slot += 1
    check_invariants(world)
    rec = SlotRecord(world.slot, len(world.jobs), grid_total, green_total, float(proc_energy.sum()),
                     float(migr_energy.sum()), len(moves), iterations)
    world.series.append(rec)
    return rec


def check_invariants(world: World) -> None:
    c = world.counters
    if c.generated != c.finished + c.dropped + len(world.jobs):
        raise InvariantError("job accounting does not close")
    tau = world.cfg.tau
    owners = set()
    for job in world.jobs.values():
        expected_size = job.bits_per_gop * job.intensity
        if abs(job.size - expected_size) > 1e-9 * max(job.size0, 1.0):
            raise InvariantError(f"job {job.id}: size {job.size} drifted from {expected_size}")
        expected_deadline = (job.type.deadline_total - tau * (world.slot - job.created_slot)
                             - world.cfg.T_migr * job.migrations + world.deadline_shift.get(job.id, 0.0))
        if abs(job.deadline - expected_deadline) > 1e-9 * job.type.deadline_total:
            raise InvariantError(f"job {job.id}: deadline {job.deadline} != {expected_deadline}")
        if job.deadline <= 0:
            raise InvariantError(f"job {job.id} survived its deadline")
        if world.vehicles[job.owner_vehicle].outstanding_job != job.id:
            raise InvariantError(f"job {job.id} lost its vehicle")
        owners.add(job.owner_vehicle)
    if len(owners) != len(world.jobs):
        raise InvariantError("a vehicle owns more than one job")
    for led in world.ledgers:
        if not 0.0 <= led.efficiency <= 1.0:
            raise InvariantError("efficiency outside [0, 1]")


def simulate(cfg: ScenarioConfig) -> MetricsReport:
    world = World.create(cfg)
    for _ in range(cfg.duration):
        run_slot(world)
    return finalize_metrics(world.ledgers, world.counters, cfg.duration * cfg.tau, world.series)
