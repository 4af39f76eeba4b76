"""Turn the continuous migration rates into a job-to-neighbour assignment."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .consensus import ConsensusNodeState, node_cost
from .model import ContractError, Job


@dataclass(frozen=True)
class MigrationPlan:
    neighbors: tuple[int, ...]
    z_sets: dict[int, tuple[int, ...]]
    o_r: np.ndarray  # Gop/s per neighbour
    retained: tuple[int, ...]

    def target_of(self) -> dict[int, int]:
        return {k: j for j, ks in self.z_sets.items() for k in ks}


def movable(job: Job, tau: float, min_fraction: float = 0.01) -> bool:
    """Jobs nearly done or about to expire are not worth moving."""
    return job.intensity >= min_fraction * job.intensity0 and job.deadline >= 2 * tau


def round_allocation(p_matrix: Mapping[int, np.ndarray], o_opt: np.ndarray, jobs: Sequence[Job],
                     k_sets: Mapping[int, Sequence[int]], neighbors: Sequence[int], tau: float,
                     eps_p: float = 0.05, min_fraction: float = 0.01) -> MigrationPlan:
    """Greedy rounding of ``o_opt`` starting from the desired job sets.

    ``p_matrix[k]`` is job k's handover probability vector over ``neighbors``;
    jobs without an entry are never picked to fill a shortfall.
    """
    if eps_p <= 0:
        raise ContractError("eps_p must be > 0")
    neighbors = tuple(neighbors)
    o_opt = np.asarray(o_opt, dtype=float)
    if o_opt.shape != (len(neighbors),):
        raise ContractError("o_opt must have one entry per neighbour")
    by_id = {job.id: job for job in jobs}
    rate = {k: job.intensity / job.deadline for k, job in by_id.items()}
    z = {j: sorted(k_sets.get(j, ())) for j in neighbors}
    desired = {k for ks in z.values() for k in ks}
    unknown = desired - by_id.keys()
    if unknown:
        raise ContractError(f"desired sets name unknown jobs {sorted(unknown)}")
    pool = sorted(k for k, job in by_id.items() if movable(job, tau, min_fraction) and k not in desired)
    o_r = np.array([sum(rate[k] for k in z[j]) for j in neighbors])
    diff = o_r - o_opt
    masked: set[tuple[int, int]] = set()
    for col, j in enumerate(neighbors):
        while diff[col] > eps_p and z[j]:
            # keep the jobs that leave the smallest mismatch; ties go to the lowest id
            k = min(z[j], key=lambda k: (abs(diff[col] - rate[k]), k))
            z[j].remove(k)
            o_r[col] -= rate[k]
            diff[col] -= rate[k]
            pool.append(k)
            pool.sort()
        while diff[col] < -eps_p:
            cands = [k for k in pool if (k, j) not in masked and k in p_matrix]
            if not cands:
                break
            k = max(cands, key=lambda k: (p_matrix[k][col], -k))
            z[j].append(k)
            pool.remove(k)
            o_r[col] += rate[k]
            diff[col] += rate[k]
            masked.add((k, j))
    assigned = {k for ks in z.values() for k in ks}
    retained = tuple(sorted(k for k in by_id if k not in assigned))
    return MigrationPlan(neighbors, {j: tuple(sorted(z[j])) for j in neighbors}, o_r, retained)


def plan_cost(rates: Mapping[tuple[int, int], float], states: Sequence[ConsensusNodeState]) -> float:
    """Network cost of fixed link rates, with the smallest capacity slack each node needs."""
    total = 0.0
    for s in states:
        o = np.array([rates.get((s.node, j), 0.0) for j in s.neighbors])
        ot = np.array([rates.get((j, s.node), 0.0) for j in s.neighbors])
        slack = max(ot.sum() - o.sum() - s.capacity, 0.0)
        total += node_cost(o, ot, slack, s.w_bar, s.p_hat, s.q_out, s.q_in, s.rho, s.c_hat)
    return total


def rounding_gain(rounded: Mapping[tuple[int, int], float], states: Sequence[ConsensusNodeState]) -> float:
    """Cost of simply following the desired rates divided by the cost of the rounded plan."""
    naive = {(s.node, j): float(w) for s in states for j, w in zip(s.neighbors, s.w_bar)}
    c_naive = plan_cost(naive, states)
    c_round = plan_cost(rounded, states)
    if c_round == 0.0:
        return 1.0 if c_naive == 0.0 else float("inf")
    return c_naive / c_round
