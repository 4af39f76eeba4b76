"""Greedy repair of infeasible slot plans and the reference migration policies."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..model import Job, NodeConfig


@dataclass
class Repair:
    w: np.ndarray
    suspended: list[int] = field(default_factory=list)
    dropped: list[int] = field(default_factory=list)
    extended: list[int] = field(default_factory=list)


def _expiry_slot(job: Job, tau: float) -> int:
    return max(math.ceil(job.deadline / tau - 1e-12), 0)


def pathological_handler(cfg: NodeConfig, jobs: Sequence[Job], w_proposed: Sequence[float], tau: float,
                         eps_fraction: float = 0.01) -> Repair:
    """Make a slot plan executable and settle jobs whose deadline runs out in the slot.

    Over capacity: pause jobs from the back of the (expiry slot, intensity)
    ranking until the workload fits, then hand the freed capacity to the jobs
    closest to their deadline. Over memory: pause jobs from the back of the
    (expiry slot, size) ranking until the rest fit. A job that expires in the
    slot with work left gets one extra slot if the rest is below
    ``eps_fraction`` of its total intensity and is dropped otherwise.
    """
    w = np.array(w_proposed, dtype=float)
    out = Repair(w)
    if not jobs:
        return out
    paused: set[int] = set()

    budget = cfg.F * tau
    if w.sum() > budget * (1 + 1e-12):
        order = sorted(range(len(jobs)), key=lambda k: (_expiry_slot(jobs[k], tau), jobs[k].intensity, jobs[k].id))
        for k in reversed(order):
            if w.sum() <= budget * (1 + 1e-12):
                break
            if w[k] > 0:
                w[k] = 0.0
                paused.add(k)
        spare = budget - w.sum()
        for k in order:
            if spare <= 0:
                break
            if k in paused:
                continue
            extra = min(spare, jobs[k].intensity - w[k])
            if extra > 0:
                w[k] += extra
                spare -= extra

    if sum(job.size for job in jobs) > cfg.M:
        order = sorted(range(len(jobs)), key=lambda k: (_expiry_slot(jobs[k], tau), jobs[k].size, jobs[k].id))
        resident = sum(job.size for job in jobs)
        for k in reversed(order):
            if resident <= cfg.M:
                break
            resident -= jobs[k].size
            w[k] = 0.0
            paused.add(k)

    out.suspended = sorted(jobs[k].id for k in paused)
    for k, job in enumerate(jobs):
        if job.deadline > tau:
            continue
        left = job.intensity - w[k]
        if left <= 1e-9 * job.intensity0:
            continue
        if left < eps_fraction * job.intensity0 and not job.extended:
            out.extended.append(job.id)
        else:
            out.dropped.append(job.id)
    return out


def baseline_decision(policy: str, job: Job, new_cell: int, f_host: float, tau: float) -> Optional[int]:
    """Target node for ``job`` after its vehicle handed over to ``new_cell`` (None: stay)."""
    if policy == "keep" or job.host == new_cell:
        return None
    # a job due in this slot has to finish where it is
    if job.deadline <= tau:
        return None
    if policy == "migrate":
        return new_cell
    if policy == "threshold":
        return new_cell if f_host > 0 else None
    raise ValueError(f"no baseline rule for policy {policy!r}")
