"""Domain types and the per-slot state and energy equations of an edge node.

Internal units: work in Gop (1 Gop = 1e9 CPU cycles), time in s, data in bit,
power in W, energy in J.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

GB = 8e9  # bit
MB = 8e6  # bit


class ContractError(ValueError):
    """A precondition of a model operation was violated by the caller."""


@dataclass(frozen=True)
class JobType:
    """Generation template of a job: total intensity, deadline and size."""

    name: str
    intensity_total: float  # Gop
    deadline_total: float  # s
    size_total: float  # bit
    gen_prob: float
    result_size: float = 1e6  # bit

    def __post_init__(self):
        if self.intensity_total <= 0 or self.deadline_total <= 0 or self.size_total <= 0:
            raise ContractError(f"job type {self.name!r}: intensity, deadline and size must be > 0")
        if not 0.0 <= self.gen_prob <= 1.0:
            raise ContractError(f"job type {self.name!r}: gen_prob must be in [0,1]")

    @property
    def bits_per_gop(self) -> float:
        return self.size_total / self.intensity_total


def default_catalog() -> tuple[JobType, ...]:
    return (
        JobType("type1", 10.0, 20.0, 2 * GB, 0.4),
        JobType("type2", 16.0, 30.0, 10 * GB, 0.2),
        JobType("type3", 12.0, 40.0, 0.1 * GB, 0.4),
    )


def validate_catalog(catalog: Sequence[JobType]) -> None:
    if not catalog:
        raise ContractError("job catalog is empty")
    total = sum(jt.gen_prob for jt in catalog)
    if abs(total - 1.0) > 1e-9:
        raise ContractError(f"job type probabilities sum to {total}, expected 1")


@dataclass(slots=True)
class Job:
    """A job hosted at an edge node: residual (intensity, deadline, size)."""

    id: int
    owner_vehicle: int
    type: JobType
    intensity: float  # Gop, residual
    deadline: float  # s, residual
    size: float  # bit, residual
    intensity0: float
    size0: float
    host: int
    migrations: int = 0
    extended: bool = False
    created_slot: int = 0

    @classmethod
    def spawn(cls, job_id: int, vehicle: int, jtype: JobType, host: int, slot: int = 0) -> "Job":
        return cls(
            id=job_id,
            owner_vehicle=vehicle,
            type=jtype,
            intensity=jtype.intensity_total,
            deadline=jtype.deadline_total,
            size=jtype.size_total,
            intensity0=jtype.intensity_total,
            size0=jtype.size_total,
            host=host,
            created_slot=slot,
        )

    @property
    def rate(self) -> float:
        """Residual intensity per residual second, I/D (Gop/s)."""
        return self.intensity / self.deadline

    @property
    def bits_per_gop(self) -> float:
        return self.size0 / self.intensity0


def advance_job(job: Job, w: float, tau: float) -> Job:
    """Process ``w`` Gop of ``job`` during one slot of length ``tau``."""
    if w < 0 or w > job.intensity * (1 + 1e-12) + 1e-12:
        raise ContractError(f"workload {w} outside [0, {job.intensity}] for job {job.id}")
    w = min(w, job.intensity)
    return replace(
        job,
        intensity=job.intensity - w,
        deadline=job.deadline - tau,
        size=job.size - job.bits_per_gop * w,
    )


@dataclass(frozen=True)
class NodeConfig:
    """Static server and radio parameters of one base station with its edge host."""

    id: int
    position: tuple[float, float]
    neighbors: frozenset[int]
    F: float  # Gop/s
    M: float  # bit
    P_idle: float  # W
    P_max: float  # W
    P_ran: float = 50.2
    P_wired: float = 20.0
    E_b_ran: float = 1e-9  # J/bit
    E_b_wired: float = 250e-12  # J/bit
    sigma_s: float = 500e-9  # J/bit
    sigma_d: float = 500e-9  # J/bit
    E_s: float = 0.25  # J
    E_d: float = 0.25  # J
    L: float = 50 * MB  # bit
    T_migr: float = 2.0  # s
    q_proc: Optional[float] = None  # J/Gop
    q_tx: float = 0.0  # J/Gop
    q_rx: float = 0.0  # J/Gop
    xi_M: float = 0.0  # (Gop/s)/bit
    kind: str = "custom"

    def __post_init__(self):
        if self.F <= 0 or self.M <= 0:
            raise ContractError(f"node {self.id}: F and M must be > 0")
        if self.P_max <= self.P_idle:
            raise ContractError(f"node {self.id}: P_max must exceed P_idle")
        energies = (self.P_idle, self.P_ran, self.P_wired, self.E_b_ran, self.E_b_wired,
                    self.sigma_s, self.sigma_d, self.E_s, self.E_d, self.L, self.T_migr)
        if any(v < 0 for v in energies):
            raise ContractError(f"node {self.id}: energy parameters must be >= 0")
        if self.q_proc is None:
            # linear interpolation of the load/power curve between idle and full load
            object.__setattr__(self, "q_proc", (self.P_max - self.P_idle) / self.F)

    @property
    def circuit_power(self) -> float:
        return self.P_idle + self.P_ran + self.P_wired


SERVER_PRESETS = {
    "hp": dict(F=3.3, M=64 * GB, P_idle=94.0, P_max=299.0),
    "nettrix": dict(F=7.6, M=256 * GB, P_idle=110.0, P_max=468.0),
}


def derived_costs(catalog: Sequence[JobType], *, sigma_s=500e-9, sigma_d=500e-9, E_s=0.25,
                  E_d=0.25, E_b_wired=250e-12, L=50 * MB) -> dict[str, float]:
    """Catalog-averaged migration costs per Gop and memory-to-rate factor.

    ``q_tx``/``q_rx`` spread the per-container migration energy of the source and
    destination over the intensity of the moved job, so that a migrated rate of
    r Gop/s is priced at q*r W. ``xi_M`` is the rate sustainable per bit of memory
    when a job is spread over its whole deadline. ``beta`` is the mean number of
    state bits per Gop.
    """
    q_tx = sum(jt.gen_prob * (sigma_s * L + E_s + E_b_wired * jt.size_total) / jt.intensity_total
               for jt in catalog)
    q_rx = sum(jt.gen_prob * (sigma_d * L + E_d) / jt.intensity_total for jt in catalog)
    xi_M = sum(jt.gen_prob * jt.intensity_total / (jt.size_total * jt.deadline_total)
               for jt in catalog)
    beta = sum(jt.gen_prob * jt.bits_per_gop for jt in catalog)
    return {"q_tx": q_tx, "q_rx": q_rx, "xi_M": xi_M, "beta": beta}


def migration_energy(job: Job, cfg: NodeConfig) -> tuple[float, float]:
    """Energy (source, destination) of moving the container of ``job``."""
    if job.size < 0:
        raise ContractError(f"job {job.id} has negative size")
    source = cfg.sigma_s * cfg.L + cfg.E_b_wired * job.size + cfg.E_s
    dest = cfg.sigma_d * cfg.L + cfg.E_d
    return source, dest


def harvested_energy(cfg: NodeConfig, p_pv: float, n_inc: float, n_out: float, tau: float) -> float:
    """Green energy left for computing in a slot after circuits and migrations (may be < 0)."""
    if tau <= 0:
        raise ContractError("tau must be > 0")
    return ((p_pv - cfg.P_ran - cfg.P_wired - cfg.P_idle) * tau
            - n_inc * (cfg.sigma_d * cfg.L + cfg.E_d)
            - n_out * ((cfg.sigma_s + cfg.E_b_wired) * cfg.L + cfg.E_s))


@dataclass(frozen=True)
class SlotContext:
    V: float = 0.0  # results delivered over the radio
    C: float = 0.0  # results routed over the backhaul
    N_inc: float = 0.0
    N_out: float = 0.0
    E_H: float = 0.0  # J

    def __post_init__(self):
        if min(self.V, self.C, self.N_inc, self.N_out) < 0:
            raise ContractError("slot counts must be >= 0")


def residual_energy_f(cfg: NodeConfig, w_sum: float, ctx: SlotContext, result_size: float) -> float:
    """Energy the node would draw from the grid in a slot (negative: green surplus)."""
    if w_sum < 0:
        raise ContractError("total workload must be >= 0")
    return (cfg.q_proc * w_sum + ctx.V * cfg.E_b_ran * result_size
            + ctx.C * cfg.E_b_wired * result_size - ctx.E_H)


def state_cost_g(jobs: Sequence[Job]) -> float:
    """Residual processing cost: sum of squared residual rates I/D."""
    total = 0.0
    for job in jobs:
        if job.deadline <= 0:
            raise ContractError(f"job {job.id} has non-positive deadline {job.deadline}")
        total += (job.intensity / job.deadline) ** 2
    return total


def check_capacity(cfg: NodeConfig, jobs: Sequence[Job], w: Sequence[float], tau: float) -> tuple[float, float]:
    """Residual processing rate and memory; negative values give the violation size."""
    if len(jobs) != len(w):
        raise ContractError("jobs and workloads differ in length")
    proc = cfg.F - math.fsum(w) / tau
    mem = cfg.M - math.fsum(job.size for job in jobs)
    return proc, mem


@dataclass
class EnergyLedger:
    """Running energy totals of one node (J); every field is non-decreasing."""

    harvested_used: float = 0.0
    grid_drawn: float = 0.0
    idle: float = 0.0
    processing: float = 0.0
    migration: float = 0.0
    transmission: float = 0.0
    harvested_available: float = 0.0

    def book(self, harvest: float, idle: float, processing: float, migration: float,
             transmission: float) -> float:
        """Record one slot; return the grid energy drawn in it."""
        parts = (harvest, idle, processing, migration, transmission)
        if min(parts) < 0:
            raise ContractError(f"negative energy term in {parts}")
        consumed = idle + processing + migration + transmission
        green = min(consumed, harvest)
        grid = consumed - green
        self.harvested_available += harvest
        self.harvested_used += green
        self.grid_drawn += grid
        self.idle += idle
        self.processing += processing
        self.migration += migration
        self.transmission += transmission
        return grid

    @property
    def consumed(self) -> float:
        return self.idle + self.processing + self.migration + self.transmission

    @property
    def efficiency(self) -> float:
        total = self.harvested_used + self.grid_drawn
        return 1.0 if total == 0 else self.harvested_used / total

    def merged(self, other: "EnergyLedger") -> "EnergyLedger":
        return EnergyLedger(*(a + b for a, b in zip(self.astuple(), other.astuple())))

    def astuple(self) -> tuple[float, ...]:
        return (self.harvested_used, self.grid_drawn, self.idle, self.processing,
                self.migration, self.transmission, self.harvested_available)
