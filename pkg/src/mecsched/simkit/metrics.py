"""Run counters and the summary report of a simulation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from ..model import ContractError, EnergyLedger


@dataclass
class Counters:
    generated: int = 0
    finished: int = 0
    dropped: int = 0
    finished_at_serving: int = 0
    migrations: int = 0
    handovers: int = 0
    suspended: int = 0
    extended: int = 0
    generated_work: float = 0.0  # Gop
    processed_work: float = 0.0  # Gop
    consensus_runs: int = 0
    consensus_failures: int = 0
    consensus_iterations: int = 0


@dataclass
class SlotRecord:
    slot: int
    jobs: int
    grid: float  # J
    green: float  # J
    processing: float  # J
    migration: float  # J
    migrations: int
    consensus_iterations: int


@dataclass(frozen=True)
class MetricsReport:
    avg_processing_power: float  # W per node
    avg_migration_power: float  # W per node
    efficiency: float
    executed_fraction: float
    finished_fraction: float
    drop_rate: float
    min_latency_fraction: float
    generated: int
    finished: int
    dropped: int
    migrations: int
    handovers: int
    consensus_failures: int
    mean_consensus_iterations: float
    series: tuple[SlotRecord, ...] = field(default=(), compare=True, repr=False)

    def scalars(self) -> dict[str, float]:
        return {k: v for k, v in self.__dict__.items() if k != "series"}


def finalize_metrics(ledgers: Sequence[EnergyLedger], counters: Counters, duration: float,
                     series: Sequence[SlotRecord] = ()) -> MetricsReport:
    """Average powers over ``duration`` seconds and the job-level ratios."""
    if duration <= 0:
        raise ContractError("duration must be > 0")
    n = max(len(ledgers), 1)
    total = EnergyLedger()
    for led in ledgers:
        total = total.merged(led)
    gen = counters.generated
    runs = counters.consensus_runs
    return MetricsReport(
        avg_processing_power=float(total.processing / duration / n),
        avg_migration_power=float(total.migration / duration / n),
        efficiency=float(total.efficiency),
        executed_fraction=counters.processed_work / counters.generated_work if counters.generated_work else 1.0,
        finished_fraction=counters.finished / gen if gen else 1.0,
        drop_rate=counters.dropped / gen if gen else 0.0,
        min_latency_fraction=counters.finished_at_serving / counters.finished if counters.finished else 1.0,
        generated=gen,
        finished=counters.finished,
        dropped=counters.dropped,
        migrations=counters.migrations,
        handovers=counters.handovers,
        consensus_failures=counters.consensus_failures,
        mean_consensus_iterations=counters.consensus_iterations / runs if runs else 0.0,
        series=tuple(series),
    )
