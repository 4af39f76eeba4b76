"""Scenario parameters of a simulation run."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from ..model import MB, ContractError, JobType, default_catalog, validate_catalog
from .geometry import DEFAULT_CELLS

POLICIES = ("ease", "keep", "migrate", "threshold")


@dataclass(frozen=True)
class ScenarioConfig:
    # deployment
    cells: tuple[tuple[int, int], ...] = DEFAULT_CELLS
    server_kinds: tuple[str, ...] = ("nettrix",)  # repeated over the cells in order
    pitch: float = 400.0  # m
    P_ran: float = 50.2  # W
    P_wired: float = 20.0  # W
    E_b_ran: float = 1e-9  # J/bit
    E_b_wired: float = 250e-12  # J/bit
    sigma_s: float = 500e-9  # J/bit
    sigma_d: float = 500e-9  # J/bit
    E_s: float = 0.25  # J
    E_d: float = 0.25  # J
    container_size: float = 50 * MB  # bit
    T_migr: float = 2.0  # s
    # overrides of the catalog-derived migration prices (None: derive)
    q_tx: Optional[float] = None  # J/Gop
    q_rx: Optional[float] = None  # J/Gop
    xi_M: Optional[float] = None  # (Gop/s)/bit
    # traffic
    catalog: tuple[JobType, ...] = field(default_factory=default_catalog)
    p: float = 0.25
    n_vehicles: int = 100
    speed_min: float = 5.0  # m/s
    speed_max: float = 15.0
    border_width: float = 40.0  # m
    kappa: float = 4.0
    result_size: float = 1e6  # bit
    # harvesting
    pv_mean: float = 370.0  # W
    pv_sigma: float = 10.0
    pv_min: float = 250.0
    pv_max: float = 400.0
    sampled_forecast: bool = False
    # control
    tau: float = 3.0  # s
    T: int = 5
    window: float = 300.0  # s
    gamma: float = 100.0
    c: float = 500.0
    c_hat: float = 10.0
    rho: float = 2.5
    alpha_safety: float = 0.9
    max_iters: int = 500
    primal_tol: float = 1e-4
    warm_start: bool = False  # start each consensus run from the previous slot's multipliers
    eps_p: float = 0.05  # Gop/s
    min_fraction: float = 0.01  # of a job's total intensity
    # run
    policy: str = "ease"
    seed: int = 0
    duration: int = 1000  # slots

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ContractError("p must be in [0,1]")
        if not self.pv_min <= self.pv_mean <= self.pv_max:
            raise ContractError("pv_min <= pv_mean <= pv_max must hold")
        if self.pv_sigma < 0:
            raise ContractError("pv_sigma must be >= 0")
        if self.policy not in POLICIES:
            raise ContractError(f"policy must be one of {POLICIES}")
        if self.tau <= 0 or self.T < 2 or self.duration <= 0:
            raise ContractError("tau > 0, T >= 2 and duration > 0 are required")
        if self.n_vehicles < 0:
            raise ContractError("n_vehicles must be >= 0")
        if not 0 < self.speed_min <= self.speed_max:
            raise ContractError("0 < speed_min <= speed_max must hold")
        if min(self.gamma, self.c, self.c_hat, self.rho, self.eps_p) <= 0:
            raise ContractError("weights and eps_p must be > 0")
        if not 0 < self.alpha_safety:
            raise ContractError("alpha_safety must be > 0")
        if not self.cells or not self.server_kinds:
            raise ContractError("cells and server_kinds must be non-empty")
        validate_catalog(self.catalog)
