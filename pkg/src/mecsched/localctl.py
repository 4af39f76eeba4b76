"""Per-node receding-horizon control of job workloads.

Each slot a node plans how much of every hosted job to process over the next
``T`` slots, trading the residual processing cost of its jobs against the grid
energy it would need, with soft processing and memory capacities. Only the
first row of the plan is applied; the remaining rows give the residual power,
compute and memory estimates handed to the migration agreement.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numba import njit

from .model import GB, ContractError, Job, NodeConfig, harvested_energy
from .qp import BlockQP, solve_block_qp


@dataclass(frozen=True)
class MpcWeights:
    gamma: float = 100.0  # processing state cost weight
    c_F: float = 500.0  # per Gop/s of capacity overflow
    c_M: float = 500.0  # per GB of memory overflow

    def __post_init__(self):
        if min(self.gamma, self.c_F, self.c_M) <= 0:
            raise ContractError("MPC weights must be > 0")


class ArrivalPredictor:
    """Circular buffer of (arrival time, I/D) pairs over a sliding window."""

    def __init__(self, window: float = 300.0):
        self.window = window
        self._buf: deque[tuple[float, float]] = deque()
        self._start: Optional[float] = None

    def push(self, now: float, rate: float) -> None:
        if self._start is None:
            self._start = now
        self._buf.append((now, rate))

    def start(self, now: float) -> None:
        if self._start is None:
            self._start = now

    def _evict(self, now: float) -> None:
        while self._buf and self._buf[0][0] <= now - self.window:
            self._buf.popleft()

    def flush(self) -> None:
        self._buf.clear()

    def mean_rate(self, now: float) -> float:
        """Average I/D of the jobs generated in the last window (0 if none)."""
        self._evict(now)
        if not self._buf:
            return 0.0
        return math.fsum(r for _, r in self._buf) / len(self._buf)

    def arrivals_per_slot(self, now: float, tau: float) -> float:
        self._evict(now)
        if not self._buf or self._start is None:
            return 0.0
        span = min(self.window, now - self._start + tau)
        return len(self._buf) * tau / span


@dataclass
class HorizonEstimates:
    e_h: np.ndarray  # J per slot
    incoming_rate: float = 0.0  # mean I/D of recent arrivals, Gop/s
    v_seq: Optional[np.ndarray] = None
    c_seq: Optional[np.ndarray] = None
    extra_load: Optional[np.ndarray] = None  # Gop per slot reserved for future arrivals
    result_size: float = 1e6

    def __post_init__(self):
        self.e_h = np.asarray(self.e_h, dtype=float)
        T = len(self.e_h)
        for name in ("v_seq", "c_seq", "extra_load"):
            val = getattr(self, name)
            val = np.zeros(T) if val is None else np.asarray(val, dtype=float)
            if len(val) != T:
                raise ContractError(f"{name} has length {len(val)}, expected {T}")
            setattr(self, name, val)

    @property
    def T(self) -> int:
        return len(self.e_h)


def forecast_horizon(cfg: NodeConfig, *, p_pv_now: float, T: int, tau: float,
                     pv_mean: float = 370.0, pv_sigma: float = 10.0,
                     pv_bounds: tuple[float, float] = (250.0, 400.0),
                     pending_migration_energy: float = 0.0,
                     predictor: Optional[ArrivalPredictor] = None, now: float = 0.0,
                     n_inc: int = 0, n_out: int = 0,
                     jobs: Sequence[Job] = (), remote_jobs: frozenset = frozenset(),
                     result_size: float = 1e6,
                     rng: Optional[np.random.Generator] = None) -> HorizonEstimates:
    """Exogenous inputs of the local problem over the next ``T`` slots.

    The current slot uses the measured PV sample and the already scheduled
    migration energy. Later slots use the PV mean (or Gaussian draws if ``rng``
    is given); the migrations expected from vehicles in the border annulus
    (``n_inc``/``n_out``) are charged to the next slot.
    """
    if T < 2:
        raise ContractError("horizon T must be >= 2")
    e_h = np.empty(T)
    e_h[0] = harvested_energy(cfg, p_pv_now, 0, 0, tau) - pending_migration_energy
    for t in range(1, T):
        if rng is None:
            pv = pv_mean
        else:
            pv = float(np.clip(rng.normal(pv_mean, pv_sigma), *pv_bounds))
        if t == 1:
            e_h[t] = harvested_energy(cfg, pv, n_inc, n_out, tau)
        else:
            e_h[t] = harvested_energy(cfg, pv, 0, 0, tau)

    rate = predictor.mean_rate(now) if predictor is not None else 0.0
    per_slot = predictor.arrivals_per_slot(now, tau) if predictor is not None else 0.0
    extra = np.arange(T) * per_slot * rate * tau

    v_seq = np.zeros(T)
    c_seq = np.zeros(T)
    for job in jobs:
        t_f = _forced_slot(job.deadline, tau, T)
        if t_f < T:
            if job.id in remote_jobs:
                c_seq[t_f] += 1
            else:
                v_seq[t_f] += 1
    return HorizonEstimates(e_h, rate, v_seq, c_seq, extra, result_size)


def _forced_slot(deadline: float, tau: float, T: int) -> int:
    """First slot in which the residual deadline is within one slot (T if none)."""
    if deadline <= tau:
        return 0
    t_f = math.ceil((deadline - tau) / tau - 1e-12)
    return min(t_f, T)


@dataclass
class LocalSolution:
    w: np.ndarray  # T x K, Gop
    delta: np.ndarray  # T x 2: capacity (Gop/s) and memory (bit) overflow
    w0: np.ndarray
    p_hat: float  # W
    f_hat: float  # Gop/s
    m_hat: float  # bit
    objective: float
    f: np.ndarray  # grid energy per slot, J
    job_ids: tuple[int, ...] = ()
    solver_iterations: int = 0
    converged: bool = True


@dataclass
class _Layout:
    """Index bookkeeping of the free workload variables."""

    T: int
    n_free: list[int]
    forced: list[int]
    offset: list[int]
    n_w: int

    def var(self, k: int, s: int) -> int:
        return self.offset[k] + s


def _layout(jobs: Sequence[Job], tau: float, T: int) -> _Layout:
    n_free, forced, offset = [], [], []
    pos = 0
    for job in jobs:
        t_f = _forced_slot(job.deadline, tau, T)
        forced.append(t_f)
        n = min(t_f, T)
        n_free.append(n)
        offset.append(pos)
        pos += n
    return _Layout(T, n_free, forced, offset, pos)


def _workload_matrix(jobs: Sequence[Job], lay: _Layout, x_w: np.ndarray) -> np.ndarray:
    """Expand free variables into the full T x K plan (forced entries derived)."""
    T, K = lay.T, len(jobs)
    w = np.zeros((T, K))
    for k, job in enumerate(jobs):
        n = lay.n_free[k]
        if n:
            w[:n, k] = x_w[lay.offset[k]:lay.offset[k] + n]
        t_f = lay.forced[k]
        if t_f < T:
            w[t_f, k] = job.intensity - w[:t_f, k].sum() if t_f else job.intensity
    return w


def _trajectories(jobs: Sequence[Job], w: np.ndarray, tau: float):
    """Residual intensities I(t) and deadlines D(t) at the start of each slot."""
    T, K = w.shape
    I0 = np.array([j.intensity for j in jobs])
    D0 = np.array([j.deadline for j in jobs])
    done = np.vstack([np.zeros((1, K)), np.cumsum(w, axis=0)[:-1]])
    I = np.maximum(I0[None, :] - done, 0.0)
    D = D0[None, :] - tau * np.arange(T)[:, None]
    return I, D


def local_objective(jobs: Sequence[Job], w: np.ndarray, est: HorizonEstimates, cfg: NodeConfig,
                    weights: MpcWeights, tau: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Penalized local cost of a full plan ``w`` (T x K).

    Returns (objective, f per slot, overflow matrix) with the overflow at its
    optimal value max(excess, 0) for the given plan.
    """
    T = est.T
    w = np.asarray(w, dtype=float).reshape(T, len(jobs))
    W = w.sum(axis=1) + est.extra_load
    f = (cfg.q_proc * W + est.v_seq * cfg.E_b_ran * est.result_size
         + est.c_seq * cfg.E_b_wired * est.result_size - est.e_h)
    g = 0.0
    mem = np.zeros(T)
    if jobs:
        I, D = _trajectories(jobs, w, tau)
        ratio = np.array([j.bits_per_gop for j in jobs])
        live = (I > 0) & (D > 0)
        g = float(np.sum(np.where(live, (I / np.where(live, D, 1.0)) ** 2, 0.0)))
        mem = (I * ratio[None, :]).sum(axis=1)
    delta = np.column_stack([np.maximum(W / tau - cfg.F, 0.0), np.maximum(mem - cfg.M, 0.0)])
    obj = (weights.gamma * g + float(np.sum(np.maximum(f, 0.0) ** 2))
           + weights.c_F * delta[:, 0].sum() + weights.c_M * delta[:, 1].sum() / GB)
    return obj, f, delta


def _finish_tails(jobs: Sequence[Job], w: np.ndarray, tol: float = 1e-4) -> Optional[np.ndarray]:
    """Complete jobs the plan leaves within ``tol`` of done, at the slot it gets there.

    The interior-point solve stops a hair short of finishing a job because the
    deadline penalty flattens near zero; left alone the crumb would stay
    resident until its forced slot. Returns None when nothing changes.
    """
    out = w.copy()
    changed = False
    for k, job in enumerate(jobs):
        done = 0.0
        for t in range(w.shape[0]):
            left = job.intensity - done - out[t, k]
            if 0 < left <= tol * job.intensity0:
                out[t, k] = job.intensity - done
                out[t + 1:, k] = 0.0
                changed = True
                break
            done += out[t, k]
    return out if changed else None


def solve_local(jobs: Sequence[Job], est: HorizonEstimates, cfg: NodeConfig,
                weights: MpcWeights, tau: float, T: Optional[int] = None) -> LocalSolution:
    """Solve the relaxed local problem over the horizon and return the plan."""
    T = est.T if T is None else T
    if T != est.T:
        raise ContractError(f"estimates cover {est.T} slots, horizon is {T}")
    if T < 2:
        raise ContractError("horizon T must be >= 2")
    for job in jobs:
        if job.deadline <= 0:
            raise ContractError(f"job {job.id} reached the controller with deadline {job.deadline}")

    lay = _layout(jobs, tau, T)
    x_w, iters, ok = _solve_free(jobs, lay, est, cfg, weights, tau)
    w = _workload_matrix(jobs, lay, x_w)
    obj, f, delta = local_objective(jobs, w, est, cfg, weights, tau)
    polished = _finish_tails(jobs, w)
    if polished is not None:
        cand = local_objective(jobs, polished, est, cfg, weights, tau)
        if cand[0] <= obj:
            w, (obj, f, delta) = polished, cand
    p_hat, f_hat, m_hat = residual_estimates_from(jobs, w, f, est, cfg, tau)
    return LocalSolution(w=w, delta=delta, w0=w[0].copy(), p_hat=p_hat, f_hat=f_hat, m_hat=m_hat,
                         objective=obj, f=f, job_ids=tuple(j.id for j in jobs),
                         solver_iterations=iters, converged=ok)


@njit(cache=True)
def _assemble(n_free, forced, offset, intensity, deadline, ratio, T, n_w, gamma, tau):
    """Affine maps of the free variables onto per-slot load and memory, and the quadratic state cost.

    W(t) = W_const(t) + W_coef[t] @ w, memory in GB likewise.
    """
    W_const = np.zeros(T)
    W_coef = np.zeros((T, n_w))
    mem_const = np.zeros(T)
    mem_coef = np.zeros((T, n_w))
    P_w = np.zeros((n_w, n_w))
    c_w = np.zeros(n_w)
    suffix = np.zeros(T + 1)
    for k in range(n_free.shape[0]):
        n, t_f, o = n_free[k], forced[k], offset[k]
        last = min(t_f, T - 1)
        for t in range(last + 1):
            mem_const[t] += ratio[k] * intensity[k]
        if n == 0:
            W_const[0] += intensity[k]
            continue
        for s in range(n):
            W_coef[s, o + s] = 1.0
        if t_f < T:
            W_const[t_f] += intensity[k]
            for s in range(n):
                W_coef[t_f, o + s] = -1.0
        # I_k(t) = I_k - sum_{s<t} w_k(s) enters g and memory for 1 <= t <= last
        for t in range(1, last + 1):
            for s in range(min(t, n)):
                mem_coef[t, o + s] -= ratio[k]
        # suffix[j] = sum of 2 gamma / D(t)^2 over slots j < t <= last
        suffix[last] = 0.0
        for j in range(last - 1, -1, -1):
            D = deadline[k] - tau * (j + 1)
            suffix[j] = suffix[j + 1] + 2.0 * gamma / (D * D)
        for s1 in range(n):
            for s2 in range(n):
                P_w[o + s1, o + s2] += suffix[max(s1, s2)]
            c_w[o + s1] -= intensity[k] * suffix[s1]
    return W_const, W_coef, mem_const, mem_coef, P_w, c_w


def _solve_free(jobs, lay: _Layout, est: HorizonEstimates, cfg: NodeConfig,
                weights: MpcWeights, tau: float) -> tuple[np.ndarray, int, bool]:
    T, n_w = lay.T, lay.n_w
    if n_w == 0:
        return np.zeros(0), 0, True

    intensity = np.array([j.intensity for j in jobs])
    W_const, W_coef, mem_const, mem_coef, P_w, c_w = _assemble(
        np.array(lay.n_free, dtype=np.int64), np.array(lay.forced, dtype=np.int64),
        np.array(lay.offset, dtype=np.int64), intensity, np.array([j.deadline for j in jobs]),
        np.array([j.bits_per_gop / GB for j in jobs]), T, n_w, weights.gamma, tau)
    W_const += est.extra_load
    sum_rows = [(o, n, I) for o, n, I in zip(lay.offset, lay.n_free, intensity) if n]

    comm = est.v_seq * cfg.E_b_ran * est.result_size + est.c_seq * cfg.E_b_wired * est.result_size
    f_const = cfg.q_proc * W_const + comm - est.e_h

    # soft memory rows only where the unprocessed backlog could exceed the memory
    mem_rows = np.flatnonzero(mem_const[1:] > cfg.M / GB) + 1
    n_m = len(mem_rows)
    prob = BlockQP(
        P_blocks=[P_w[o:o + nk, o:o + nk] for o, nk, _ in sum_rows],
        c_blocks=[c_w[o:o + nk] for o, nk, _ in sum_rows],
        caps=np.array([cap for _, _, cap in sum_rows]),
        # rows: grid energy f(t) <= s(t), processing capacity, memory
        B=np.vstack([cfg.q_proc * W_coef, W_coef / tau, mem_coef[mem_rows]]),
        h=np.concatenate([-f_const, cfg.F - W_const / tau, cfg.M / GB - mem_const[mem_rows]]),
        aux_quad=np.concatenate([np.full(T, 2.0), np.zeros(T + n_m)]),
        aux_lin=np.concatenate([np.zeros(T), np.full(T, weights.c_F), np.full(n_m, weights.c_M)]),
    )
    res = solve_block_qp(prob)
    x_w = np.maximum(res.w, 0.0)
    for o, nk, intensity in sum_rows:
        seg = x_w[o:o + nk]
        total = seg.sum()
        if total > intensity:
            seg *= intensity / total
    return x_w, res.iterations, res.converged


def residual_estimates_from(jobs, w: np.ndarray, f: np.ndarray, est: HorizonEstimates,
                            cfg: NodeConfig, tau: float) -> tuple[float, float, float]:
    T = est.T
    W = w.sum(axis=1) + est.extra_load
    if jobs:
        I, _ = _trajectories(jobs, w, tau)
        ratio = np.array([j.bits_per_gop for j in jobs])
        mem = (I * ratio[None, :]).sum(axis=1)
    else:
        mem = np.zeros(T)
    future = slice(1, T)
    p_hat = float(np.mean(-f[future] / tau))
    f_hat = float(np.mean(cfg.F - W[future] / tau))
    m_hat = float(np.mean(cfg.M - mem[future]))
    return p_hat, f_hat, m_hat


def residual_estimates(sol: LocalSolution, est: HorizonEstimates, cfg: NodeConfig, tau: float,
                       jobs: Sequence[Job] = ()) -> tuple[float, float, float]:
    """Average residual green power, compute rate and memory over slots 1..T-1."""
    if est.T < 2:
        raise ContractError("horizon T must be >= 2")
    return residual_estimates_from(jobs, sol.w, sol.f, est, cfg, tau)


def receding_step(sol: LocalSolution) -> np.ndarray:
    """The control actually applied: the first row of the plan."""
    return sol.w[0].copy()
