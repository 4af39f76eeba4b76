"""Distributed agreement on the workload rates nodes migrate to each other.

Every node ``i`` holds its outgoing rates ``o_i`` (one per neighbour), its copy
``o_tilde_i`` of the rates its neighbours send to it, and a capacity slack
``delta_hat_i``. The nodes run dual ascent on the network problem: each
iteration is a closed-form primal step per node followed by projected dual
updates, with two rounds of neighbour messages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np
from numba import njit

from .model import ContractError, Job


@dataclass(frozen=True)
class DesiredMigration:
    """Per-neighbour workload rate and memory a node would like to hand over."""

    neighbors: tuple[int, ...]
    w_bar: np.ndarray  # Gop/s
    m_bar: np.ndarray  # bit
    k_sets: dict[int, tuple[int, ...]]


def desired_migration(jobs: Sequence[Job], handover_probs: Mapping[int, np.ndarray],
                      neighbors: Sequence[int]) -> DesiredMigration:
    """Group the jobs about to leave the cell by their most likely next cell.

    ``handover_probs`` maps the id of every job whose vehicle is near the cell
    edge to a probability vector over ``neighbors``; other jobs stay put.
    """
    neighbors = tuple(neighbors)
    w_bar = np.zeros(len(neighbors))
    m_bar = np.zeros(len(neighbors))
    sets: dict[int, list[int]] = {j: [] for j in neighbors}
    for job in jobs:
        p = handover_probs.get(job.id)
        if p is None:
            continue
        p = np.asarray(p, dtype=float)
        if len(p) != len(neighbors):
            raise ContractError(f"job {job.id}: probability vector has {len(p)} entries for {len(neighbors)} neighbours")
        if abs(p.sum() - 1.0) > 1e-9 or (p < 0).any():
            raise ContractError(f"job {job.id}: handover probabilities must be a distribution")
        if not neighbors:
            continue
        idx = int(np.argmax(p))
        sets[neighbors[idx]].append(job.id)
        w_bar[idx] += job.intensity / job.deadline
        m_bar[idx] += job.size
    return DesiredMigration(neighbors, w_bar, m_bar, {j: tuple(v) for j, v in sets.items()})


@dataclass
class ConsensusNodeState:
    """Primal iterate, multipliers and fixed data of one node."""

    node: int
    neighbors: tuple[int, ...]
    w_bar: np.ndarray  # own desired rates toward each neighbour
    w_tilde: np.ndarray  # neighbours' desired rates toward this node
    p_hat: float  # W
    f_hat: float  # Gop/s
    m_hat: float  # bit
    xi_M: float
    q_out: float  # J/Gop on outgoing rates (transmission minus processing)
    q_in: float  # J/Gop on incoming rates (reception plus processing)
    rho: float = 2.5
    c_hat: float = 10.0
    o: np.ndarray = None
    o_tilde: np.ndarray = None
    delta_hat: float = 0.0
    lam: float = 0.0
    gamma_o: np.ndarray = None
    gamma_ot: np.ndarray = None
    phi: float = 0.0
    mu: np.ndarray = None
    mu_tilde: np.ndarray = None

    def __post_init__(self):
        n = len(self.neighbors)
        self.w_bar = np.asarray(self.w_bar, dtype=float)
        self.w_tilde = np.asarray(self.w_tilde, dtype=float)
        if self.w_bar.shape != (n,) or self.w_tilde.shape != (n,):
            raise ContractError(f"node {self.node}: rate vectors must match the {n} neighbours")
        if self.rho <= 0 or self.c_hat <= 0:
            raise ContractError("rho and c_hat must be > 0")
        if self.o is None:
            self.o = self.w_bar.copy()
        if self.o_tilde is None:
            self.o_tilde = self.w_tilde.copy()
        for name in ("gamma_o", "gamma_ot", "mu", "mu_tilde"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(n))

    @property
    def capacity(self) -> float:
        """Right-hand side of the net-inflow constraint: min(F̂, ξ_M·M̂)."""
        return min(self.f_hat, self.xi_M * self.m_hat)

    @property
    def b(self) -> np.ndarray:
        return np.concatenate([self.w_bar, self.w_tilde, [0.0]])

    @property
    def q_lin(self) -> np.ndarray:
        n = len(self.neighbors)
        return np.concatenate([np.full(n, self.q_out), np.full(n, self.q_in), [0.0]])

    @property
    def Q_diag(self) -> np.ndarray:
        n = len(self.neighbors)
        return np.concatenate([np.full(2 * n, self.rho / 2), [self.c_hat]])

    def multiplier_term(self) -> np.ndarray:
        """Coefficients of the multiplier terms of the local Lagrangian on [o, o_tilde, delta_hat]."""
        return np.concatenate([
            -self.lam - self.gamma_o + self.mu,
            self.lam - self.gamma_ot - self.mu_tilde,
            [-self.lam - self.phi],
        ])


@dataclass(frozen=True)
class PrimalStep:
    o: np.ndarray
    o_tilde: np.ndarray
    delta_hat: float
    case: int  # 1: energy cost inactive, 2: active, 3: on the kink


def _closed_form(b, lin, q, Qd, p_hat):
    """Minimizer of ‖x−b‖²_Q + linᵀx + max{qᵀx − p_hat, 0} and the accepted case."""
    x1 = b - lin / (2 * Qd)
    h1 = q @ x1 - p_hat
    if h1 <= 0:
        return x1, 1
    step = q / (2 * Qd)
    x2 = x1 - step
    h2 = q @ x2 - p_hat
    if h2 > 0:
        return x2, 2
    # on the plane qᵀx = p_hat; h is affine in the multiplier of the plane
    eta = h1 / (q @ step)
    return x1 - eta * step, 3


def primal_step(state: ConsensusNodeState, w_bar=None, w_tilde=None, q_lin=None,
                Q_diag=None) -> PrimalStep:
    """Closed-form minimizer of the local Lagrangian of one node."""
    Qd = state.Q_diag if Q_diag is None else np.asarray(Q_diag, dtype=float)
    if (Qd <= 0).any():
        raise ContractError("quadratic weights must be > 0")
    n = len(state.neighbors)
    b = state.b.copy()
    if w_bar is not None:
        b[:n] = w_bar
    if w_tilde is not None:
        b[n:2 * n] = w_tilde
    q = state.q_lin if q_lin is None else np.asarray(q_lin, dtype=float)
    x, case = _closed_form(b, state.multiplier_term(), q, Qd, state.p_hat)
    return PrimalStep(x[:n], x[n:2 * n], float(x[2 * n]), case)


def dual_step(state: ConsensusNodeState, x: PrimalStep, o_bar: np.ndarray, alpha: float) -> ConsensusNodeState:
    """Projected multiplier updates after the primal step.

    ``o_bar[j]`` is neighbour j's copy of the rate this node sends to j.
    """
    if alpha <= 0:
        raise ContractError("alpha must be > 0")
    net_inflow = x.o_tilde.sum() - x.o.sum() - x.delta_hat - state.capacity
    return replace(
        state,
        o=x.o, o_tilde=x.o_tilde, delta_hat=x.delta_hat,
        lam=max(state.lam + alpha * net_inflow, 0.0),
        phi=max(state.phi - alpha * x.delta_hat, 0.0),
        gamma_o=np.maximum(state.gamma_o - alpha * x.o, 0.0),
        gamma_ot=np.maximum(state.gamma_ot - alpha * x.o_tilde, 0.0),
        mu=state.mu + alpha * (x.o - np.asarray(o_bar, dtype=float)),
    )


def step_size_bound(A1: np.ndarray, A2: np.ndarray, Q: np.ndarray) -> float:
    """Largest step for which dual ascent on the quadratic program is guaranteed to converge."""
    Q = np.asarray(Q, dtype=float)
    Qd = np.diag(Q) if Q.ndim == 2 else Q
    if Q.ndim == 2 and np.abs(Q - np.diag(Qd)).max(initial=0.0) > 0:
        Qinv = np.linalg.inv(Q)
        if not np.all(np.isfinite(Qinv)):
            raise ContractError("Q is singular")
    else:
        if (np.abs(Qd) < 1e-300).any():
            raise ContractError("Q is singular")
        Qinv = np.diag(1.0 / Qd)
    A = np.vstack([np.atleast_2d(A1).reshape(-1, len(Qd)), np.atleast_2d(A2).reshape(-1, len(Qd))])
    if A.shape[0] == 0 or not A.any():
        return math.inf
    norm = np.linalg.eigvalsh(A @ Qinv @ A.T).max()
    return 2.0 / norm


# ---------------------------------------------------------------- network

@dataclass(frozen=True)
class Topology:
    """Directed edges (src, dst) in lexicographic order, both directions of every link."""

    nodes: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]

    @classmethod
    def from_states(cls, states: Sequence[ConsensusNodeState]) -> "Topology":
        nodes = tuple(s.node for s in states)
        known = set(nodes)
        edges = []
        for s in states:
            for j in s.neighbors:
                if j not in known:
                    raise ContractError(f"node {s.node} lists unknown neighbour {j}")
                edges.append((s.node, j))
        edge_set = set(edges)
        for i, j in edges:
            if (j, i) not in edge_set:
                raise ContractError(f"link {i}-{j} is not symmetric")
        return cls(nodes, tuple(sorted(edges)))

    def constraint_matrices(self, rho: Sequence[float], c_hat: Sequence[float]):
        """(A1, A2, Q diagonal) over the stacked per-node variables [o_i, o_tilde_i, delta_hat_i]."""
        index = {}
        pos = 0
        for n_idx, i in enumerate(self.nodes):
            out = [e for e in self.edges if e[0] == i]
            inc = [e for e in self.edges if e[1] == i]
            for e in out:
                index[("o", e)] = pos
                pos += 1
            for e in inc:
                index[("ot", e)] = pos
                pos += 1
            index[("d", i)] = pos
            pos += 1
        Qd = np.empty(pos)
        for (kind, key), p in index.items():
            node = key if kind == "d" else (key[0] if kind == "o" else key[1])
            k = self.nodes.index(node)
            Qd[p] = c_hat[k] if kind == "d" else rho[k] / 2
        cap = np.zeros((len(self.nodes), pos))
        for k, i in enumerate(self.nodes):
            for e in self.edges:
                if e[0] == i:
                    cap[k, index[("o", e)]] = -1.0
                if e[1] == i:
                    cap[k, index[("ot", e)]] = 1.0
            cap[k, index[("d", i)]] = -1.0
        A1 = np.vstack([cap, -np.eye(pos)])
        A2 = np.zeros((len(self.edges), pos))
        for r, e in enumerate(self.edges):
            A2[r, index[("o", e)]] = 1.0
            A2[r, index[("ot", e)]] = -1.0
        return A1, A2, Qd


_bound_cache: dict = {}


def default_alpha(states: Sequence[ConsensusNodeState], safety: float = 0.9) -> float:
    topo = Topology.from_states(states)
    rho = tuple(s.rho for s in states)
    c_hat = tuple(s.c_hat for s in states)
    key = (topo, rho, c_hat)
    if key not in _bound_cache:
        A1, A2, Qd = topo.constraint_matrices(rho, c_hat)
        _bound_cache[key] = step_size_bound(A1, A2, Qd)
    bound = _bound_cache[key]
    return safety * bound if math.isfinite(bound) else 1.0


@dataclass
class ConsensusResult:
    o: dict[tuple[int, int], float]  # rate held by the sender
    o_tilde: dict[tuple[int, int], float]  # copy held by the receiver
    delta_hat: dict[int, float]
    iterations: int
    converged: bool
    residual_history: list[float]  # consensus residual per iteration
    messages: int
    setup_messages: int = 0
    states: list[ConsensusNodeState] = field(default_factory=list)
    multiplier_history: list[float] = field(default_factory=list)  # projected dual-step size per iteration

    def outgoing(self, node: int, neighbors: Sequence[int]) -> np.ndarray:
        return np.array([self.o[(node, j)] for j in neighbors])


class Mailbox:
    """Inbound message slots of one node, one per neighbour and round."""

    def __init__(self, neighbors: Sequence[int]):
        self.neighbors = tuple(neighbors)
        self._slots: dict[str, dict[int, float]] = {"mu": {}, "o_tilde": {}}
        self.delivered = 0

    def put(self, kind: str, sender: int, value: float) -> None:
        if sender not in self.neighbors:
            raise ContractError(f"message from non-neighbour {sender}")
        self._slots[kind][sender] = value
        self.delivered += 1

    def take(self, kind: str) -> np.ndarray:
        slot = self._slots[kind]
        if len(slot) != len(self.neighbors):
            raise RuntimeError(f"round {kind!r} incomplete: {len(slot)}/{len(self.neighbors)} messages")
        vals = np.array([slot[j] for j in self.neighbors])
        slot.clear()
        return vals


def _residuals(prev: ConsensusNodeState, new: ConsensusNodeState, o_bar: np.ndarray, alpha: float):
    cons = np.abs(new.o - o_bar).max(initial=0.0)
    proj = max(abs(new.lam - prev.lam), abs(new.phi - prev.phi),
               np.abs(new.gamma_o - prev.gamma_o).max(initial=0.0),
               np.abs(new.gamma_ot - prev.gamma_ot).max(initial=0.0)) / alpha
    return cons, proj


def _run_messages(states: list[ConsensusNodeState], alpha: float, max_iters: int, tol: float, strict: bool):
    by_id = {s.node: s for s in states}
    boxes = {s.node: Mailbox(s.neighbors) for s in states}
    messages = 0
    history = []
    mhistory = []
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        # round 1 happened at the end of the previous iteration (or at setup): mu_tilde is current
        steps = {i: primal_step(s) for i, s in by_id.items()}
        # round 2: every node sends its copy of o_ji back to the sender j
        for i, s in by_id.items():
            for j, val in zip(s.neighbors, steps[i].o_tilde):
                boxes[j].put("o_tilde", i, float(val))
                messages += 1
        worst_c = worst_m = 0.0
        new_states = {}
        for i, s in by_id.items():
            o_bar = boxes[i].take("o_tilde")
            new = dual_step(s, steps[i], o_bar, alpha)
            cons, proj = _residuals(s, new, o_bar, alpha)
            worst_c = max(worst_c, cons)
            worst_m = max(worst_m, proj)
            new_states[i] = new
        # round 1 of the next iteration: mu_ij goes to j, which stores it as mu_tilde
        for i, s in new_states.items():
            for j, val in zip(s.neighbors, s.mu):
                boxes[j].put("mu", i, float(val))
                messages += 1
        for i, s in new_states.items():
            s.mu_tilde = boxes[i].take("mu")
        by_id = new_states
        history.append(worst_c)
        mhistory.append(worst_m)
        if worst_c <= tol and (worst_m <= tol or not strict):
            converged = True
            break
    return [by_id[s.node] for s in states], it, converged, history, mhistory, messages


@njit(cache=True)
def _dual_ascent_kernel(src, dst, n_nodes, w_bar_e, p_hat, cap, q_out, q_in, rho, c_hat,
                        alpha, max_iters, tol, strict, gam, gamt, mu, lam, phi):
    E = src.shape[0]
    o = np.empty(E)
    ot = np.empty(E)
    d = np.zeros(n_nodes)
    hist = np.zeros(max_iters)
    mhist = np.zeros(max_iters)
    sq_out = np.zeros(n_nodes)
    sq_in = np.zeros(n_nodes)
    for e in range(E):
        sq_out[src[e]] += q_out[src[e]] ** 2 / rho[src[e]]
        sq_in[dst[e]] += q_in[dst[e]] ** 2 / rho[dst[e]]
    h = np.empty(n_nodes)
    it = 0
    converged = False
    for it in range(1, max_iters + 1):
        # primal step, unconstrained-energy candidate
        h[:] = -p_hat
        for e in range(E):
            i = src[e]
            j = dst[e]
            o[e] = w_bar_e[e] - (-lam[i] - gam[e] + mu[e]) / rho[i]
            ot[e] = w_bar_e[e] - (lam[j] - gamt[e] - mu[e]) / rho[j]
            h[i] += q_out[i] * o[e]
            h[j] += q_in[j] * ot[e]
        for i in range(n_nodes):
            d[i] = (lam[i] + phi[i]) / (2 * c_hat[i])
        for i in range(n_nodes):
            if h[i] <= 0:
                h[i] = 0.0  # case 1: no shift
            else:
                drop = sq_out[i] + sq_in[i]
                if h[i] - drop > 0:
                    h[i] = 1.0  # case 2: full shift
                else:
                    h[i] = h[i] / drop  # case 3: partial shift
        for e in range(E):
            i = src[e]
            j = dst[e]
            o[e] -= h[i] * q_out[i] / rho[i]
            ot[e] -= h[j] * q_in[j] / rho[j]
        # dual step
        worst = 0.0
        cons = 0.0
        net = np.zeros(n_nodes)
        for e in range(E):
            net[src[e]] -= o[e]
            net[dst[e]] += ot[e]
            g = max(gam[e] - alpha * o[e], 0.0)
            worst = max(worst, abs(g - gam[e]) / alpha)
            gam[e] = g
            g = max(gamt[e] - alpha * ot[e], 0.0)
            worst = max(worst, abs(g - gamt[e]) / alpha)
            gamt[e] = g
            mu[e] += alpha * (o[e] - ot[e])
            cons = max(cons, abs(o[e] - ot[e]))
        for i in range(n_nodes):
            g = max(lam[i] + alpha * (net[i] - d[i] - cap[i]), 0.0)
            worst = max(worst, abs(g - lam[i]) / alpha)
            lam[i] = g
            g = max(phi[i] - alpha * d[i], 0.0)
            worst = max(worst, abs(g - phi[i]) / alpha)
            phi[i] = g
        hist[it - 1] = cons
        mhist[it - 1] = worst
        if cons <= tol and (worst <= tol or not strict):
            converged = True
            break
    return o, ot, d, it, converged, hist[:it], mhist[:it], gam, gamt, mu, lam, phi


def _run_fast(states: list[ConsensusNodeState], alpha: float, max_iters: int, tol: float, strict: bool):
    topo = Topology.from_states(states)
    pos = {s.node: k for k, s in enumerate(states)}
    src = np.array([pos[i] for i, _ in topo.edges], dtype=np.int64)
    dst = np.array([pos[j] for _, j in topo.edges], dtype=np.int64)
    w_bar_e = np.array([states[pos[i]].w_bar[states[pos[i]].neighbors.index(j)] for i, j in topo.edges])
    arr = lambda attr: np.array([getattr(s, attr) for s in states], dtype=float)
    # edge (i, j): gamma and mu live at the sender, gamma~ at the receiver
    at = lambda vec_of, node, other: vec_of(states[pos[node]])[states[pos[node]].neighbors.index(other)]
    gam = np.array([at(lambda s: s.gamma_o, i, j) for i, j in topo.edges], dtype=float)
    gamt = np.array([at(lambda s: s.gamma_ot, j, i) for i, j in topo.edges], dtype=float)
    mu = np.array([at(lambda s: s.mu, i, j) for i, j in topo.edges], dtype=float)
    o, ot, d, it, ok, hist, mhist, gam, gamt, mu, lam, phi = _dual_ascent_kernel(
        src, dst, len(states), w_bar_e, arr("p_hat"), np.array([s.capacity for s in states]),
        arr("q_out"), arr("q_in"), arr("rho"), arr("c_hat"), alpha, max_iters, tol, strict,
        gam, gamt, mu, arr("lam"), arr("phi"))
    out = []
    for k, s in enumerate(states):
        e_out = [topo.edges.index((s.node, j)) for j in s.neighbors]
        e_in = [topo.edges.index((j, s.node)) for j in s.neighbors]
        out.append(replace(s, o=o[e_out], o_tilde=ot[e_in], delta_hat=float(d[k]), lam=float(lam[k]),
                           phi=float(phi[k]), gamma_o=gam[e_out], gamma_ot=gamt[e_in], mu=mu[e_out],
                           mu_tilde=mu[e_in]))
    return out, int(it), bool(ok), list(hist), list(mhist), 2 * len(topo.edges) * int(it)


def run_dual_ascent(states: Sequence[ConsensusNodeState], alpha: Optional[float] = None,
                    max_iters: int = 500, primal_tol: float = 1e-4,
                    engine: str = "fast", strict: bool = True, warm_start: bool = False) -> ConsensusResult:
    """Iterate primal and dual steps until the residuals fall below ``primal_tol``.

    The consensus residual is the largest disagreement between a sender's
    rate and the receiver's copy. With ``strict`` the projected dual step
    (primal feasibility and complementary slackness) must also be small;
    otherwise the run can stop at a point that agrees but overloads a node.

    ``engine="messages"`` runs every node separately with explicit mailboxes;
    ``engine="fast"`` runs the same iteration on flat arrays. Multipliers start
    at zero unless ``warm_start``, which keeps those carried by ``states``.
    """
    states = list(states)
    topo = Topology.from_states(states)
    if not topo.edges:
        empty = [replace(s, o=np.zeros(0), o_tilde=np.zeros(0), delta_hat=0.0) for s in states]
        return ConsensusResult({}, {}, {s.node: 0.0 for s in states}, 0, True, [], 0, 0, empty)
    if alpha is None:
        alpha = default_alpha(states)
    if alpha <= 0:
        raise ContractError("alpha must be > 0")
    # setup: every node learns the desired rates its neighbours want to send it
    by_id = {s.node: s for s in states}
    fresh = []
    for s in states:
        w_tilde = np.array([by_id[j].w_bar[by_id[j].neighbors.index(s.node)] for j in s.neighbors])
        n = len(s.neighbors)
        s = replace(s, w_tilde=w_tilde, o=s.w_bar.copy(), o_tilde=w_tilde.copy(), delta_hat=0.0)
        if not warm_start:
            s = replace(s, lam=0.0, phi=0.0, gamma_o=np.zeros(n), gamma_ot=np.zeros(n),
                        mu=np.zeros(n), mu_tilde=np.zeros(n))
        fresh.append(s)
    setup = len(topo.edges)
    if engine == "messages":
        final, it, ok, hist, mhist, msgs = _run_messages(fresh, alpha, max_iters, primal_tol, strict)
    elif engine == "fast":
        final, it, ok, hist, mhist, msgs = _run_fast(fresh, alpha, max_iters, primal_tol, strict)
    else:
        raise ValueError(f"unknown engine {engine!r}")
    o = {}
    o_tilde = {}
    for s in final:
        for j, v in zip(s.neighbors, s.o):
            o[(s.node, j)] = float(v)
        for j, v in zip(s.neighbors, s.o_tilde):
            o_tilde[(j, s.node)] = float(v)
    return ConsensusResult(o, o_tilde, {s.node: s.delta_hat for s in final}, it, ok, hist, msgs,
                           setup, final, mhist)


def node_cost(o: np.ndarray, o_tilde: np.ndarray, delta_hat: float, w_bar: np.ndarray, p_hat: float,
              q_out: float, q_in: float, rho: float, c_hat: float) -> float:
    energy = q_out * np.sum(o) + q_in * np.sum(o_tilde) - p_hat
    return max(energy, 0.0) + rho * float(np.sum((np.asarray(o) - w_bar) ** 2)) + c_hat * delta_hat ** 2


def global_cost(o: Mapping[tuple[int, int], float], o_tilde: Mapping[tuple[int, int], float],
                delta_hat: Mapping[int, float], states: Sequence[ConsensusNodeState]) -> float:
    """Network cost: grid power for migrations, deviation from desired rates, capacity slack."""
    total = 0.0
    for s in states:
        o_i = np.array([o[(s.node, j)] for j in s.neighbors])
        ot_i = np.array([o_tilde[(j, s.node)] for j in s.neighbors])
        total += node_cost(o_i, ot_i, delta_hat[s.node], s.w_bar, s.p_hat, s.q_out, s.q_in, s.rho, s.c_hat)
    return total
