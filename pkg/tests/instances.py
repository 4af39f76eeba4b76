"""Random problem instances shared by the unit and acceptance suites."""

import numpy as np

from mecsched.consensus import ConsensusNodeState
from mecsched.model import GB, SERVER_PRESETS, default_catalog, derived_costs
from mecsched.simkit.geometry import HexGrid

PRICES = derived_costs(default_catalog())
NETTRIX = SERVER_PRESETS["nettrix"]
Q_PROC = (NETTRIX["P_max"] - NETTRIX["P_idle"]) / NETTRIX["F"]


def network_instance(rng, f_range=(0.0, NETTRIX["F"]), p_range=(0.0, 300.0), wish=1.2, rho=2.5, c_hat=10.0):
    """Consensus states on the default eight-cell layout.

    About half of the links carry a desired rate; residual power, compute
    rate and memory are drawn independently per node.
    """
    states = []
    for i, nb in HexGrid().adjacency().items():
        w_bar = rng.uniform(0, wish, len(nb)) * (rng.random(len(nb)) < 0.5)
        states.append(ConsensusNodeState(
            i, nb, w_bar, np.zeros(len(nb)), p_hat=rng.uniform(*p_range), f_hat=rng.uniform(*f_range),
            m_hat=rng.uniform(0, 64) * GB, xi_M=PRICES["xi_M"], q_out=PRICES["q_tx"] - Q_PROC,
            q_in=PRICES["q_rx"] + Q_PROC, rho=rho, c_hat=c_hat))
    return states


def primal_instance(rng, max_neighbors=4):
    """Inputs of one node's closed-form step: (b, lin, q, Qd, p_hat)."""
    n = int(rng.integers(1, max_neighbors + 1))
    b = np.concatenate([rng.uniform(0, 2, 2 * n), [0.0]])
    lin = rng.normal(0, 20, 2 * n + 1)
    q = np.concatenate([np.full(n, rng.uniform(-60, 20)), np.full(n, rng.uniform(0, 80)), [0.0]])
    rho, c_hat = rng.uniform(0.5, 5), rng.uniform(1, 20)
    Qd = np.concatenate([np.full(2 * n, rho / 2), [c_hat]])
    return b, lin, q, Qd, float(rng.uniform(-50, 300))


def _job(jid, I, D, S, I0):
    from mecsched.model import Job, JobType
    j = Job.spawn(jid, jid, JobType("t", I0, 40.0, S * I0 / I, 1.0), host=0)
    j.intensity, j.deadline, j.size = I, D, S
    return j


def mpc_instance(rng, max_jobs=3, max_T=3):
    """A small local problem: (jobs, estimates, node) with K <= max_jobs and T <= max_T."""
    from mecsched.localctl import HorizonEstimates
    from mecsched.model import NodeConfig
    T = int(rng.integers(2, max_T + 1))
    K = int(rng.integers(0, max_jobs + 1))
    kind = str(rng.choice(["hp", "nettrix"]))
    cfg = NodeConfig(id=0, position=(0.0, 0.0), neighbors=frozenset(), **SERVER_PRESETS[kind])
    jobs = []
    for k in range(K):
        I0 = float(rng.choice([10.0, 16.0, 12.0]))
        ratio = float(rng.choice([2 * GB / 10, 10 * GB / 16, 0.1 * GB / 12]))
        I = float(rng.uniform(0.05, 1.0)) * I0
        jobs.append(_job(k, I, float(rng.uniform(0.5, 40.0)), I * ratio, I0))
    est = HorizonEstimates(rng.uniform(-400, 900, T), extra_load=rng.uniform(0, 6, T),
                           v_seq=rng.integers(0, 3, T), c_seq=rng.integers(0, 3, T))
    return jobs, est, cfg


def rounding_instance(rng, p_range=(-100.0, 100.0)):
    """Consensus states built from random hosted jobs, plus each node's rounding inputs.

    Returns (states, per-node (jobs, handover probabilities of every job, desired migration)).
    About half of each node's jobs sit near the cell edge and shape the desired rates.
    """
    from mecsched.consensus import desired_migration
    from mecsched.model import Job
    catalog = default_catalog()
    states, inputs = [], []
    jid = 0
    for i, nb in HexGrid().adjacency().items():
        jobs, edge = [], {}
        for _ in range(int(rng.integers(0, 6))):
            jt = catalog[int(rng.integers(len(catalog)))]
            job = Job.spawn(jid, jid, jt, i)
            jid += 1
            frac = rng.uniform(0.2, 1.0)
            job.intensity *= frac
            job.size *= frac
            job.deadline = rng.uniform(6.0, jt.deadline_total)
            jobs.append(job)
            if rng.random() < 0.5:
                edge[job.id] = rng.dirichlet(np.full(len(nb), 0.3))
        dm = desired_migration(jobs, edge, nb)
        states.append(ConsensusNodeState(
            i, nb, dm.w_bar, np.zeros(len(nb)), p_hat=rng.uniform(*p_range), f_hat=rng.uniform(0, NETTRIX["F"]),
            m_hat=rng.uniform(0, 64) * GB, xi_M=PRICES["xi_M"], q_out=PRICES["q_tx"] - Q_PROC,
            q_in=PRICES["q_rx"] + Q_PROC))
        probs = {j.id: edge.get(j.id, rng.dirichlet(np.ones(len(nb)))) for j in jobs}
        inputs.append((jobs, probs, dm))
    return states, inputs
