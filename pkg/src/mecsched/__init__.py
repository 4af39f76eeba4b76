"""Energy-aware service migration for vehicular edge computing.

Modules: ``model`` (jobs, nodes, energy), ``localctl`` (per-node predictive
control), ``consensus`` (distributed agreement on migrated workload),
``rounding`` (jobs to neighbours), ``simkit`` (scenario engine) and ``cli``.
"""

__version__ = "0.1.0"
