"""Control plane for networks of intelligent reflecting surfaces.

Submodules: ``wire`` (packet codec), ``model`` (geometry and link budgets),
``irss`` (station decision engine), ``nodes`` (entity state machines),
``graphroute`` (virtual line-of-sight routing and orbital handover),
``sim`` (discrete-event simulator) and ``cli``.
"""

__version__ = "0.1.0"
