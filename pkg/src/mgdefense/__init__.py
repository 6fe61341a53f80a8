"""Moving-target defense for consensus-controlled inverter microgrids.

Modules: ``dynamics`` (averaged inverter simulation), ``consensus``
(communication topologies and secondary control), ``threat`` (latent
false-data attacker), ``game`` (zero-sum attacker/defender environment),
``neuralnet`` (numpy MLP), ``defense`` (static and DQN defenders) and
``cli`` (scenario runner).
"""

__version__ = "0.1.0"
