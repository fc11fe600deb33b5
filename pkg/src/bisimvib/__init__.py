"""Discrete MDP abstractions learned with a variational information bottleneck.

Subpackages by stage: ``envs`` (tabular MDPs), ``nn`` (autodiff), ``dqn``
(Q-learning and dataset collection), ``vib`` (the model and its loss),
``abstraction`` (extraction, planning, evaluation), ``baseline`` (forward
model plus greedy bisimulation) and ``harness`` / ``cli`` (pipelines).
"""
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
