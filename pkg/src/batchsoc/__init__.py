"""Global dynamic self-optimizing control for batch processes.

Designs linear controlled-variable combinations for batch processes from
Monte Carlo optimal-operation data, and evaluates them in closed loop on a
fed-batch reactor benchmark.
"""

from batchsoc.process_model import (
    BatchProcess,
    ReactorParams,
    ReactorState,
    fed_batch_reactor,
    rollout,
    step,
)
from batchsoc.scenario import Scenario, UncertaintySpec, sample_scenarios
from batchsoc.structure import CombinationMatrix, ConstraintSet, compile_structure
from batchsoc.trajectory_opt import OptimalTrajectory, solve_scenario_batch

__version__ = "0.1.0"

__all__ = [
    "BatchProcess",
    "CombinationMatrix",
    "ConstraintSet",
    "OptimalTrajectory",
    "ReactorParams",
    "ReactorState",
    "Scenario",
    "UncertaintySpec",
    "compile_structure",
    "fed_batch_reactor",
    "rollout",
    "sample_scenarios",
    "solve_scenario_batch",
    "step",
]
