"""In-process network simulator used as ground truth."""

from .engine import OUTCOMES, Network, SimIO
from .groundtruth import Expected, candidate_targets, expected_outcome, role_class
from .scenario import ScenarioError, ScenarioResult, run_scenario
from .topology import Link, Node, Role, SimTopology, TopologyError

__all__ = [
    "OUTCOMES", "Network", "SimIO", "Expected", "candidate_targets", "expected_outcome",
    "role_class", "ScenarioError", "ScenarioResult", "run_scenario", "Link", "Node",
    "Role", "SimTopology", "TopologyError",
]
