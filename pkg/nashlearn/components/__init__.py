from .costs import CostModel, builtin_cost_terms
from .dynamics import builtin_dynamics, get_dynamics
from .graph import CommGraph
from .problem import GameProblem, RobotProblem, Trajectory, eval_objective, rollout
