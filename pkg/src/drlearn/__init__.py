"""Learning price-responsive demand response inside a chance-constrained distribution OPF."""
from .estimator import History, MomentEstimate, SensitivityEstimate
from .feeder import FeederModel, GeneratorParams, Line, Node, load_feeder
from .dro_opf import DispatchModel, DispatchSolution, MarketScenario, RiskConfig

__all__ = [
    "DispatchModel", "DispatchSolution", "FeederModel", "GeneratorParams", "History", "Line",
    "MarketScenario", "MomentEstimate", "Node", "RiskConfig", "SensitivityEstimate",
    "load_feeder",
]
