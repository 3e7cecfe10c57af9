"""Multi-agent highway driver models trained open-loop, closed-loop and adversarially."""
from . import autodiff, baseline, geometry, losses, metrics, policy, scene, simulator, training
from .errors import TrafficLabError

__version__ = "0.1.0"

__all__ = ["autodiff", "baseline", "geometry", "losses", "metrics", "policy", "scene",
           "simulator", "training", "TrafficLabError", "__version__"]
