"""Two-layer occupancy-measure mirror descent for adversarial linear mixture MDPs."""
__version__ = "0.1.0"
