"""Domain adaptation with privileged information: exact oracles, two-stage
estimators, importance-weighted bounds and synthetic experiments."""

__version__ = "0.1.0"
