"""Physics-informed graph neural network surrogate for water distribution networks."""

__version__ = "0.1.0"
