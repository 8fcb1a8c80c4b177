"""Multi-critic reinforcement learning laboratory for long/short portfolio optimization."""

__version__ = "0.1.0"
