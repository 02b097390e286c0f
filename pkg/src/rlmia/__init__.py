"""Black-box membership inference against batch off-policy reinforcement learning."""

__version__ = "0.1.0"
