"""World models with augmented replay for continual RL."""

__version__ = "0.1.0"
