"""Graph neural network engine with conditional local feature encoding."""

__version__ = "0.1.0"
