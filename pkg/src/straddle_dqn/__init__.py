"""Straddle-option trading with a transformer Q-network trained by Double DQN."""

__version__ = "0.1.0"
