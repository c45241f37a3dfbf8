"""Massive Access - URLLC-aware subchannel and power control with multi-agent DQN."""

__version__ = "1.0.0"
