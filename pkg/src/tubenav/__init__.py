"""Drone navigation through procedurally generated tubes.

Curriculum-trained PPO on a 37-value LiDAR/camera observation, a Pure
Pursuit baseline, and a lockstep rigid-body bridge.
"""
from .config import Config, load_config
from .env import Terminal, TubeNavEnv

__version__ = "0.1.0"
__all__ = ["Config", "Terminal", "TubeNavEnv", "load_config"]
