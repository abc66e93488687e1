"""Deterministic kinematic simulator for fruit reaching with visual servoing.

Subsystems: kinematics (6R arm), scene (synthetic plants), sensing (pinhole
cameras, detector and depth models), planning (initial poses and collision
checks), servoing (PID state machine), harness (Monte Carlo experiments) and
cli (command-line front end).
"""

__version__ = "0.1.0"
