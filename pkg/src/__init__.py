"""VoltPilot - Adaptive reactive-power voltage control for radial distribution feeders"""

__version__ = "0.1"
