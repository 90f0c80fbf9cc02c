"""Friction-cone contact forces, equilibrium solves and pose-candidate aggregation for hand-object scenes."""

__version__ = "0.1.0"
