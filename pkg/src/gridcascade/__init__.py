"""Cascading line-failure simulation on DC power-flow grids."""

from __future__ import annotations

from .cascade import CascadeConfig, CascadeReport, monte_carlo, run
from .dcflow import DCSolver, FlowSolution, solve
from .gridcore import DEMAND, NEUTRAL, SUPPLY, Grid, Line, Node, load_grid, parse_grid, save_grid, serialize_grid

__version__ = "0.1.0"

__all__ = [
    "CascadeConfig",
    "CascadeReport",
    "DCSolver",
    "DEMAND",
    "FlowSolution",
    "Grid",
    "Line",
    "NEUTRAL",
    "Node",
    "SUPPLY",
    "load_grid",
    "monte_carlo",
    "parse_grid",
    "run",
    "save_grid",
    "serialize_grid",
    "solve",
]
