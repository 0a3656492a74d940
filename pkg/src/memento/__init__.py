"""Memory-based online adaptation of neural construction solvers for TSP and CVRP."""

__version__ = "0.1.0"
