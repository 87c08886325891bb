"""Recurrent traffic-flow forecasting on induction-loop sensor data."""

from trafficrnn.errors import DataError, DivergenceError, ShapeError

__version__ = "0.1.0"

__all__ = ["DataError", "DivergenceError", "ShapeError", "__version__"]
