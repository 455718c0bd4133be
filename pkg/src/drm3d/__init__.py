"""3D dynamic radio map simulation and spatio-temporal transformer forecasting."""

__version__ = "0.1.0"
