"""Factored-MDP maintenance planning for multi-component structures under
corrosion and earthquakes."""

__version__ = "0.1.0"
