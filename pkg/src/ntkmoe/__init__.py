"""Closed-form predictive uncertainty for trained MLPs via mixtures of NTK GP experts."""

__version__ = "0.1.0"
