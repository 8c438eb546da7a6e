"""Wasserstein gradient flows of the Fokker-Planck free energy via JKO steps with input-convex maps."""

__version__ = "0.1.0"

from .errors import ConfigError, JkoError, NumericalError  # noqa: E402,F401
