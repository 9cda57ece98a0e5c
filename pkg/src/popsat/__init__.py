"""popsat: population-conditioned satellite tile generation, desk scale."""

__version__ = "0.1.0"
