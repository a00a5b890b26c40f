"""Learning when to query an edge-cloud over a shared, unobserved network."""

__version__ = "0.1.0"
