"""Heat-kernel forward models and Boundary-Control reconstruction on metric-measure nets."""
__version__ = "0.1.0"
