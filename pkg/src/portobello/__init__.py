"""Map-anchored driving-scenario staging engine with twinned sim/replay execution."""

__version__ = "0.1.0"
