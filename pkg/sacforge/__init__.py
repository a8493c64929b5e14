"""SACForge - behavioral simulator for shape-based analog computing."""

__version__ = "1.20261019.0"
