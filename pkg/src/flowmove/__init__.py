"""Connection migration for a flow-based transport: protocol core, simulator and model checker."""

__version__ = "0.1.0"
