"""demoforge: procedural expert-demonstration data engine for manipulation tasks."""

__version__ = "0.1.0"
