"""Multi-round conversational bundle recommendation workbench."""

__version__ = "0.1.0"
