"""Two-world machine simulator with a secure-world kernel-integrity monitor."""

__version__ = "0.1.0"
