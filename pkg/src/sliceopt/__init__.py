"""Two-time-scale network slicing: sparse activation and sparse reconfiguration."""

__version__ = "0.1.0"
