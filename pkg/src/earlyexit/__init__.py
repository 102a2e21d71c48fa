"""Multi-exit CNNs with on-device exit personalisation, calibration and scheduling (numpy only)."""

__version__ = "0.1.0"
