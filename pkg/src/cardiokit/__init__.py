"""ECG/ICG biometric identification pipeline with interpretable random forests."""

__version__ = "0.1.0"

SEGMENTS = ("Baseline", "Anger")
