"""Two-stage weakly supervised video anomaly detection on precomputed features.

A recurrent time-mixing teacher scores videos, a small temporal CNN distilled
from it acts as the fast coarse gate, and a prompt-based cross-modal
classifier names the anomaly class for videos that pass the gate.
"""

__version__ = "0.1.0"
