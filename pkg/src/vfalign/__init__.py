"""Two-level voice-face alignment losses with adaptive identity re-weighting.

Everything runs on synthetic cross-modal data in float64 numpy.
"""

__version__ = "0.1.0"
