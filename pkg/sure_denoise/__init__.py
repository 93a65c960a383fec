"""Training and refining image denoisers without ground truth via MC-SURE and PURE."""

__version__ = "0.1.0"
