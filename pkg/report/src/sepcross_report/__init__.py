"""Figure rendering for sepcross sweep and capture tables.

This package consumes only the CSV/JSON files written by the ``sepcross``
command-line tool; it does not import the sepcross library.
"""

__version__ = "0.1.0"

from .render import (ReportError, capture_hist, jump_vs_xi, load_capture,
                     load_curve, load_sweep, residual_scaling)

__all__ = ["ReportError", "capture_hist", "jump_vs_xi", "load_capture",
           "load_curve", "load_sweep", "residual_scaling", "__version__"]
