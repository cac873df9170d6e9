"""Two-path spatio-temporal cross network for video smoke detection, on a numpy autodiff core."""

__version__ = "0.1.0"
