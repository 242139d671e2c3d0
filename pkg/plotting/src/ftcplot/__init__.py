"""Figure rendering for ftc-sim CSV run logs."""

__version__ = "0.1.0"

from .render import PlotSpec, SchemaError, render

__all__ = ["PlotSpec", "SchemaError", "render"]
