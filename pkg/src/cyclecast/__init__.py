"""cyclecast: a desk-scale cyclic data assimilation and forecasting testbed.

Synthetic observations of a toy global atmosphere go in; 6-hourly analyses and
autoregressive forecasts come out. Everything runs on numpy with a small
reverse-mode autodiff engine; no ML framework required.
"""

__version__ = "0.1.0"
