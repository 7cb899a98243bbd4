"""Marble-in-a-circular-maze control stack.

A high-fidelity "real" maze simulator is controlled by an agent whose internal
model is a reduced physics engine, calibrated from interaction data by CMA-ES
and corrected by Gaussian-process residual models, and driven in real time by
iLQR trajectory optimization with NMPC tracking. A session server exposes the
same simulator for live human play.
"""

__version__ = "0.1.0"
