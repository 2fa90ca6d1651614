"""Space-time solvers for a stochastic linear-quadratic heat control problem."""

__version__ = "0.1.0"
