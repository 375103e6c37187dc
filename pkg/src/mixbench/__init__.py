"""Mixed-effects model families and a benchmark harness for longitudinal UPDRS prediction."""

__version__ = "0.1.0"
