"""Fisher-trace curvature probes, gradient-norm penalties and a small experiment harness."""

__version__ = "0.1.0"
