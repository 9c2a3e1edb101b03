"""Simulated pipeline provisioning: profiling, planning, tuning and replay."""

__version__ = "0.1.0"
