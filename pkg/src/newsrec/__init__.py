"""Experiment engine for comparing language-model news encoders inside
NAML, NRMS, and LSTUR on MIND-format click logs."""

__version__ = "0.1.0"
