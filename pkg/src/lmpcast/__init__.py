"""Electricity-market workbench: DC-OPF dataset synthesis and
graph-convolutional locational-price forecasting."""

__version__ = "0.1.0"
