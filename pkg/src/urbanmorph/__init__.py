"""Census-tract travel-behavior forecasting and conditional image synthesis."""

__version__ = "0.1.0"
