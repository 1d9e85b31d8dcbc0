"""Six-class sentiment CNN-LSTM models and inter-sentiment confusion analysis."""

__version__ = "0.1.0"
