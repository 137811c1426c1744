"""CNN-GRU/LSTM-attention denoising and forecasting of multi-sensor vibration records."""

__version__ = "0.1.0"
