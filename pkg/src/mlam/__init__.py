"""Meta-learned alternating minimization with coordinate-wise LSTM update rules."""

__version__ = "0.1.0"
