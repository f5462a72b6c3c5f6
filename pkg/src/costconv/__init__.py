"""CoST video convolution toolkit."""

__version__ = "0.1.0"
