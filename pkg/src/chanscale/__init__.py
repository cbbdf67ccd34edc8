"""Channel-scaling layers and scale-and-select pruning for frozen conv nets."""

__version__ = "0.1.0"
