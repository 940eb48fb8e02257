"""Sum-of-squares stability and region-of-attraction certificates for neural feedback loops."""

__version__ = "0.1.0"
