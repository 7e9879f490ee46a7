"""GreenDB: a product-by-product sustainability database pipeline."""

__version__ = "0.1.0"
