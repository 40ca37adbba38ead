"""Digital libraries of microstructure evolution and the networks that learn them."""

__version__ = "0.1.0"
