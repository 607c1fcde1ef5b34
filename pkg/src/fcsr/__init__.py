"""Single-image super-resolution with residual feature blocks and a fully connected reconstruction layer."""
__version__ = "0.1.0"
