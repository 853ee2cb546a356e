"""Prior-tuning adapters for small image-restoration networks, on a numpy autograd core."""
__version__ = "0.1.0"
