"""Label-free differentiable architecture search with a masked-reconstruction objective."""

__version__ = "0.1.0"
