"""OOD-aware prototypical supervised contrastive learning on small MLPs."""

from oodcl.errors import OODCLError

__version__ = "0.1.0"

__all__ = ["OODCLError", "__version__"]
