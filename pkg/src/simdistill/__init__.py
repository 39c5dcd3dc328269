"""simdistill: multi-teacher similarity-matrix distillation for cross-domain
embedding retrieval, evaluated with a retrieval protocol on synthetic
domain-shifted data."""

from .backend import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
