"""Minor-component unlearning lab: spectra, a toy model, unlearning losses and relearning attacks."""

__version__ = "0.1.0"

from ._backend import BACKEND

__all__ = ["BACKEND", "__version__"]
