"""Part-detector mining from bag-labeled feature data.

Learns ensembles of discriminative part detectors without instance
annotations, encodes images by detector responses for classification, and
localizes objects from detector-response heat maps.
"""

__version__ = "0.1.0"

from .errors import (
    CapabilityError,
    DataError,
    FormatError,
    NumericError,
    PartmineError,
    ValidationError,
)

__all__ = [
    "CapabilityError",
    "DataError",
    "FormatError",
    "NumericError",
    "PartmineError",
    "ValidationError",
    "__version__",
]
