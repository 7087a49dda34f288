"""Tri-modal (text, image, audio) contrastive embeddings at desk scale.

Subpackages are plain modules: ``tensor`` (autodiff core), ``optim``,
``audio`` (fbsp front-end and augmentations), ``encoders``, ``objective``,
``trainer``, ``evalkit``, ``datakit``, ``estimator`` and ``cli``.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    CheckpointFormatError,
    ConfigurationError,
    ContractError,
    DataError,
    DimensionError,
    DomainError,
    NumericalError,
    TrimodalError,
)

__all__ = [
    "__version__",
    "CheckpointFormatError",
    "ConfigurationError",
    "ContractError",
    "DataError",
    "DimensionError",
    "DomainError",
    "NumericalError",
    "TrimodalError",
]
