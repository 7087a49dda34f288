"""Input checks shared by the estimator wrappers and the command line."""

from __future__ import annotations

import os

import numpy as np
from sklearn.utils.validation import check_array

from .datakit import Manifest, TriModalDataset
from .errors import ConfigurationError, ContractError, DimensionError

MODALITIES = ("text", "image", "audio")


def check_waveforms(X, min_samples: int = 1) -> np.ndarray:
    """Coerce audio input to a finite float64 array [N, C, T].

    Accepts [T] (one mono clip), [N, T] (mono batch) or [N, C, T].
    """
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, None, :]
    elif arr.ndim == 2:
        arr = check_array(arr, dtype=np.float64, ensure_min_samples=1,
                          ensure_min_features=min_samples)[:, None, :]
    elif arr.ndim == 3:
        arr = check_array(arr, dtype=np.float64, allow_nd=True, ensure_min_samples=1)
    else:
        raise DimensionError(f"waveforms must be [T], [N, T] or [N, C, T], got {arr.shape}")
    if arr.shape[-1] < min_samples:
        raise DimensionError(f"need at least {min_samples} samples per clip, got {arr.shape[-1]}")
    if not np.all(np.isfinite(arr)):
        raise ContractError("waveforms contain NaN or infinity")
    return np.ascontiguousarray(arr)


def check_dataset(X) -> TriModalDataset:
    """Accept a dataset, a manifest, or a path to either a manifest or its directory."""
    if isinstance(X, TriModalDataset):
        return X
    if isinstance(X, (Manifest, str, os.PathLike)):
        return TriModalDataset(X)
    raise ContractError(f"expected a TriModalDataset or manifest path, got {type(X).__name__}")


def check_modality(modality: str, allowed=MODALITIES) -> str:
    if modality not in allowed:
        raise ConfigurationError(f"unknown modality {modality!r}; expected one of {tuple(allowed)}")
    return modality


def check_texts(texts) -> list:
    if isinstance(texts, str):
        texts = [texts]
    texts = list(texts)
    if not texts:
        raise ContractError("empty text list")
    bad = [t for t in texts if not isinstance(t, str) or not t.strip()]
    if bad:
        raise ContractError(f"texts must be non-empty strings, got {bad[0]!r}")
    return texts
