"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .camera import Camera
from .dataio import Dataset, load_dataset
from .errors import DatasetError, InvalidParameterError
from .scene import normalize_which


def check_dataset(X, require_masks=True) -> Dataset:
    """Accept a Dataset or a dataset directory and validate it."""
    if isinstance(X, (str, Path)):
        X = load_dataset(X)
    if not isinstance(X, Dataset):
        raise InvalidParameterError(f"expected a Dataset or a directory path, got {type(X).__name__}")
    if len(X) == 0:
        raise DatasetError("dataset has no frames")
    shape = X.frames[0].image.shape
    ts = [f.t for f in X.frames]
    for f in X.frames:
        if f.image.shape != shape:
            raise DatasetError(f"frame {f.index}: image shape {f.image.shape} != {shape}")
        if require_masks and (f.mask is None or f.mask.shape != shape[:2]):
            raise DatasetError(f"frame {f.index}: missing or mis-sized mask")
    if len(ts) > 1 and not np.all(np.diff(ts) > 0):
        raise DatasetError("timestamps must be strictly increasing")
    return X


def check_time(t) -> float:
    t = float(t)
    if not np.isfinite(t) or not 0.0 <= t <= 1.0:
        raise InvalidParameterError(f"time must lie in [0, 1], got {t}")
    return t


def check_queries(X):
    """Normalize render queries to a list of (t, Camera).

    Accepts a Dataset (its frames), a single (t, camera) pair or a sequence
    of pairs.
    """
    if isinstance(X, (str, Path)):
        X = load_dataset(X)
    if isinstance(X, Dataset):
        return [(f.t, f.camera) for f in X.frames]
    if isinstance(X, tuple) and len(X) == 2 and isinstance(X[1], Camera):
        X = [X]
    out = []
    for item in X:
        try:
            t, cam = item
        except (TypeError, ValueError) as exc:
            raise InvalidParameterError("queries must be (t, Camera) pairs") from exc
        if not isinstance(cam, Camera):
            raise InvalidParameterError(f"expected a Camera, got {type(cam).__name__}")
        out.append((check_time(t), cam))
    return out


def check_which(which):
    if not isinstance(which, str):
        raise InvalidParameterError(f"render selection must be a string, got {which!r}")
    return normalize_which(which)
