"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError

from .nn import ShapeError


def check_fitted(estimator, attribute: str) -> None:
    if not hasattr(estimator, attribute):
        raise NotFittedError(f"{type(estimator).__name__} is not fitted yet; call fit first")


def check_scenes(scenes) -> list:
    from .raster import Scene

    scenes = list(scenes)
    if not scenes:
        raise ValueError("expected at least one scene")
    for s in scenes:
        if not isinstance(s, Scene):
            raise TypeError(f"expected Scene objects, got {type(s).__name__}")
    return scenes


def check_latents(z, latent_shape) -> np.ndarray:
    """Coerce ``z`` to ``(B, C', H', W')``; flat ``(B, D)`` input is reshaped."""
    z = np.asarray(z, dtype=np.float64)
    dim = int(np.prod(latent_shape))
    if z.ndim == 2 and z.shape[1] == dim:
        z = z.reshape(len(z), *latent_shape)
    if z.shape[1:] != tuple(latent_shape):
        raise ShapeError(f"latents must have shape (B, {tuple(latent_shape)}), got {z.shape}")
    if not np.isfinite(z).all():
        raise ValueError("latents contain non-finite values")
    return z


def check_hyperparams(estimator, positive=(), non_negative=(), counts=()) -> None:
    """Raise ``ValueError`` naming the first out-of-range hyperparameter."""
    for name in positive:
        if not getattr(estimator, name) > 0:
            raise ValueError(f"{name} must be positive, got {getattr(estimator, name)!r}")
    for name in non_negative:
        if not getattr(estimator, name) >= 0:
            raise ValueError(f"{name} must be non-negative, got {getattr(estimator, name)!r}")
    for name in counts:
        v = getattr(estimator, name)
        if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 0:
            raise ValueError(f"{name} must be a non-negative integer, got {v!r}")
