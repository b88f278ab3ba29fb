"""Input checks shared by the estimator wrappers."""
from __future__ import annotations

import numpy as np

from .skeleton import KinematicTree, as_pose


def check_images(images, name: str = "images") -> np.ndarray:
    """Return a float32 ``(B, H, W, 3)`` stack with values in [0, 1].

    Accepts one ``(H, W, 3)`` image or any sequence of equal-sized ones.
    """
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"{name} must have shape (B, H, W, 3), got {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} must lie in [0, 1]")
    return arr


def check_poses(poses, tree: KinematicTree, n: int | None = None) -> np.ndarray:
    """Return a float64 ``(B, N, 2)`` stack; ``n`` pins the batch size."""
    arr = np.asarray(poses, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    out = np.stack([as_pose(p, tree) for p in arr]) if arr.size else arr
    if n is not None and len(out) != n:
        raise ValueError(f"got {len(out)} poses for {n} images")
    return out


def check_samples(samples) -> list:
    from .toydata import Sample
    samples = list(samples)
    if not samples:
        raise ValueError("no samples given")
    bad = [k for k, s in enumerate(samples) if not isinstance(s, Sample)]
    if bad:
        raise TypeError(f"items {bad[:5]} are not Sample records")
    return samples
