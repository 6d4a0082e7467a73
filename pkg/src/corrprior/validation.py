"""Input checks shared by the estimators and metrics."""
from __future__ import annotations

import numpy as np

from .geometry import CorrespondenceSet, PointCloud, SurfaceMesh


def check_correspondence_stack(X, n_points=None, min_samples=1) -> np.ndarray:
    """Coerce a sequence of correspondence sets to a finite float64 (n, M, 3) array.

    Accepts (n, M, 3), flattened (n, 3M) or a list of ``CorrespondenceSet``.
    """
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], CorrespondenceSet):
        X = [c.points for c in X]
    if isinstance(X, (list, tuple)):
        lengths = {len(np.asarray(x)) for x in X}
        if len(lengths) > 1:
            raise ValueError(f"correspondence sets have inconsistent sizes {sorted(lengths)}")
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2 and X.shape[1] % 3 == 0:
        X = X.reshape(len(X), -1, 3)
    if X.ndim != 3 or X.shape[2] != 3:
        raise ValueError(f"expected correspondences of shape (n, M, 3), got {X.shape}")
    if len(X) < min_samples:
        raise ValueError(f"need at least {min_samples} correspondence sets, got {len(X)}")
    if n_points is not None and X.shape[1] != n_points:
        raise ValueError(f"expected {n_points} points per set, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("correspondences contain non-finite values")
    return X


def check_volumes(images, shape=None) -> np.ndarray:
    """Stack images into a finite float32 (n, D, H, W) array, optionally checking the grid size."""
    X = np.asarray(images, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    if X.ndim == 5 and X.shape[1] == 1:
        X = X[:, 0]
    if X.ndim != 4:
        raise ValueError(f"expected volumes of shape (n, D, H, W), got {X.shape}")
    if shape is not None and tuple(X.shape[1:]) != tuple(shape):
        raise ValueError(f"expected volumes of shape {tuple(shape)}, got {tuple(X.shape[1:])}")
    if not np.all(np.isfinite(X)):
        raise ValueError("volumes contain non-finite values")
    return X


def check_shapes(shapes, k=None) -> list:
    """Validate a list of meshes / point clouds / (n, 3) arrays for surface encoding."""
    out = []
    for i, s in enumerate(shapes):
        if isinstance(s, SurfaceMesh):
            s.validate()
        elif not isinstance(s, PointCloud):
            s = PointCloud(s)
        if k is not None and s.n_vertices <= k:
            raise ValueError(f"shape {i} has {s.n_vertices} points, fewer than k + 1 = {k + 1}")
        out.append(s)
    return out
