"""Input validation helpers used at public entry points."""

from __future__ import annotations

import numpy as np

from .exceptions import ContractError, DimensionError


def check_coordinates(coords, name: str = "coords") -> np.ndarray:
    """Return ``coords`` as a finite ``(N, 3)`` float64 array with N >= 2."""
    arr = np.asarray(coords, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise DimensionError(f"{name} must have shape (N, 3), got {arr.shape}")
    if arr.shape[0] < 2:
        raise ContractError(f"{name} needs at least 2 points, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains non-finite values")
    return arr


def check_distance_matrix(d, name: str = "d", symmetrize: bool = True) -> np.ndarray:
    """Return ``d`` as a square, finite, nonnegative float64 matrix.

    With ``symmetrize`` the matrix is replaced by ``(d + d.T) / 2`` with a
    zeroed diagonal, which is how generated matrices are post-processed.
    """
    arr = np.asarray(d, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise DimensionError(f"{name} must be a square matrix, got {arr.shape}")
    if arr.shape[0] < 2:
        raise ContractError(f"{name} needs N >= 2")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains non-finite values")
    if symmetrize:
        arr = symmetrize_distances(arr)
    if np.any(arr < 0):
        raise ContractError(f"{name} has negative entries")
    return arr


def symmetrize_distances(d: np.ndarray) -> np.ndarray:
    """``(d + d.T) / 2`` with zero diagonal and negatives clamped to zero."""
    out = 0.5 * (d + np.swapaxes(d, -1, -2))
    out = np.maximum(out, 0.0)
    idx = np.arange(out.shape[-1])
    out[..., idx, idx] = 0.0
    return out


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or int(value) != value or value < minimum:
        raise ContractError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_rng(random_state) -> np.random.Generator:
    """Accept None, an int seed, or a Generator."""
    if isinstance(random_state, np.random.Generator):
        return random_state
    return np.random.default_rng(random_state)
