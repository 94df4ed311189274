"""Soft versions of the loop validity constraints.

The interval surrogate ``H(y; a, b, delta)`` is zero on ``(a, b]``, quadratic
in a ``delta``-wide band on either side and linear beyond, with matching
values and slopes at the four joints. ``h1`` penalizes bond lengths, ``h2``
the end-to-end distance and ``h3`` roughness of the distance matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ContractError
from .geometry import ValiditySpec
from .validation import check_distance_matrix, check_positive_int


@dataclass(frozen=True)
class SurrogateParams:
    a: float
    b: float
    delta: float

    def __post_init__(self):
        if not self.a <= self.b or self.delta <= 0:
            raise ContractError(f"surrogate needs a <= b and delta > 0, got {self}")


@dataclass(frozen=True)
class ConstraintWeights:
    xi1: float = 10.0
    xi2: float = 50.0
    xi3: float = 1.0

    def __post_init__(self):
        if min(self.xi1, self.xi2, self.xi3) < 0:
            raise ContractError("constraint weights must be nonnegative")


def surrogate_h(y, a: float, b: float, delta: float):
    """Interval surrogate penalty, vectorized over ``y``."""
    y = np.asarray(y, dtype=np.float64)
    out = np.select(
        [y <= a - delta, y <= a, y <= b, y <= b + delta],
        [
            delta * (-y + a - 0.5 * delta),
            0.5 * (y - a) ** 2,
            0.0,
            0.5 * (y - b) ** 2,
        ],
        default=delta * (y - b - 0.5 * delta),
    )
    return out if out.ndim else float(out)


def surrogate_h_grad(y, a: float, b: float, delta: float):
    y = np.asarray(y, dtype=np.float64)
    out = np.select(
        [y <= a - delta, y <= a, y <= b, y <= b + delta],
        [-delta, y - a, 0.0, y - b],
        default=delta,
    )
    return out if out.ndim else float(out)


def h1_bond(d, spec: ValiditySpec) -> float:
    d = check_distance_matrix(d, symmetrize=False)
    n = d.shape[0]
    bonds = d[np.arange(n - 1), np.arange(1, n)]
    return float(np.sum(surrogate_h(bonds, spec.eta1, spec.eta2, spec.eta3)))


def h2_loop(d, spec: ValiditySpec) -> float:
    d = check_distance_matrix(d, symmetrize=False)
    return float(surrogate_h(d[0, -1], spec.eps1, spec.eps2, spec.eps3))


def h3_smooth(d) -> float:
    """Squared differences between vertically and horizontally adjacent entries.

    Both sweeps run over the leading ``(N-1) x (N-1)`` block, so row and
    column ``N`` enter only as neighbours.
    """
    d = check_distance_matrix(d, symmetrize=False)
    core = d[:-1, :-1]
    return float(np.sum((core - d[1:, :-1]) ** 2) + np.sum((core - d[:-1, 1:]) ** 2))


def batch_constraint_terms(d: Tensor, lengths, spec: ValiditySpec):
    """Per-sample ``(h1, h2, h3)`` for a padded batch of distance matrices.

    ``d`` has shape ``(B, n, n)``; sample ``b`` occupies the leading
    ``lengths[b] x lengths[b]`` block. Returns three ``(B,)`` tensors.
    """
    lengths = np.asarray(lengths, dtype=int)
    batch, n, _ = d.shape
    if np.any(lengths < 2) or np.any(lengths > n):
        raise ContractError(f"lengths must lie in [2, {n}]")

    inner = (np.arange(n - 1)[None, :] < (lengths - 1)[:, None]).astype(np.float64)
    i = np.arange(n - 1)
    bonds = d[:, i, i + 1]
    h1 = (ad.surrogate(bonds, spec.eta1, spec.eta2, spec.eta3) * inner).sum(axis=1)

    ends = d[np.arange(batch), np.zeros(batch, dtype=int), lengths - 1]
    h2 = ad.surrogate(ends, spec.eps1, spec.eps2, spec.eps3)

    mask = Tensor(inner[:, :, None] * inner[:, None, :])
    core = d[:, :-1, :-1]
    down = ad.square(core - d[:, 1:, :-1]) * mask
    right = ad.square(core - d[:, :-1, 1:]) * mask
    h3 = (down + right).sum(axis=(1, 2))
    return h1, h2, h3


def batch_constraint_loss(d: Tensor, lengths, spec: ValiditySpec, weights: ConstraintWeights) -> Tensor:
    h1, h2, h3 = batch_constraint_terms(d, lengths, spec)
    return h1 * weights.xi1 + h2 * weights.xi2 + h3 * weights.xi3


def constraint_loss(d, spec: ValiditySpec, weights: ConstraintWeights = ConstraintWeights()):
    """Weighted constraint loss of one distance matrix.

    A :class:`Tensor` input gives a differentiable scalar :class:`Tensor`;
    an array gives a float.
    """
    if isinstance(d, Tensor):
        n = d.shape[-1]
        out = batch_constraint_loss(d.reshape(1, n, n), [n], spec, weights)
        return out.sum()
    arr = np.asarray(d, dtype=np.float64)
    return (weights.xi1 * h1_bond(arr, spec) + weights.xi2 * h2_loop(arr, spec)
            + weights.xi3 * h3_smooth(arr))


def mc_constraint_objective(model, spec: ValiditySpec, weights: ConstraintWeights, m: int,
                            rng_seed=None) -> Tensor:
    """Monte-Carlo estimate of the expected constraint loss of generated matrices.

    Draws ``m`` standard-normal distance latents, pushes them through the
    inverse distance flow (keeping the graph, so the estimate is
    differentiable in the flow parameters) and averages the constraint loss
    of the symmetrized matrices.
    """
    m = check_positive_int(m, "m")
    rng = np.random.default_rng(rng_seed)
    d, lengths = model.sample_distances(m, rng)
    return batch_constraint_loss(d, lengths, spec, weights).mean()
