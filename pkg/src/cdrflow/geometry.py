"""Coordinates, distance matrices, rigid superposition and loop validity."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractError, DimensionError
from .validation import check_coordinates, check_distance_matrix


@dataclass(frozen=True)
class ValiditySpec:
    """Interval thresholds (in Angstrom) that define a valid loop.

    Consecutive alpha-carbon distances must lie in ``[eta1, eta2]`` and the
    first-to-last distance in ``[eps1, eps2]``.
    """

    eta1: float
    eta2: float
    eps1: float
    eps2: float

    def __post_init__(self):
        if not (self.eta1 < self.eta2 and self.eps1 < self.eps2):
            raise ContractError(f"invalid thresholds: {self}")

    @property
    def eta3(self) -> float:
        return self.eta2 - self.eta1

    @property
    def eps3(self) -> float:
        return self.eps2 - self.eps1

    @classmethod
    def for_class(cls, loop_class: str, **overrides) -> "ValiditySpec":
        try:
            base = VALIDITY_PRESETS[loop_class.upper()]
        except KeyError:
            raise ContractError(f"unknown loop class {loop_class!r}; expected one of {sorted(VALIDITY_PRESETS)}") from None
        values = {"eta1": base.eta1, "eta2": base.eta2, "eps1": base.eps1, "eps2": base.eps2}
        values.update({k: float(v) for k, v in overrides.items() if v is not None})
        return cls(**values)

    def to_dict(self) -> dict:
        return {"eta1": self.eta1, "eta2": self.eta2, "eps1": self.eps1, "eps2": self.eps2}


VALIDITY_PRESETS = {
    "H1": ValiditySpec(eta1=3.76, eta2=3.84, eps1=11.4, eps2=13.1),
    "H2": ValiditySpec(eta1=3.76, eta2=3.87, eps1=5.0, eps2=5.9),
    "H3": ValiditySpec(eta1=3.71, eta2=3.88, eps1=6.5, eps2=8.5),
}


@dataclass
class ValidityResult:
    valid: bool
    bond_violations: list = field(default_factory=list)
    loop_violation: bool = False


def distance_matrix(coords) -> np.ndarray:
    """Pairwise Euclidean distances between the rows of an ``(N, 3)`` array."""
    g = check_coordinates(coords)
    diff = g[:, None, :] - g[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    # exact symmetry regardless of summation order
    d = np.triu(d, 1)
    return d + d.T


def kabsch_align(reference, moving):
    """Superimpose ``moving`` onto ``reference`` with a proper rigid motion.

    Returns ``(aligned, rotation, translation)`` with
    ``aligned = moving @ rotation.T + translation``. Reflections are excluded.
    If all points of either set coincide the rotation is the identity.
    """
    ref = check_coordinates(reference, "reference")
    mov = check_coordinates(moving, "moving")
    if ref.shape != mov.shape:
        raise DimensionError(f"point counts differ: {ref.shape[0]} vs {mov.shape[0]}")
    ref_c = ref.mean(axis=0)
    mov_c = mov.mean(axis=0)
    p = mov - mov_c
    q = ref - ref_c
    if np.allclose(p, 0.0) or np.allclose(q, 0.0):
        rotation = np.eye(3)
    else:
        u, _, vt = np.linalg.svd(p.T @ q)
        sign = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
        rotation = vt.T @ np.diag([1.0, 1.0, sign]) @ u.T
    translation = ref_c - rotation @ mov_c
    aligned = mov @ rotation.T + translation
    return aligned, rotation, translation


def rmsd(a, b, allow_reflection: bool = False) -> float:
    """Root-mean-square deviation after superimposing ``b`` onto ``a``.

    Distance matrices do not determine handedness, so comparing a structure
    rebuilt from distances with its source needs ``allow_reflection=True``;
    the smaller of the direct and mirrored superpositions is returned then.
    """
    a = check_coordinates(a, "a")
    b = check_coordinates(b, "b")
    if a.shape != b.shape:
        raise DimensionError(f"point counts differ: {a.shape[0]} vs {b.shape[0]}")
    aligned, _, _ = kabsch_align(a, b)
    value = float(np.sqrt(np.mean(np.sum((a - aligned) ** 2, axis=1))))
    if allow_reflection:
        mirrored = b * np.array([1.0, 1.0, -1.0])
        value = min(value, rmsd(a, mirrored))
    return value


def check_validity(d, spec: ValiditySpec) -> ValidityResult:
    """Hard-constraint check on a (symmetrized) distance matrix.

    ``bond_violations`` lists the 0-based indices ``i`` for which
    ``d[i, i+1]`` is outside ``[eta1, eta2]``.
    """
    d = check_distance_matrix(d)
    n = d.shape[0]
    bonds = d[np.arange(n - 1), np.arange(1, n)]
    bad = np.flatnonzero((bonds < spec.eta1) | (bonds > spec.eta2)).tolist()
    end = d[0, n - 1]
    loop_bad = bool(end < spec.eps1 or end > spec.eps2)
    return ValidityResult(valid=not bad and not loop_bad, bond_violations=bad, loop_violation=loop_bad)


def constraint_residuals(coords, spec: ValiditySpec) -> tuple[float, float]:
    """Largest distance outside the bond window and outside the end-to-end window.

    Both values are zero exactly when the coordinates satisfy the hard constraints.
    """
    g = check_coordinates(coords)
    bonds = np.linalg.norm(np.diff(g, axis=0), axis=1)
    bond_dev = np.maximum(spec.eta1 - bonds, 0.0) + np.maximum(bonds - spec.eta2, 0.0)
    end = float(np.linalg.norm(g[0] - g[-1]))
    loop_dev = max(spec.eps1 - end, 0.0) + max(end - spec.eps2, 0.0)
    return float(bond_dev.max(initial=0.0)), float(loop_dev)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed proper rotation matrix."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def canonical_pose(coords) -> np.ndarray:
    """Centroid at the origin and principal axes along x, y, z.

    Axis signs are fixed so the third moment along x and y is nonnegative
    (z then follows from handedness), which makes the pose a function of the
    shape alone: any rigid motion of the input gives the same output up to
    rounding, barring symmetric shapes.
    """
    g = check_coordinates(coords)
    centered = g - g.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    if vt.shape[0] < 3:
        return centered
    for k in range(2):
        if np.sum((centered @ vt[k]) ** 3) < 0:
            vt[k] = -vt[k]
    if np.linalg.det(vt) < 0:
        vt[2] = -vt[2]
    return centered @ vt.T
