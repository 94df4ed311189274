"""Rebuild 3D coordinates from a (possibly non-Euclidean) distance matrix.

The objective combines an absolute-value stress on squared distances with
interval penalties on the bond lengths and on the first-to-last distance.
It is minimized by random coordinate descent: each sweep visits the points
in a seeded random order and moves one point at a time with backtracking
subgradient steps, so no single update can increase the objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .constraints import surrogate_h, surrogate_h_grad
from .exceptions import ContractError
from .geometry import (ValidityResult, ValiditySpec, canonical_pose, check_validity,
                       constraint_residuals, distance_matrix)
from .validation import check_coordinates, check_distance_matrix, check_rng


@dataclass(frozen=True)
class EmbedConfig:
    lambda1: float = 50.0
    lambda2: float = 100.0
    max_sweeps: int = 300
    inner_steps: int = 8
    initial_step: float = 0.05
    min_step: float = 1e-12
    tolerance: float = 1e-9
    repair_rounds: int = 4  # extra descents with 10x penalties if hard constraints still fail
    repair_inset: float = 0.05  # fraction of each window width the repair target is shrunk by
    indefinite_ratio: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.lambda1 < 1 or self.lambda2 < 1:
            raise ContractError("lambda1 and lambda2 must be >= 1")
        if self.tolerance <= 0:
            raise ContractError("tolerance must be positive")
        if self.max_sweeps < 1 or self.inner_steps < 1:
            raise ContractError("max_sweeps and inner_steps must be >= 1")


@dataclass
class EmbedResult:
    coords: np.ndarray
    objective: float
    constraint_residuals: tuple
    sweeps_used: int
    converged: bool
    validity: ValidityResult

    @property
    def valid(self) -> bool:
        return self.validity.valid


def stress_objective(g, d, spec: ValiditySpec, cfg: EmbedConfig = EmbedConfig()) -> float:
    """Penalized stress of coordinates ``g`` against target distances ``d``.

    Sums ``|‖g_i - g_j‖² - d_ij²|`` over ordered pairs ``i != j`` and adds
    ``lambda1`` times the bond-length surrogate and ``lambda2`` times the
    end-to-end surrogate. With two points the only pair is the bond, so the
    end-to-end term is left out.
    """
    g = check_coordinates(g)
    d = check_distance_matrix(d)
    if d.shape[0] != g.shape[0]:
        raise ContractError(f"{g.shape[0]} points but a {d.shape[0]}x{d.shape[0]} distance matrix")
    diff = g[:, None, :] - g[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    return _total_from(sq, g, d ** 2, spec, cfg.lambda1, cfg.lambda2)


class _PointProblem:
    """Terms of the objective that involve a single point, with the rest held fixed."""

    def __init__(self, d: np.ndarray, spec: ValiditySpec, lambda1: float, lambda2: float):
        self.d2 = d ** 2
        self.spec = spec
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.n = d.shape[0]

    def _links(self, i):
        """Penalized partners of point ``i``: (index, a, b, delta, weight)."""
        s, n = self.spec, self.n
        links = []
        if i > 0:
            links.append((i - 1, s.eta1, s.eta2, s.eta3, self.lambda1))
        if i < n - 1:
            links.append((i + 1, s.eta1, s.eta2, s.eta3, self.lambda1))
        if n > 2 and i in (0, n - 1):
            links.append((n - 1 - i, s.eps1, s.eps2, s.eps3, self.lambda2))
        return links

    def value(self, g: np.ndarray, i: int, x: np.ndarray) -> float:
        others = np.arange(self.n) != i
        sq = np.sum((g[others] - x) ** 2, axis=1)
        total = 2.0 * float(np.sum(np.abs(sq - self.d2[i, others])))
        for j, a, b, delta, w in self._links(i):
            total += w * surrogate_h(float(np.linalg.norm(x - g[j])), a, b, delta)
        return total

    def subgradient(self, g: np.ndarray, i: int, x: np.ndarray) -> np.ndarray:
        others = np.arange(self.n) != i
        diff = x - g[others]
        residual = np.sum(diff ** 2, axis=1) - self.d2[i, others]
        grad = 4.0 * (np.sign(residual)[:, None] * diff).sum(axis=0)
        for j, a, b, delta, w in self._links(i):
            v = x - g[j]
            r = float(np.linalg.norm(v))
            if r > 0:
                grad += w * surrogate_h_grad(r, a, b, delta) * v / r
        return grad


def init_coordinates(d, rng=None, spec: ValiditySpec | None = None, indefinite_ratio: float = 0.5) -> np.ndarray:
    """Classical multidimensional-scaling start.

    The double-centred squared distances are projected onto their top three
    eigenpairs. When the negative spectrum carries more than
    ``indefinite_ratio`` of the retained positive mass, the matrix is too far
    from Euclidean for that to help and a random chain is returned instead,
    with consecutive spacings drawn from the bond window of ``spec``
    (3.8 Angstrom when no spec is given).
    """
    d = check_distance_matrix(d)
    n = d.shape[0]
    rng = check_rng(rng)
    centering = np.eye(n) - 1.0 / n
    gram = -0.5 * centering @ (d ** 2) @ centering
    values, vectors = np.linalg.eigh(gram)
    order = np.argsort(values)[::-1]
    values, vectors = values[order], vectors[:, order]
    top = np.clip(values[:3], 0.0, None)
    negative = -values[values < 0].sum()
    if top.sum() > 0 and negative <= indefinite_ratio * top.sum():
        coords = np.zeros((n, 3))
        k = min(3, n)
        coords[:, :k] = vectors[:, :k] * np.sqrt(top[:k])
        return coords
    return random_chain(n, rng, spec)


def random_chain(n: int, rng=None, spec: ValiditySpec | None = None) -> np.ndarray:
    rng = check_rng(rng)
    lo, hi = (spec.eta1, spec.eta2) if spec is not None else (3.8, 3.8)
    steps = rng.normal(size=(n - 1, 3))
    steps /= np.linalg.norm(steps, axis=1, keepdims=True)
    steps *= rng.uniform(lo, hi, size=(n - 1, 1))
    return np.vstack([np.zeros((1, 3)), np.cumsum(steps, axis=0)])


def _descend(g, problem: _PointProblem, cfg: EmbedConfig, rng, max_sweeps: int, step_sizes: np.ndarray):
    """Run random coordinate descent sweeps; returns (coords, sweeps, converged)."""
    n = g.shape[0]
    sweeps = 0
    converged = False
    for sweeps in range(1, max_sweeps + 1):
        before = _total(g, problem)
        for i in rng.permutation(n):
            x = g[i]
            fx = problem.value(g, i, x)
            for _ in range(cfg.inner_steps):
                grad = problem.subgradient(g, i, x)
                norm = float(np.linalg.norm(grad))
                if norm == 0.0:
                    break
                t = step_sizes[i]
                while t >= cfg.min_step:
                    candidate = x - (t / norm) * grad
                    fc = problem.value(g, i, candidate)
                    if fc < fx:
                        x, fx = candidate, fc
                        step_sizes[i] = min(2.0 * t, 10.0)
                        break
                    t *= 0.5
                else:
                    step_sizes[i] = max(cfg.min_step, t * 4)
                    break
            g[i] = x
        current = _total(g, problem)
        if before - current < cfg.tolerance:
            converged = True
            break
    return g, sweeps, converged


def _total(g, problem: _PointProblem) -> float:
    diff = g[:, None, :] - g[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    return _total_from(sq, g, problem.d2, problem.spec, problem.lambda1, problem.lambda2)


def _total_from(sq, g, d2, spec, lambda1, lambda2) -> float:
    total = float(np.sum(np.abs(sq - d2)))
    bonds = np.linalg.norm(np.diff(g, axis=0), axis=1)
    total += lambda1 * float(np.sum(surrogate_h(bonds, spec.eta1, spec.eta2, spec.eta3)))
    if g.shape[0] > 2:
        end = float(np.linalg.norm(g[0] - g[-1]))
        total += lambda2 * surrogate_h(end, spec.eps1, spec.eps2, spec.eps3)
    return total


def embed(d, spec: ValiditySpec, cfg: EmbedConfig = EmbedConfig(), init=None) -> EmbedResult:
    """Coordinates whose distances approximate ``d`` under the validity penalties.

    If the hard constraints still fail after the main descent, up to
    ``cfg.repair_rounds`` further descents run with both penalty weights
    multiplied by ten each round and the windows shrunk by
    ``cfg.repair_inset`` of their width. Near a window edge the quadratic
    band has almost no slope, so without the inset the stress term keeps
    bonds a hair outside. The start and the returned coordinates are in
    canonical pose; ``objective`` is always reported under the configured
    weights.
    Non-convergence is reported through ``converged``, never raised.
    """
    d = check_distance_matrix(d)
    n = d.shape[0]
    if n < 2:
        raise ContractError("need at least two points")
    rng = np.random.default_rng(cfg.seed)
    g = init_coordinates(d, rng, spec, cfg.indefinite_ratio) if init is None else check_coordinates(init)
    if g.shape != (n, 3):
        raise ContractError(f"init has shape {g.shape}, expected {(n, 3)}")
    # gauge-fix and snap to a 1e-9 grid: a rigidly moved start then gives the same bits,
    # and the nonsmooth descent is too sensitive to rounding to rely on anything less
    g = np.round(canonical_pose(g), 9)

    base = _PointProblem(d, spec, cfg.lambda1, cfg.lambda2)
    steps = np.full(n, cfg.initial_step)
    g, sweeps, converged = _descend(g, base, cfg, rng, cfg.max_sweeps, steps)
    total_sweeps = sweeps

    factor = 1.0
    target = _inset(spec, cfg.repair_inset)
    for _ in range(cfg.repair_rounds):
        if _hard_ok(g, spec):
            break
        factor *= 10.0
        stiff = _PointProblem(d, target, cfg.lambda1 * factor, cfg.lambda2 * factor)
        g, sweeps, converged = _descend(g, stiff, cfg, rng, cfg.max_sweeps, np.full(n, cfg.initial_step))
        total_sweeps += sweeps

    coords = canonical_pose(g)
    return EmbedResult(
        coords=coords,
        objective=stress_objective(coords, d, spec, cfg),
        constraint_residuals=constraint_residuals(coords, spec),
        sweeps_used=total_sweeps,
        converged=converged,
        validity=check_validity(distance_matrix(coords), spec),
    )


def _inset(spec: ValiditySpec, fraction: float) -> ValiditySpec:
    bond = fraction * spec.eta3
    loop = fraction * spec.eps3
    return ValiditySpec(spec.eta1 + bond, spec.eta2 - bond, spec.eps1 + loop, spec.eps2 - loop)


def _hard_ok(g, spec: ValiditySpec) -> bool:
    bond_dev, loop_dev = constraint_residuals(g, spec)
    return bond_dev == 0.0 and loop_dev == 0.0
