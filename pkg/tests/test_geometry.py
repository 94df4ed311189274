import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cdrflow.exceptions import ContractError, DimensionError
from cdrflow.geometry import (VALIDITY_PRESETS, ValiditySpec, canonical_pose, check_validity, constraint_residuals,
                              distance_matrix, kabsch_align, random_rotation, rmsd)

H3 = VALIDITY_PRESETS["H3"]


def superposition_rmsd_oracle(a, b):
    """Independent closed form: RMSD after optimal proper rotation via the singular values."""
    p = b - b.mean(axis=0)
    q = a - a.mean(axis=0)
    s = np.linalg.svd(p.T @ q, compute_uv=False)
    if np.linalg.det(p.T @ q) < 0:
        s[-1] = -s[-1]
    msd = (np.sum(p ** 2) + np.sum(q ** 2) - 2 * np.sum(s)) / len(a)
    return np.sqrt(max(msd, 0.0))


def test_distance_matrix_collinear():
    d = distance_matrix([[0, 0, 0], [1, 0, 0], [2, 0, 0]])
    assert np.array_equal(d, [[0, 1, 2], [1, 0, 1], [2, 1, 0]])


def test_distance_matrix_double_loop(rng):
    g = rng.normal(size=(8, 3)) * 4
    expected = np.array([[np.linalg.norm(g[i] - g[j]) for j in range(8)] for i in range(8)])
    d = distance_matrix(g)
    assert np.allclose(d, expected, atol=1e-13, rtol=0)
    assert np.array_equal(d, d.T) and np.all(np.diag(d) == 0)


def test_distance_matrix_rejects_bad_input():
    with pytest.raises(DimensionError):
        distance_matrix(np.zeros((4, 2)))
    with pytest.raises(ContractError):
        distance_matrix(np.zeros((1, 3)))
    with pytest.raises(ContractError):
        distance_matrix([[0, 0, np.nan], [1, 1, 1]])


def test_kabsch_identity(rng):
    g = rng.normal(size=(5, 3))
    aligned, rot, _ = kabsch_align(g, g)
    assert np.allclose(rot, np.eye(3), atol=1e-12)
    assert rmsd(g, g) < 1e-12


def test_kabsch_rotated_translated_copy(rng):
    g = rng.normal(size=(7, 3))
    rz = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    moved = g @ rz.T + 5.0
    aligned, rot, _ = kabsch_align(g, moved)
    assert np.sqrt(np.mean(np.sum((aligned - g) ** 2, axis=1))) < 1e-9
    assert np.isclose(np.linalg.det(rot), 1.0)


def test_kabsch_matches_oracle_on_random_clouds(rng):
    for _ in range(20):
        a, b = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
        assert abs(rmsd(a, b) - superposition_rmsd_oracle(a, b)) < 1e-8


def test_kabsch_never_reflects(rng):
    g = rng.normal(size=(6, 3))
    mirror = g * np.array([1, 1, -1])
    _, rot, _ = kabsch_align(g, mirror)
    assert np.isclose(np.linalg.det(rot), 1.0)
    assert rmsd(g, mirror) > 1e-3
    assert rmsd(g, mirror, allow_reflection=True) < 1e-9


def test_kabsch_degenerate_and_mismatch():
    pts = np.ones((4, 3))
    _, rot, _ = kabsch_align(pts, pts * 2)
    assert np.array_equal(rot, np.eye(3))
    with pytest.raises(DimensionError):
        rmsd(np.zeros((3, 3)), np.zeros((4, 3)))


def test_rmsd_two_point_sets():
    # hand computation: centred segments of half-length 1 and 2 on the same axis,
    # each endpoint is off by 1 after superposition
    a = np.array([[0.0, 0, 0], [2.0, 0, 0]])
    b = np.array([[0.0, 0, 0], [4.0, 0, 0]])
    assert rmsd(a, b) == pytest.approx(1.0, abs=1e-12)
    assert superposition_rmsd_oracle(a, b) == pytest.approx(1.0, abs=1e-12)


def test_rigid_invariance_many(rng):
    for _ in range(50):
        g = rng.normal(size=(int(rng.integers(2, 17)), 3)) * 5
        q, v = random_rotation(rng), rng.normal(size=3) * 10
        moved = g @ q.T + v
        assert np.max(np.abs(distance_matrix(moved) - distance_matrix(g))) < 1e-9
        assert rmsd(g, moved) < 1e-9


def test_random_rotation_is_proper(rng):
    for _ in range(10):
        q = random_rotation(rng)
        assert np.allclose(q @ q.T, np.eye(3), atol=1e-12)
        assert np.isclose(np.linalg.det(q), 1.0)


coords_strategy = arrays(np.float64, st.tuples(st.integers(2, 10), st.just(3)),
                         elements=st.floats(-20, 20, allow_nan=False, width=64))


@settings(max_examples=60, deadline=None)
@given(coords_strategy, coords_strategy)
def test_rmsd_symmetric(a, b):
    n = min(len(a), len(b))
    a, b = a[:n], b[:n]
    assert abs(rmsd(a, b) - rmsd(b, a)) < 1e-7
    assert rmsd(a, a) < 1e-6


def test_validity_examples():
    n = 5
    d = np.zeros((n, n))
    for i in range(n - 1):
        d[i, i + 1] = d[i + 1, i] = 3.80
    d[0, n - 1] = d[n - 1, 0] = 7.0
    assert check_validity(d, H3).valid
    bad = d.copy()
    bad[2, 3] = bad[3, 2] = 5.0
    res = check_validity(bad, H3)
    assert not res.valid and res.bond_violations == [2] and not res.loop_violation
    far = d.copy()
    far[0, n - 1] = far[n - 1, 0] = 12.0
    res = check_validity(far, H3)
    assert res.loop_violation and res.bond_violations == []


def test_validity_lists_every_violation():
    d = np.full((4, 4), 7.0)
    np.fill_diagonal(d, 0)
    res = check_validity(d, H3)
    assert res.bond_violations == [0, 1, 2]


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.integers(0, 10_000))
def test_validity_monotone_in_window(widen_bond, widen_loop, seed):
    rng = np.random.default_rng(seed)
    d = rng.uniform(3.0, 9.0, size=(5, 5))
    d = (d + d.T) / 2
    np.fill_diagonal(d, 0)
    wide = ValiditySpec(H3.eta1 - widen_bond, H3.eta2 + widen_bond, H3.eps1 - widen_loop, H3.eps2 + widen_loop)
    if check_validity(d, H3).valid:
        assert check_validity(d, wide).valid


def test_validity_spec_invariants():
    with pytest.raises(ContractError):
        ValiditySpec(3.9, 3.8, 1, 2)
    spec = ValiditySpec.for_class("h3", eta2=4.0)
    assert spec.eta2 == 4.0 and spec.eta3 == pytest.approx(4.0 - 3.71)
    with pytest.raises(ContractError):
        ValiditySpec.for_class("L9")
    assert VALIDITY_PRESETS["H1"].to_dict() == {"eta1": 3.76, "eta2": 3.84, "eps1": 11.4, "eps2": 13.1}
    assert VALIDITY_PRESETS["H2"].to_dict() == {"eta1": 3.76, "eta2": 3.87, "eps1": 5.0, "eps2": 5.9}


def test_constraint_residuals_zero_iff_valid():
    from cdrflow.data import synthesize_loop
    loop = synthesize_loop(H3, 7, np.random.default_rng(5))
    assert constraint_residuals(loop.coords, H3) == (0.0, 0.0)
    stretched = loop.coords * 1.5
    bond, loop_dev = constraint_residuals(stretched, H3)
    bonds = np.linalg.norm(np.diff(stretched, axis=0), axis=1)
    assert bond == pytest.approx(bonds.max() - H3.eta2)
    assert not check_validity(distance_matrix(stretched), H3).valid


def test_canonical_pose_preserves_shape(rng):
    g = rng.normal(size=(9, 3)) * 3 + 10
    c = canonical_pose(g)
    assert np.allclose(c.mean(axis=0), 0, atol=1e-12)
    assert np.allclose(distance_matrix(c), distance_matrix(g), atol=1e-10)
    assert rmsd(g, c) < 1e-9
