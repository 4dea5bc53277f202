import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from romflux.fields_io import SnapshotSet
from romflux.mesh import build_structured_mesh
from romflux.pod import (InnerProductWeights, RankError, build_modes, cell_weights, compute_pod,
                         correlation_matrix, face_weights, load_basis, project_coefficients,
                         projection_error, save_basis, symmetric_eig)


def random_weights(rng, n):
    return InnerProductWeights(rng.uniform(0.5, 2.0, n))


def weighted_orthonormal(rng, w, k):
    q, _ = np.linalg.qr(rng.standard_normal((w.values.size, k)))
    return q / np.sqrt(w.values)[:, None]


# --- correlation ----------------------------------------------------------------


def test_orthonormal_snapshots_give_identity(rng):
    w = random_weights(rng, 12)
    s = weighted_orthonormal(rng, w, 2)
    np.testing.assert_allclose(correlation_matrix(s, w), np.eye(2), atol=1e-14)


def test_bilinearity(rng):
    w = random_weights(rng, 9)
    s = rng.standard_normal(9)
    c = correlation_matrix(np.column_stack([s, 2 * s]), w)
    ss = float(np.sum(s * s * w.values))
    np.testing.assert_allclose(c, [[ss, 2 * ss], [2 * ss, 4 * ss]], rtol=1e-14)


def test_correlation_dense_oracle(rng):
    s = rng.standard_normal((8, 5))
    w = rng.uniform(0.1, 1, 8)
    ref = np.zeros((5, 5))
    for i in range(5):
        for j in range(5):
            for k in range(8):
                ref[i, j] += s[k, i] * s[k, j] * w[k]
    c = correlation_matrix(s, w)
    np.testing.assert_allclose(c, ref, rtol=1e-14, atol=1e-14)
    assert np.abs(c - c.T).max() <= 1e-14


def test_correlation_rejects_mismatch(rng):
    with pytest.raises(ValueError):
        correlation_matrix(rng.standard_normal((8, 3)), np.ones(7))


# --- eigensolver --------------------------------------------------------------------


def test_diagonal_eig():
    q, lam = symmetric_eig(np.diag([1.0, 3.0]))
    np.testing.assert_allclose(lam, [3, 1])
    np.testing.assert_allclose(np.abs(q), [[0, 1], [1, 0]], atol=1e-15)


def test_two_by_two_eig():
    q, lam = symmetric_eig(np.array([[2.0, 1.0], [1.0, 2.0]]))
    np.testing.assert_allclose(lam, [3, 1], rtol=1e-14)
    s = 1 / np.sqrt(2)
    np.testing.assert_allclose(np.abs(q), [[s, s], [s, s]], rtol=1e-14)
    assert np.sign(q[0, 1]) != np.sign(q[1, 1])


def check_eig(c):
    q, lam = symmetric_eig(c)
    norm = np.linalg.norm(c)
    assert np.linalg.norm(c @ q - q * lam) <= 1e-12 * max(norm, 1e-300)
    np.testing.assert_allclose(q.T @ q, np.eye(c.shape[0]), atol=1e-12)
    assert np.all(np.diff(lam) <= 0)


def test_random_ten_by_ten(rng):
    a = rng.standard_normal((10, 10))
    check_eig(a + a.T)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 17), st.integers(0, 2 ** 32 - 1))
def test_eig_property(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, n))
    check_eig(a @ a.T if seed % 2 else a + a.T)


def test_eig_rejects_nonsymmetric():
    with pytest.raises(ValueError):
        symmetric_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))


# --- modes ----------------------------------------------------------------------------


def test_orthonormal_snapshots_are_their_own_modes(rng):
    w = random_weights(rng, 20)
    s = weighted_orthonormal(rng, w, 3) * np.array([3.0, 2.0, 1.0])
    basis = compute_pod(s, w, 3)
    for i in range(3):
        col = s[:, i] / np.sqrt(np.sum(s[:, i] ** 2 * w.values))
        assert min(np.abs(basis.modes[:, i] - col).max(),
                   np.abs(basis.modes[:, i] + col).max()) <= 1e-10


def test_full_rank_reconstruction(rng):
    w = random_weights(rng, 30)
    s = rng.standard_normal((30, 6))
    basis = compute_pod(s, w, 6)
    np.testing.assert_allclose(basis.modes @ project_coefficients(s, basis), s, atol=1e-8)


def test_tail_identity(rng):
    w = random_weights(rng, 40)
    s = rng.standard_normal((40, 6))
    basis = compute_pod(s, w, 3)
    lam = basis.eigenvalues
    assert projection_error(s, basis) == pytest.approx(lam[3:].sum() / lam.sum(), abs=1e-10)


def test_rank_floor(rng):
    w = random_weights(rng, 15)
    base = rng.standard_normal((15, 2))
    s = np.column_stack([base, base @ [1.0, -2.0]])
    with pytest.raises(RankError):
        compute_pod(s, w, 3)
    assert compute_pod(s, w, 2).n_modes == 2
    with pytest.raises(RankError):
        compute_pod(s, w, 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2 ** 32 - 1))
def test_basis_invariants(n_snap, seed):
    rng = np.random.default_rng(seed)
    w = random_weights(rng, 25)
    s = rng.standard_normal((25, n_snap)) * rng.uniform(0.1, 5, n_snap)
    c = correlation_matrix(s, w)
    q, lam = symmetric_eig(c)
    # energy identity
    total = sum(float(np.sum(s[:, j] ** 2 * w.values)) for j in range(n_snap))
    assert lam.sum() == pytest.approx(total, rel=1e-10)
    errors = []
    for r in range(1, n_snap + 1):
        basis = build_modes(s, q, lam, r, w)
        np.testing.assert_allclose(basis.gram(), np.eye(r), atol=1e-10)
        assert np.all(np.diff(basis.eigenvalues) <= 0)
        # largest entry of every mode is positive
        idx = np.argmax(np.abs(basis.modes), axis=0)
        assert np.all(basis.modes[idx, np.arange(r)] > 0)
        errors.append(projection_error(s, basis))
    assert all(b <= a + 1e-12 for a, b in zip(errors, errors[1:]))


# --- projection -----------------------------------------------------------------------


def test_projection_examples(rng):
    w = random_weights(rng, 18)
    basis = compute_pod(rng.standard_normal((18, 4)), w, 4)
    np.testing.assert_allclose(project_coefficients(basis.modes[:, 1], basis), [0, 1, 0, 0],
                               atol=1e-12)
    x = rng.standard_normal(18)
    resid = x - basis.modes @ project_coefficients(x, basis)
    assert np.abs(project_coefficients(resid, basis)).max() <= 1e-12
    np.testing.assert_allclose(project_coefficients(resid, basis), 0, atol=1e-12)
    with pytest.raises(ValueError):
        project_coefficients(np.ones(17), basis)


def test_mesh_weights():
    mesh = build_structured_mesh(3, 2, 2, 1.5, 1, 0.8)
    cw, fw = cell_weights(mesh, 3), face_weights(mesh)
    assert len(cw) == 3 * mesh.n_cells and len(fw) == 3 * mesh.n_faces
    np.testing.assert_array_equal(cw.values[: mesh.n_cells], mesh.cell_volumes)
    np.testing.assert_array_equal(fw.values[mesh.n_faces: 2 * mesh.n_faces],
                                  mesh.face_area_magnitudes)
    with pytest.raises(ValueError):
        InnerProductWeights(np.array([1.0, 0.0]))


def test_save_load(tmp_path, rng):
    w = random_weights(rng, 10)
    basis = compute_pod(rng.standard_normal((10, 4)), w, 3, kind="cell-scalar")
    save_basis(SnapshotSet(tmp_path), "chi", basis)
    back = load_basis(SnapshotSet(tmp_path), "chi")
    assert back.modes.tobytes() == basis.modes.tobytes()
    assert back.eigenvalues.tobytes() == basis.eigenvalues.tobytes()
    assert back.kind == "cell-scalar"
