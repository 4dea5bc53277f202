"""Sparse finite-volume operators on a :class:`~romflux.mesh.StructuredMesh`.

Layout conventions (``h`` cells, ``m`` faces):

* cell scalars have length ``h``; cell vectors are component-blocked with
  length ``3h`` (all x, then all y, then all z);
* face scalars have length ``m``; face vectors are component-blocked with
  length ``3m``; boundary rows of a face vector hold the prescribed
  boundary values ``u_b``.

Rows that produce per-cell rates (``G_p``, ``D_p``, ``C_p`` and the boundary
vectors ``r_C``, ``r_D``) are divided by the cell volume.  The divergence
``M`` and everything built from it (``M_p``, ``L_p``, ``L_f``) return net
volumetric fluxes and are not.

Matrix names follow the usual projection-method notation:

=========  ==========  ==================================================
name       shape       meaning
=========  ==========  ==================================================
M          h x 3m      face flux divergence  sum_f S_f . u_f
I_pf       3m x 3h     cell -> face linear interpolation (boundary rows 0)
Pi_pf      m x h       cell -> face pressure interpolation (zero gradient)
M_p        h x 3h      M @ I_pf
G_p        3h x h      Gauss pressure gradient per unit volume
G_f        3m x h      face-normal two-point pressure gradient
L_p        h x h       M_p @ G_p (wide stencil)
L_f        h x h       compact 7-point Laplacian, pure Neumann
D_p        3h x 3h     (variable-viscosity) diffusion per unit volume
C_p        3h x 3h     convection C_p(u_f) acting on u_p per unit volume
=========  ==========  ==================================================
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .mesh import BoundaryPatchSet, StructuredMesh

__all__ = [
    "as_face_array",
    "as_cell_array",
    "blocked",
    "unblocked",
    "assemble_divergence",
    "boundary_divergence",
    "assemble_interpolation",
    "assemble_gauss_gradient",
    "assemble_gradient_Gp",
    "assemble_gradient_Gf",
    "assemble_laplacian",
    "assemble_convection",
    "assemble_ppe_operators",
    "face_viscosity",
    "cell_velocity_gradient",
    "FvOperators",
    "build_operators",
]


def _csr(a) -> sp.csr_matrix:
    a = sp.csr_matrix(a)
    a.sum_duplicates()
    a.eliminate_zeros()
    a.sort_indices()
    return a


def blocked(a: np.ndarray) -> np.ndarray:
    """(n, 3) array -> component-blocked vector of length 3n."""
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        return a
    return a.T.reshape(-1).copy()


def unblocked(v: np.ndarray) -> np.ndarray:
    """Component-blocked vector of length 3n -> (n, 3) array."""
    v = np.asarray(v, dtype=float)
    return v.reshape(3, -1).T.copy()


def _as_vec3(a, n, what):
    a = getattr(a, "values", a)
    a = np.asarray(a, dtype=float)
    if a.shape == (n, 3):
        return a
    if a.shape == (3 * n,):
        return unblocked(a)
    raise ValueError(f"{what} must have shape ({n}, 3) or ({3 * n},), got {a.shape}")


def as_face_array(u, mesh: StructuredMesh) -> np.ndarray:
    return _as_vec3(u, mesh.n_faces, "face vector field")


def as_cell_array(u, mesh: StructuredMesh) -> np.ndarray:
    return _as_vec3(u, mesh.n_cells, "cell vector field")


def _incidence(mesh: StructuredMesh) -> sp.csr_matrix:
    """Signed cell/face incidence (h x m): +1 for owner, -1 for neighbor."""
    m, ni = mesh.n_faces, mesh.n_interior
    rows = np.concatenate([mesh.face_owner, mesh.face_neighbor])
    cols = np.concatenate([np.arange(m), np.arange(ni)])
    vals = np.concatenate([np.ones(m), -np.ones(ni)])
    return _csr(sp.coo_matrix((vals, (rows, cols)), shape=(mesh.n_cells, m)))


def _inv_volume(mesh):
    return sp.diags(1.0 / mesh.cell_volumes)


def assemble_divergence(mesh: StructuredMesh) -> sp.csr_matrix:
    """Face-to-cell divergence ``M`` (h x 3m): net outflux ``sum S_f . u_f``."""
    inc = _incidence(mesh)
    blocks = [inc @ sp.diags(mesh.face_areas[:, c]) for c in range(3)]
    return _csr(sp.hstack(blocks))


def boundary_divergence(mesh: StructuredMesh, u_b) -> np.ndarray:
    """``r_M = M u_b``: boundary contribution to the continuity equation."""
    u_b = as_face_array(u_b, mesh).copy()
    u_b[: mesh.n_interior] = 0.0
    return assemble_divergence(mesh) @ blocked(u_b)


def _scalar_interpolation(mesh: StructuredMesh, boundary_copy: bool) -> sp.csr_matrix:
    ni, m = mesh.n_interior, mesh.n_faces
    rows = [np.arange(ni), np.arange(ni)]
    cols = [mesh.face_owner[:ni], mesh.face_neighbor]
    vals = [np.full(ni, 0.5), np.full(ni, 0.5)]
    if boundary_copy:
        rows.append(np.arange(ni, m))
        cols.append(mesh.boundary_owner)
        vals.append(np.ones(m - ni))
    return _csr(sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(m, mesh.n_cells)))


def assemble_interpolation(mesh: StructuredMesh):
    """Return ``(I_pf, Pi_pf, M_p)``.

    ``I_pf`` interpolates cell vectors to faces with weight 1/2 on interior
    faces and leaves boundary rows empty (boundary values come from ``u_b``).
    ``Pi_pf`` interpolates cell scalars and copies the owner value onto
    boundary faces, which is the zero-gradient pressure condition.
    """
    i_s = _scalar_interpolation(mesh, boundary_copy=False)
    i_pf = _csr(sp.kron(sp.identity(3), i_s))
    pi_pf = _scalar_interpolation(mesh, boundary_copy=True)
    m_p = _csr(assemble_divergence(mesh) @ i_pf)
    return i_pf, pi_pf, m_p


def assemble_gauss_gradient(mesh: StructuredMesh) -> sp.csr_matrix:
    """Gauss gradient of a face scalar (3h x m), divided by cell volume."""
    inc = _inv_volume(mesh) @ _incidence(mesh)
    return _csr(sp.vstack([inc @ sp.diags(mesh.face_areas[:, c]) for c in range(3)]))


def assemble_gradient_Gp(mesh: StructuredMesh) -> sp.csr_matrix:
    """Cell pressure gradient ``G_p`` (3h x h) from interpolated face pressure."""
    _, pi_pf, _ = assemble_interpolation(mesh)
    return _csr(assemble_gauss_gradient(mesh) @ pi_pf)


def _face_difference(mesh: StructuredMesh) -> sp.csr_matrix:
    """(p_N - p_P) / |d| on interior faces, zero on boundary faces (m x h)."""
    ni = mesh.n_interior
    inv_d = 1.0 / mesh.d_magnitudes
    rows = np.concatenate([np.arange(ni), np.arange(ni)])
    cols = np.concatenate([mesh.face_owner[:ni], mesh.face_neighbor])
    vals = np.concatenate([-inv_d, inv_d])
    return _csr(sp.coo_matrix((vals, (rows, cols)), shape=(mesh.n_faces, mesh.n_cells)))


def assemble_gradient_Gf(mesh: StructuredMesh) -> sp.csr_matrix:
    """Face pressure gradient ``G_f`` (3m x h).

    Row ``(c, f)`` of an interior face holds ``n_f[c] (p_N - p_P)/|d|`` with
    ``n_f`` the unit normal, so ``M @ G_f`` is the compact Laplacian.
    """
    normals = mesh.face_areas / mesh.face_area_magnitudes[:, None]
    diff = _face_difference(mesh)
    return _csr(sp.vstack([sp.diags(normals[:, c]) @ diff for c in range(3)]))


def _check_face_scalar(mesh, nu_face, name="nu_face", signed=False):
    nu_face = np.asarray(nu_face, dtype=float)
    if nu_face.ndim == 0:
        nu_face = np.full(mesh.n_faces, float(nu_face))
    if nu_face.shape != (mesh.n_faces,):
        raise ValueError(f"{name} must have length {mesh.n_faces}")
    if not np.all(np.isfinite(nu_face)):
        raise ValueError(f"{name} must be finite")
    if not signed and np.any(nu_face < 0):
        raise ValueError(f"{name} must be non-negative")
    return nu_face


def _scalar_laplacian(mesh: StructuredMesh, nu_face: np.ndarray):
    ni = mesh.n_interior
    own, nei = mesh.face_owner[:ni], mesh.face_neighbor
    w = nu_face[:ni] * mesh.face_area_magnitudes[:ni] / mesh.d_magnitudes
    wb = nu_face[ni:] * mesh.face_area_magnitudes[ni:] / mesh.boundary_dn
    b_own = mesh.boundary_owner
    rows = np.concatenate([own, own, nei, nei, b_own])
    cols = np.concatenate([own, nei, nei, own, b_own])
    vals = np.concatenate([-w, w, -w, w, -wb])
    inv_v = 1.0 / mesh.cell_volumes
    vals = vals * inv_v[rows]
    lap = sp.coo_matrix((vals, (rows, cols)), shape=(mesh.n_cells, mesh.n_cells))
    bnd = sp.coo_matrix((wb * inv_v[b_own], (b_own, np.arange(ni, mesh.n_faces))),
                        shape=(mesh.n_cells, mesh.n_faces))
    return _csr(lap), _csr(bnd)


def assemble_laplacian(mesh: StructuredMesh, nu_face=1.0, u_b=None, signed=False):
    """Diffusion operator ``D_p`` (3h x 3h) and boundary vector ``r_D`` (3h).

    Interior faces contribute ``nu_f |S_f| (u_N - u_P)/|d|``; a boundary face
    contributes ``nu_b |S_b| (0 - u_P)/d_n`` to ``D_p`` and
    ``nu_b |S_b| u_b / d_n`` to ``r_D``.  Everything is divided by the cell
    volume.  ``nu_face`` defaults to 1, in which case the molecular viscosity
    is applied as an outside multiplier.  ``signed=True`` accepts negative
    coefficients, which occur when the viscosity is a POD mode rather than a
    physical field.
    """
    nu_face = _check_face_scalar(mesh, nu_face, signed=signed)
    lap, bnd = _scalar_laplacian(mesh, nu_face)
    d_p = _csr(sp.kron(sp.identity(3), lap))
    if u_b is None:
        r_d = np.zeros(3 * mesh.n_cells)
    else:
        r_d = _csr(sp.kron(sp.identity(3), bnd)) @ blocked(as_face_array(u_b, mesh))
    return d_p, r_d


def face_viscosity(mesh: StructuredMesh, nu_cell, nu_molecular=0.0, wall_value=0.0):
    """Face viscosity ``nu_molecular + interp(nu_cell)`` with a fixed wall value.

    Interior faces use the arithmetic mean of owner and neighbor; boundary
    faces take ``wall_value`` (zero eddy viscosity at walls).
    """
    nu_cell = np.asarray(nu_cell, dtype=float)
    ni = mesh.n_interior
    out = np.empty(mesh.n_faces)
    out[:ni] = 0.5 * (nu_cell[mesh.face_owner[:ni]] + nu_cell[mesh.face_neighbor])
    out[ni:] = wall_value
    return out + nu_molecular


def face_fluxes(mesh: StructuredMesh, u_f) -> np.ndarray:
    """Volumetric flux ``phi_f = S_f . u_f`` per face."""
    return np.einsum("fc,fc->f", mesh.face_areas, as_face_array(u_f, mesh))


def _scalar_convection(mesh: StructuredMesh, phi: np.ndarray) -> sp.csr_matrix:
    ni = mesh.n_interior
    own, nei = mesh.face_owner[:ni], mesh.face_neighbor
    half = 0.5 * phi[:ni]
    rows = np.concatenate([own, own, nei, nei])
    cols = np.concatenate([own, nei, own, nei])
    vals = np.concatenate([half, half, -half, -half])
    vals = vals / mesh.cell_volumes[rows]
    return _csr(sp.coo_matrix((vals, (rows, cols)), shape=(mesh.n_cells, mesh.n_cells)))


def assemble_convection(mesh: StructuredMesh, u_f, u_b=None):
    """Convection operator ``C_p(u_f)`` (3h x 3h) and boundary vector ``r_C``.

    Interior fluxes ``phi_f = S_f . u_f`` transport the centrally
    interpolated cell velocity, so ``C_p(u_f) u_p = sum phi_f u_f / V``.
    Boundary faces contribute ``(S_b . u_b) u_b / V`` to ``r_C``; when
    ``u_b`` is omitted the boundary rows of ``u_f`` are used.
    """
    u_f = as_face_array(u_f, mesh)
    if not np.all(np.isfinite(u_f)):
        raise ValueError("u_f has non-finite entries")
    phi = face_fluxes(mesh, u_f)
    c_p = _csr(sp.kron(sp.identity(3), _scalar_convection(mesh, phi)))
    ub = u_f if u_b is None else as_face_array(u_b, mesh)
    ni = mesh.n_interior
    ub_bnd = ub[ni:]
    phi_b = np.einsum("fc,fc->f", mesh.face_areas[ni:], ub_bnd)
    r_c = np.zeros((mesh.n_cells, 3))
    contrib = (phi_b / mesh.cell_volumes[mesh.boundary_owner])[:, None] * ub_bnd
    np.add.at(r_c, mesh.boundary_owner, contrib)
    return c_p, blocked(r_c)


def assemble_ppe_operators(mesh: StructuredMesh):
    """Return ``(L_p, L_f)``.

    ``L_p = M_p G_p`` is the wide-stencil Laplacian of the inconsistent flux
    method and has the checkerboard field in its interior null space.
    ``L_f`` is the compact 7-point Laplacian with weights ``|S_f|/|d|``
    and zero-gradient boundaries; it equals ``M @ G_f``.
    """
    _, _, m_p = assemble_interpolation(mesh)
    l_p = _csr(m_p @ assemble_gradient_Gp(mesh))
    ni = mesh.n_interior
    own, nei = mesh.face_owner[:ni], mesh.face_neighbor
    w = mesh.face_area_magnitudes[:ni] / mesh.d_magnitudes
    rows = np.concatenate([own, own, nei, nei])
    cols = np.concatenate([own, nei, nei, own])
    vals = np.concatenate([-w, w, -w, w])
    l_f = _csr(sp.coo_matrix((vals, (rows, cols)), shape=(mesh.n_cells, mesh.n_cells)))
    return l_p, l_f


def cell_velocity_gradient(mesh: StructuredMesh, u_f, gauss=None) -> np.ndarray:
    """Gauss gradient of a face velocity field, shape (h, 3, 3).

    Entry ``[k, c, j]`` is ``d u_c / d x_j`` in cell ``k``.
    """
    if gauss is None:
        gauss = assemble_gauss_gradient(mesh)
    u_f = as_face_array(u_f, mesh)
    h = mesh.n_cells
    grad = gauss @ u_f  # (3h, 3): row j*h + k, column c
    return grad.reshape(3, h, 3).transpose(1, 2, 0)


@dataclass(eq=False)
class FvOperators:
    """Every fixed operator of a mesh/boundary pair, assembled once."""

    mesh: StructuredMesh
    patches: BoundaryPatchSet
    M: sp.csr_matrix = field(repr=False)
    I_pf: sp.csr_matrix = field(repr=False)
    Pi_pf: sp.csr_matrix = field(repr=False)
    M_p: sp.csr_matrix = field(repr=False)
    gauss: sp.csr_matrix = field(repr=False)
    G_p: sp.csr_matrix = field(repr=False)
    G_f: sp.csr_matrix = field(repr=False)
    L_p: sp.csr_matrix = field(repr=False)
    L_f: sp.csr_matrix = field(repr=False)
    D_p: sp.csr_matrix = field(repr=False)
    u_b: np.ndarray = field(repr=False)
    r_M: np.ndarray = field(repr=False)
    r_C: np.ndarray = field(repr=False)
    r_D: np.ndarray = field(repr=False)

    @property
    def volumes(self) -> np.ndarray:
        return self.mesh.cell_volumes

    def laplacian(self, nu_face, with_boundary=True, signed=False):
        return assemble_laplacian(self.mesh, nu_face, self.u_b if with_boundary else None,
                                  signed=signed)

    def convection(self, u_f) -> sp.csr_matrix:
        phi = face_fluxes(self.mesh, u_f)
        return _csr(sp.kron(sp.identity(3), _scalar_convection(self.mesh, phi)))

    def interpolate(self, u_p) -> np.ndarray:
        """Face velocity ``I_pf u_p + u_b`` (blocked)."""
        return self.I_pf @ u_p + self.u_b

    def boundary_vector(self, nu: float) -> np.ndarray:
        """Combined laminar boundary vector ``r_p = -r_C + nu r_D``."""
        return -self.r_C + nu * self.r_D


def build_operators(mesh: StructuredMesh, patches: BoundaryPatchSet) -> FvOperators:
    u_b = patches.boundary_velocity(mesh)
    i_pf, pi_pf, m_p = assemble_interpolation(mesh)
    gauss = assemble_gauss_gradient(mesh)
    l_p, l_f = assemble_ppe_operators(mesh)
    d_p, r_d = assemble_laplacian(mesh, 1.0, u_b)
    _, r_c = assemble_convection(mesh, u_b, u_b)
    return FvOperators(
        mesh=mesh,
        patches=patches,
        M=assemble_divergence(mesh),
        I_pf=i_pf,
        Pi_pf=pi_pf,
        M_p=m_p,
        gauss=gauss,
        G_p=_csr(gauss @ pi_pf),
        G_f=assemble_gradient_Gf(mesh),
        L_p=l_p,
        L_f=l_f,
        D_p=d_p,
        u_b=blocked(u_b),
        r_M=boundary_divergence(mesh, u_b),
        r_C=r_c,
        r_D=r_d,
    )
