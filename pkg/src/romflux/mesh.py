"""Uniform structured hexahedral mesh of a box-shaped cavity.

Cells are indexed flat with x fastest, ``k = i + nx*j + nx*ny*kz``.  Faces
are stored interior first (x-normal, then y-normal, then z-normal faces, each
ordered by owner cell index) followed by boundary faces grouped by side
(x-min, x-max, y-min, y-max, z-min, z-max), again ordered by owner index.
Interior area vectors point from owner (lower index) to neighbor, boundary
area vectors point out of the domain.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SIDE_NAMES",
    "StructuredMesh",
    "BoundaryPatch",
    "BoundaryPatchSet",
    "build_structured_mesh",
    "classify_boundary",
]

SIDE_NAMES = ("xmin", "xmax", "ymin", "ymax", "zmin", "zmax")


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class StructuredMesh:
    """Geometry and topology of a uniform hexahedral grid.

    Attributes
    ----------
    nx, ny, nz : int
        Cell counts per axis.
    lx, ly, lz : float
        Edge lengths of the box (m).
    cell_centers : ndarray, shape (h, 3)
    cell_volumes : ndarray, shape (h,)
    face_areas : ndarray, shape (m, 3)
        Area vectors of all faces, interior first.
    face_centers : ndarray, shape (m, 3)
    face_owner : ndarray, shape (m,)
        Owner cell of every face.
    face_neighbor : ndarray, shape (n_interior,)
        Neighbor cell of every interior face.
    d_vectors : ndarray, shape (n_interior, 3)
        Owner-to-neighbor center vector of every interior face.
    boundary_dn : ndarray, shape (n_boundary,)
        Distance from the owner center to the boundary face.
    boundary_side : ndarray, shape (n_boundary,)
        Index into :data:`SIDE_NAMES` for every boundary face.
    """

    nx: int
    ny: int
    nz: int
    lx: float
    ly: float
    lz: float
    cell_centers: np.ndarray = field(repr=False)
    cell_volumes: np.ndarray = field(repr=False)
    face_areas: np.ndarray = field(repr=False)
    face_centers: np.ndarray = field(repr=False)
    face_owner: np.ndarray = field(repr=False)
    face_neighbor: np.ndarray = field(repr=False)
    d_vectors: np.ndarray = field(repr=False)
    boundary_dn: np.ndarray = field(repr=False)
    boundary_side: np.ndarray = field(repr=False)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def n_faces(self) -> int:
        return self.face_areas.shape[0]

    @property
    def n_interior(self) -> int:
        return self.face_neighbor.shape[0]

    @property
    def n_boundary(self) -> int:
        return self.n_faces - self.n_interior

    @property
    def spacing(self) -> tuple[float, float, float]:
        return (self.lx / self.nx, self.ly / self.ny, self.lz / self.nz)

    @property
    def boundary_slice(self) -> slice:
        return slice(self.n_interior, self.n_faces)

    @property
    def boundary_owner(self) -> np.ndarray:
        return self.face_owner[self.n_interior:]

    @property
    def face_area_magnitudes(self) -> np.ndarray:
        return np.linalg.norm(self.face_areas, axis=1)

    @property
    def d_magnitudes(self) -> np.ndarray:
        return np.linalg.norm(self.d_vectors, axis=1)

    def cell_index(self, i, j, k):
        return i + self.nx * (j + self.ny * k)

    def cell_ijk(self):
        """Integer (i, j, k) triples of every cell, shape (h, 3)."""
        h = np.arange(self.n_cells)
        i = h % self.nx
        j = (h // self.nx) % self.ny
        k = h // (self.nx * self.ny)
        return np.stack([i, j, k], axis=1)

    def boundary_cells(self) -> np.ndarray:
        """Boolean mask of cells touching at least one boundary face."""
        mask = np.zeros(self.n_cells, dtype=bool)
        mask[self.boundary_owner] = True
        return mask


def build_structured_mesh(nx, ny, nz, lx=1.0, ly=1.0, lz=1.0) -> StructuredMesh:
    """Build a uniform ``nx x ny x nz`` mesh of the box ``[0,lx]x[0,ly]x[0,lz]``.

    Raises
    ------
    ValueError
        If any count is below 2 or any length is not strictly positive.
    """
    counts = {"nx": nx, "ny": ny, "nz": nz}
    for name, n in counts.items():
        if int(n) != n or n < 2:
            raise ValueError(f"{name} must be an integer >= 2, got {n!r}")
    lengths = {"lx": lx, "ly": ly, "lz": lz}
    for name, length in lengths.items():
        if not np.isfinite(length) or length <= 0:
            raise ValueError(f"{name} must be a positive length, got {length!r}")
    nx, ny, nz = int(nx), int(ny), int(nz)
    lx, ly, lz = float(lx), float(ly), float(lz)

    n = np.array([nx, ny, nz])
    spacing = np.array([lx / nx, ly / ny, lz / nz])
    areas = np.array([spacing[1] * spacing[2], spacing[0] * spacing[2],
                      spacing[0] * spacing[1]])
    h = nx * ny * nz
    ijk = np.stack(np.unravel_index(np.arange(h), (nz, ny, nx))[::-1], axis=1)
    centers = (ijk + 0.5) * spacing
    volumes = np.full(h, spacing.prod())
    strides = np.array([1, nx, nx * ny])

    owner, neighbor, s_f, c_f, d_vec = [], [], [], [], []
    for axis in range(3):
        own = np.flatnonzero(ijk[:, axis] < n[axis] - 1)
        unit = np.zeros(3)
        unit[axis] = 1.0
        owner.append(own)
        neighbor.append(own + strides[axis])
        s_f.append(np.tile(areas[axis] * unit, (own.size, 1)))
        c_f.append(centers[own] + 0.5 * spacing[axis] * unit)
        d_vec.append(np.tile(spacing[axis] * unit, (own.size, 1)))

    b_owner, b_side, b_dn = [], [], []
    for axis in range(3):
        unit = np.zeros(3)
        unit[axis] = 1.0
        for side, (index, sign) in enumerate(((0, -1.0), (n[axis] - 1, 1.0))):
            own = np.flatnonzero(ijk[:, axis] == index)
            owner.append(own)
            s_f.append(np.tile(sign * areas[axis] * unit, (own.size, 1)))
            c_f.append(centers[own] + sign * 0.5 * spacing[axis] * unit)
            b_owner.append(own)
            b_side.append(np.full(own.size, 2 * axis + side))
            b_dn.append(np.full(own.size, 0.5 * spacing[axis]))

    return StructuredMesh(
        nx=nx, ny=ny, nz=nz, lx=lx, ly=ly, lz=lz,
        cell_centers=_frozen(centers),
        cell_volumes=_frozen(volumes),
        face_areas=_frozen(np.concatenate(s_f)),
        face_centers=_frozen(np.concatenate(c_f)),
        face_owner=_frozen(np.concatenate(owner)),
        face_neighbor=_frozen(np.concatenate(neighbor)),
        d_vectors=_frozen(np.concatenate(d_vec)),
        boundary_dn=_frozen(np.concatenate(b_dn)),
        boundary_side=_frozen(np.concatenate(b_side)),
    )


@dataclass(frozen=True)
class BoundaryPatch:
    patch_id: int
    name: str
    faces: np.ndarray  # global face indices


@dataclass(frozen=True, eq=False)
class BoundaryPatchSet:
    """Partition of the boundary faces into the moving lid and fixed walls."""

    patches: tuple[BoundaryPatch, ...]
    lid_velocity: np.ndarray

    def __getitem__(self, name: str) -> BoundaryPatch:
        for patch in self.patches:
            if patch.name == name:
                return patch
        raise KeyError(name)

    def boundary_velocity(self, mesh: StructuredMesh) -> np.ndarray:
        """Prescribed face velocity ``u_b`` as an (m, 3) array.

        Interior rows are zero, lid faces carry the lid velocity and walls
        are no-slip.
        """
        u_b = np.zeros((mesh.n_faces, 3))
        u_b[self["lid"].faces] = self.lid_velocity
        return u_b


def classify_boundary(mesh: StructuredMesh, lid_velocity=(1.0, 0.0, 0.0)) -> BoundaryPatchSet:
    """Assign the top (+z) boundary to the lid patch and everything else to walls."""
    lid_velocity = np.asarray(lid_velocity, dtype=float)
    if lid_velocity.shape != (3,):
        raise ValueError("lid_velocity must be a 3-vector")
    b_faces = np.arange(mesh.n_interior, mesh.n_faces)
    is_lid = mesh.boundary_side == SIDE_NAMES.index("zmax")
    lid_velocity = lid_velocity.copy()
    lid_velocity.setflags(write=False)
    return BoundaryPatchSet(
        patches=(BoundaryPatch(0, "lid", _frozen(b_faces[is_lid])),
                 BoundaryPatch(1, "walls", _frozen(b_faces[~is_lid]))),
        lid_velocity=lid_velocity,
    )
