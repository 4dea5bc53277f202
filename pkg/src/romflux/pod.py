"""Method-of-snapshots POD in volume- or area-weighted inner products."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields_io import SnapshotSet, read_array, read_meta, write_array
from .mesh import StructuredMesh

__all__ = [
    "InnerProductWeights",
    "PodBasis",
    "RankError",
    "cell_weights",
    "face_weights",
    "correlation_matrix",
    "symmetric_eig",
    "build_modes",
    "compute_pod",
    "project_coefficients",
    "projection_error",
    "save_basis",
    "load_basis",
]

RANK_FLOOR = 1e-13


class RankError(ValueError):
    """Requested more modes than the snapshot set supports."""


@dataclass(frozen=True, eq=False)
class InnerProductWeights:
    """Diagonal weight of a discrete L2 inner product."""

    values: np.ndarray
    kind: str = "cell"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1 or not np.all(values > 0):
            raise ValueError("inner-product weights must be a strictly positive vector")
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.shape[0]

    def inner(self, x, y):
        return (x * self.values[:, None] if x.ndim == 2 else x * self.values).T @ y


def cell_weights(mesh: StructuredMesh, components: int = 1) -> InnerProductWeights:
    """Cell volumes repeated per component (blocked layout)."""
    return InnerProductWeights(np.tile(mesh.cell_volumes, components), "cell")


def face_weights(mesh: StructuredMesh, components: int = 3) -> InnerProductWeights:
    """Face-area magnitudes repeated per component (blocked layout)."""
    return InnerProductWeights(np.tile(mesh.face_area_magnitudes, components), "face")


def _weights(weights, n):
    w = weights.values if isinstance(weights, InnerProductWeights) else np.asarray(weights, float)
    if w.shape != (n,):
        raise ValueError(f"weights have length {w.shape[0]}, snapshots have {n} dofs")
    return w


def correlation_matrix(snapshots, weights) -> np.ndarray:
    """``C_ij = sum_k s_ik s_jk w_k`` for snapshot columns ``s_i``."""
    s = np.asarray(snapshots, dtype=float)
    if s.ndim != 2 or s.shape[1] < 1:
        raise ValueError("snapshots must be a (dof, n_snapshots) matrix with >= 1 column")
    w = _weights(weights, s.shape[0])
    c = s.T @ (w[:, None] * s)
    return 0.5 * (c + c.T)


def _round_robin(n):
    """Pairings of ``range(n)`` (n even) covering every pair once per sweep."""
    order = list(range(n))
    rounds = []
    for _ in range(n - 1):
        rounds.append((np.array(order[: n // 2]), np.array(order[n // 2:][::-1])))
        order = [order[0], order[-1]] + order[1:-1]
    return rounds


def symmetric_eig(C, tol=1e-14, max_sweeps=60):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Rotations are applied in round-robin order, ``n/2`` disjoint pairs at a
    time.  Returns ``(Q, lam)`` with eigenvalues sorted in descending order
    and ``C Q = Q diag(lam)``.

    Raises
    ------
    RuntimeError
        If the off-diagonal mass does not fall below ``tol * ||C||_F``
        within ``max_sweeps`` sweeps.
    """
    a = np.array(C, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("C must be square")
    if not np.allclose(a, a.T, rtol=1e-12, atol=1e-12 * max(np.abs(a).max(), 1e-300)):
        raise ValueError("C must be symmetric")
    n0 = a.shape[0]
    n = n0 + (n0 % 2)
    if n != n0:
        a = np.pad(a, ((0, 1), (0, 1)))
    v = np.eye(n)
    norm = np.linalg.norm(a)
    rounds = _round_robin(n) if n > 1 else []
    for _ in range(max_sweeps):
        off = np.linalg.norm(a - np.diag(np.diag(a)))
        if off <= tol * norm:
            break
        for p, q in rounds:
            apq = a[p, q]
            app = a[p, p]
            aqq = a[q, q]
            active = np.abs(apq) > 1e-300 + 1e-18 * norm
            safe = np.where(active, apq, 1.0)
            tau = (aqq - app) / (2.0 * safe)
            t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.hypot(1.0, tau))
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            ap, aq = a[:, p].copy(), a[:, q].copy()
            a[:, p] = c * ap - s * aq
            a[:, q] = s * ap + c * aq
            ap, aq = a[p, :].copy(), a[q, :].copy()
            a[p, :] = c[:, None] * ap - s[:, None] * aq
            a[q, :] = s[:, None] * ap + c[:, None] * aq
            a[p, q] = 0.0
            a[q, p] = 0.0
            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
    else:
        raise RuntimeError(f"Jacobi iteration did not converge in {max_sweeps} sweeps")
    lam = np.diag(a).copy()
    if n != n0:
        # the padding index stays decoupled: drop its eigenpair
        pad = int(np.argmax(np.abs(v[n0, :])))
        keep = np.array([j for j in range(n) if j != pad])
        lam, v = lam[keep], v[:n0, keep]
    order = np.argsort(-lam, kind="stable")
    return v[:, order], lam[order]


@dataclass(frozen=True, eq=False)
class PodBasis:
    """Weighted-orthonormal modes (columns) and the full eigenvalue spectrum."""

    modes: np.ndarray
    eigenvalues: np.ndarray
    weights: InnerProductWeights
    kind: str = "cell-vector"

    @property
    def n_modes(self) -> int:
        return self.modes.shape[1]

    @property
    def dof(self) -> int:
        return self.modes.shape[0]

    def truncate(self, n: int) -> "PodBasis":
        if not 1 <= n <= self.n_modes:
            raise RankError(f"cannot truncate a {self.n_modes}-mode basis to {n}")
        return PodBasis(self.modes[:, :n].copy(), self.eigenvalues, self.weights, self.kind)

    def gram(self) -> np.ndarray:
        return self.weights.inner(self.modes, self.modes)


def _mgs(modes, w):
    """Modified Gram-Schmidt in the ``w``-weighted inner product (two passes)."""
    q = modes.copy()
    n = q.shape[1]
    for _ in range(2):
        for i in range(n):
            for j in range(i):
                q[:, i] -= (q[:, j] * w) @ q[:, i] * q[:, j]
            norm = np.sqrt((q[:, i] * w) @ q[:, i])
            if norm == 0.0:
                raise RankError(f"mode {i} vanished during orthonormalisation")
            q[:, i] /= norm
    return q


def _fix_signs(modes):
    idx = np.argmax(np.abs(modes), axis=0)
    signs = np.sign(modes[idx, np.arange(modes.shape[1])])
    signs[signs == 0] = 1.0
    return modes * signs


def build_modes(snapshots, Q, lam, n_modes, weights, kind="cell-vector") -> PodBasis:
    """Assemble ``n_modes`` POD modes ``sum_n s_n Q_ni / sqrt(lam_i)``.

    The modes are re-orthonormalised by modified Gram-Schmidt in the
    weighted inner product and each is signed so that its largest-magnitude
    entry is positive.

    Raises
    ------
    RankError
        If a requested eigenvalue is below ``1e-13 * lam[0]``.
    """
    s = np.asarray(snapshots, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if not isinstance(weights, InnerProductWeights):
        weights = InnerProductWeights(weights)
    w = _weights(weights, s.shape[0])
    if not 1 <= n_modes <= lam.shape[0]:
        raise RankError(f"n_modes={n_modes} outside [1, {lam.shape[0]}]")
    floor = RANK_FLOOR * lam[0]
    if lam[0] <= 0 or lam[n_modes - 1] <= floor:
        rank = int(np.sum(lam > floor)) if lam[0] > 0 else 0
        raise RankError(f"requested {n_modes} modes but the snapshot set has numerical rank {rank}")
    modes = s @ (Q[:, :n_modes] / np.sqrt(lam[:n_modes]))
    modes = _fix_signs(_mgs(modes, w))
    return PodBasis(modes, np.clip(lam, 0.0, None), weights, kind)


def compute_pod(snapshots, weights, n_modes, kind="cell-vector") -> PodBasis:
    """Correlation matrix, Jacobi eigenpairs and mode assembly in one call."""
    c = correlation_matrix(snapshots, weights)
    q, lam = symmetric_eig(c)
    return build_modes(snapshots, q, lam, n_modes, weights, kind)


def project_coefficients(field, basis: PodBasis) -> np.ndarray:
    """Weighted projection coefficients ``modes^T W field`` (vector or matrix)."""
    f = np.asarray(field, dtype=float)
    if f.shape[0] != basis.dof:
        raise ValueError(f"field has {f.shape[0]} dofs, basis has {basis.dof}")
    return basis.weights.inner(basis.modes, f)


def projection_error(snapshots, basis: PodBasis) -> float:
    """Relative squared projection error over a snapshot set."""
    s = np.asarray(snapshots, dtype=float)
    resid = s - basis.modes @ project_coefficients(s, basis)
    w = basis.weights.values
    return float(np.sum(w[:, None] * resid * resid) / np.sum(w[:, None] * s * s))


def save_basis(sset: SnapshotSet, name: str, basis: PodBasis) -> None:
    write_array(sset, f"{name}.modes", basis.modes,
                meta={"field_kind": basis.kind, "weight_kind": basis.weights.kind,
                      "eigenvalues": basis.eigenvalues.tolist()})
    write_array(sset, f"{name}.weights", basis.weights.values)


def load_basis(sset: SnapshotSet, name: str) -> PodBasis:
    meta = read_meta(sset, f"{name}.modes")
    weights = InnerProductWeights(read_array(sset, f"{name}.weights"), meta["weight_kind"])
    return PodBasis(read_array(sset, f"{name}.modes"), np.array(meta["eigenvalues"]),
                    weights, meta["field_kind"])
