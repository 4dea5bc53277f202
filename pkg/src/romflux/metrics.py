"""Relative errors, kinetic energy and enstrophy of FOM/ROM field series.

Errors integrate the absolute pointwise difference,
``sum_k w_k |F_k - R_k| / sum_k w_k |F_k|``, so signed errors cannot
cancel.  A vanishing denominator marks the point as undefined (masked)
instead of producing NaN.
"""

from __future__ import annotations

import numpy as np

from .mesh import StructuredMesh
from .operators import cell_velocity_gradient

__all__ = [
    "relative_error_time",
    "relative_error_global",
    "relative_error_modes",
    "energy_enstrophy",
    "energy_enstrophy_series",
    "vorticity",
]


def _pair(fom, rom, weights):
    f = np.asarray(fom, dtype=float)
    r = np.asarray(rom, dtype=float)
    if f.ndim == 1:
        f = f[:, None]
    if r.ndim == 1:
        r = r[:, None]
    if f.shape != r.shape:
        raise ValueError(f"FOM series {f.shape} and ROM series {r.shape} are not aligned")
    w = np.asarray(weights, dtype=float)
    if w.shape != (f.shape[0],):
        raise ValueError(f"weights have length {w.shape[0]}, fields have {f.shape[0]} dofs")
    return f, r, w


def relative_error_time(fom, rom, weights) -> np.ma.MaskedArray:
    """Relative error at every time level (columns of the dof x n_t inputs)."""
    f, r, w = _pair(fom, rom, weights)
    num = w @ np.abs(f - r)
    den = w @ np.abs(f)
    undefined = den == 0.0
    out = np.divide(num, den, out=np.zeros_like(num), where=~undefined)
    return np.ma.MaskedArray(out, mask=undefined)


def relative_error_global(fom, rom, weights):
    """Space-time integrated relative error; ``None`` if the FOM series is zero."""
    f, r, w = _pair(fom, rom, weights)
    den = float(np.sum(w @ np.abs(f)))
    if den == 0.0:
        return None
    return float(np.sum(w @ np.abs(f - r))) / den


def relative_error_modes(fom, rom_runs: dict, weights) -> dict:
    """Global relative error for each mode count ``{n_modes: rom_series}``."""
    return {n: relative_error_global(fom, rom_runs[n], weights) for n in sorted(rom_runs)}


def vorticity(mesh: StructuredMesh, u_f, gauss=None) -> np.ndarray:
    """Cell vorticity ``curl u`` (h, 3) from the Gauss face-sum gradient."""
    g = cell_velocity_gradient(mesh, u_f, gauss)  # [k, c, j] = du_c/dx_j
    return np.stack([g[:, 2, 1] - g[:, 1, 2],
                     g[:, 0, 2] - g[:, 2, 0],
                     g[:, 1, 0] - g[:, 0, 1]], axis=1)


def energy_enstrophy(u_p, mesh: StructuredMesh, u_f=None, ops=None):
    """``(1/2 sum |u|^2 V, 1/2 sum |omega|^2 V)`` for a blocked cell velocity.

    The vorticity uses face velocities ``u_f``; when omitted they are
    ``ops.interpolate(u_p)`` (interior interpolation plus boundary values).
    """
    u_p = np.asarray(u_p, dtype=float)
    vol = mesh.cell_volumes
    energy = 0.5 * float(np.sum(u_p.reshape(3, -1) ** 2 * vol))
    if u_f is None:
        if ops is None:
            raise ValueError("either u_f or ops is needed for the vorticity")
        u_f = ops.interpolate(u_p)
    w = vorticity(mesh, u_f, ops.gauss if ops is not None else None)
    enstrophy = 0.5 * float(np.sum(np.sum(w * w, axis=1) * vol))
    return energy, enstrophy


def energy_enstrophy_series(u_series, mesh: StructuredMesh, ops):
    """Energy and enstrophy of every column of a (3h x n_t) velocity series."""
    gauss = ops.gauss
    u_series = np.asarray(u_series, dtype=float)
    vol = mesh.cell_volumes
    energy = np.empty(u_series.shape[1])
    enstrophy = np.empty(u_series.shape[1])
    for j in range(u_series.shape[1]):
        u = u_series[:, j]
        energy[j] = 0.5 * float(np.sum(u.reshape(3, -1) ** 2 * vol))
        w = vorticity(mesh, ops.interpolate(u), gauss)
        enstrophy[j] = 0.5 * float(np.sum(np.sum(w * w, axis=1) * vol))
    return energy, enstrophy
