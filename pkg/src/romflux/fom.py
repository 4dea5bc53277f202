"""Full-order consistent-flux projection solver with Smagorinsky eddy viscosity.

One explicit Euler step of the consistent flux method reads::

    F       = dt * (-C_p(u_f) u_p + D_p(nu_eff) u_p + r_p(nu_eff))
    L_f p   = (M_p (u_p + F) + r_M) / dt
    u_p'    = u_p + F - dt G_p p
    u_f'    = I_pf (u_p + F) + u_b - dt G_f p

and because ``L_f == M G_f`` the new face velocity is discretely
divergence free up to the Poisson-solver tolerance.
"""

from __future__ import annotations

import logging
import sys
from dataclasses import dataclass

import numpy as np

from .fields_io import (CellScalarField, CellVectorField, FaceVectorField,
                        SnapshotSet, write_snapshot)
from .mesh import BoundaryPatchSet, StructuredMesh
from .operators import (FvOperators, build_operators, cell_velocity_gradient,
                        face_fluxes, face_viscosity)

__all__ = [
    "FomConfig",
    "FomState",
    "PpeConvergenceError",
    "SimulationDiverged",
    "smagorinsky_viscosity",
    "strain_rate_magnitude",
    "solve_ppe",
    "cfm_step",
    "initial_state",
    "relative_divergence",
    "kinetic_energy",
    "run_fom",
]

log = logging.getLogger(__name__)


class PpeConvergenceError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


class SimulationDiverged(RuntimeError):
    pass


@dataclass
class FomConfig:
    """Physical and numerical parameters of a full-order run.

    ``Pr_t`` is kept for completeness; there is no scalar transport, so it
    never enters the equations.
    """

    nu: float = 1e-4
    C_s: float = 0.2
    Pr_t: float = 0.9
    dt: float = 2e-3
    n_steps: int = 600
    snapshot_stride: int = 2
    spinup_steps: int = 0
    ref_cell: int = 0
    p_ref: float = 0.0
    ppe_tol: float = 1e-10
    max_iter: int | None = None
    turbulence: bool = True

    def validate(self, mesh: StructuredMesh, lid_speed: float = 1.0):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not self.C_s > 0:
            raise ValueError(f"C_s must be positive, got {self.C_s}")
        if self.nu < 0:
            raise ValueError(f"nu must be non-negative, got {self.nu}")
        if not 0 <= self.ref_cell < mesh.n_cells:
            raise ValueError(f"ref_cell {self.ref_cell} outside [0, {mesh.n_cells})")
        if self.n_steps < 0 or self.spinup_steps < 0 or self.snapshot_stride < 1:
            raise ValueError("step counts must be non-negative and stride >= 1")
        dx = min(mesh.spacing)
        limits = []
        if lid_speed > 0:
            limits.append(dx / lid_speed)
        if self.nu > 0:
            limits.append(dx * dx / (2 * 3 * self.nu))
        if limits and self.dt > 0.5 * min(limits):
            raise ValueError(
                f"dt={self.dt} exceeds the stability guard 0.5*min(dx/|U|, dx^2/(6 nu))"
                f" = {0.5 * min(limits):.3g}")
        return self


@dataclass
class FomState:
    """Blocked full-order state at one time level.

    ``nu_t`` is always the Smagorinsky viscosity of ``u_p``.
    """

    u_p: np.ndarray
    u_f: np.ndarray
    p_p: np.ndarray
    nu_t: np.ndarray
    time: float = 0.0
    step: int = 0
    divergence: float = 0.0
    ppe_iterations: int = 0

    def fields(self):
        return {
            "u_p": CellVectorField.from_vector(self.u_p),
            "p_p": CellScalarField(self.p_p),
            "u_f": FaceVectorField.from_vector(self.u_f),
            "nu_t": CellScalarField(self.nu_t, non_negative=True),
        }


def strain_rate_magnitude(mesh: StructuredMesh, u_f, gauss=None) -> np.ndarray:
    """``|S| = sqrt(2 S_ij S_ij)`` from the Gauss gradient of face velocities."""
    grad = cell_velocity_gradient(mesh, u_f, gauss)
    s = 0.5 * (grad + grad.transpose(0, 2, 1))
    return np.sqrt(2.0 * np.einsum("kij,kij->k", s, s))


def smagorinsky_viscosity(u_p, mesh: StructuredMesh, C_s=0.2, u_b=None, ops=None) -> np.ndarray:
    """Eddy viscosity ``(C_s Delta)^2 |S|`` per cell, ``Delta = V^(1/3)``.

    The strain rate is computed from face velocities ``I_pf u_p + u_b``.
    """
    if ops is not None:
        u_f = ops.interpolate(u_p)
        gauss = ops.gauss
    else:
        from .operators import assemble_interpolation, blocked
        i_pf, _, _ = assemble_interpolation(mesh)
        u_f = i_pf @ np.asarray(u_p, dtype=float)
        if u_b is not None:
            u_f = u_f + blocked(np.asarray(u_b, dtype=float))
        gauss = None
    delta = np.cbrt(mesh.cell_volumes)
    return (C_s * delta) ** 2 * strain_rate_magnitude(mesh, u_f, gauss)


def solve_ppe(L, rhs, ref_cell=0, p_ref=0.0, tol=1e-10, max_iter=None, x0=None):
    """Solve the pure-Neumann Poisson problem ``L p = rhs`` by Jacobi-PCG.

    The constant component of ``rhs`` is removed first so the singular
    system is consistent.  On return ``||L p - rhs'|| <= tol ||rhs'||`` and
    ``p[ref_cell] == p_ref``.  ``L`` may be negative semi-definite (the
    finite-volume sign); the iteration runs on ``-L``.

    Raises
    ------
    PpeConvergenceError
        When ``max_iter`` iterations do not reach ``tol``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    rhs = np.asarray(rhs, dtype=float)
    n = rhs.shape[0]
    if max_iter is None:
        max_iter = 10 * n
    b = rhs - rhs.mean()
    diag = L.diagonal()
    flip = -1.0 if np.all(diag <= 0) else 1.0
    b = flip * b
    b_norm = np.linalg.norm(b)
    p = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float) - np.mean(x0)
    if b_norm == 0.0:
        return np.full(n, float(p_ref)), 0
    inv_diag = np.where(diag != 0, 1.0 / (flip * diag), 1.0)

    def matvec(x):
        return flip * (L @ x)

    r = b - matvec(p)
    target = tol * b_norm
    res = np.linalg.norm(r)
    it = 0
    if res > target:
        z = inv_diag * r
        d = z.copy()
        rz = r @ z
        while it < max_iter:
            it += 1
            q = matvec(d)
            alpha = rz / (d @ q)
            p += alpha * d
            r -= alpha * q
            if it % 50 == 0:
                r = b - matvec(p)
            res = np.linalg.norm(r)
            if res <= target:
                # guard against drift of the recursive residual
                res = np.linalg.norm(b - matvec(p))
                if res <= target:
                    break
            z = inv_diag * r
            rz_new = r @ z
            d = z + (rz_new / rz) * d
            rz = rz_new
        else:
            raise PpeConvergenceError(
                f"PCG did not converge in {max_iter} iterations "
                f"(relative residual {res / b_norm:.3e} > {tol:.1e})", res / b_norm)
    p += p_ref - p[ref_cell]
    return p, it


def relative_divergence(ops: FvOperators, u_f) -> float:
    """``||M u_f||_inf`` relative to the largest face flux magnitude."""
    div = ops.M @ u_f
    scale = np.abs(face_fluxes(ops.mesh, u_f)).max()
    if scale == 0.0:
        return float(np.abs(div).max())
    return float(np.abs(div).max() / scale)


def kinetic_energy(mesh: StructuredMesh, u_p) -> float:
    u = np.asarray(u_p).reshape(3, -1)
    return float(0.5 * np.sum(u * u * mesh.cell_volumes))


def initial_state(ops: FvOperators, config: FomConfig) -> FomState:
    """Fluid at rest with the lid boundary active."""
    mesh = ops.mesh
    h = mesh.n_cells
    u_p = np.zeros(3 * h)
    nu_t = (smagorinsky_viscosity(u_p, mesh, config.C_s, ops=ops)
            if config.turbulence else np.zeros(h))
    return FomState(u_p=u_p, u_f=ops.interpolate(u_p), p_p=np.full(h, config.p_ref),
                    nu_t=nu_t)


def momentum_rate(state: FomState, ops: FvOperators, config: FomConfig) -> np.ndarray:
    """``-C_p(u_f) u_p + D_p(nu_eff) u_p + r_p(nu_eff)`` without pressure."""
    mesh = ops.mesh
    nu_face = face_viscosity(mesh, state.nu_t, nu_molecular=config.nu, wall_value=0.0)
    d_eff, r_d = ops.laplacian(nu_face)
    c_p = ops.convection(state.u_f)
    return -(c_p @ state.u_p) - ops.r_C + d_eff @ state.u_p + r_d


def cfm_step(state: FomState, ops: FvOperators, config: FomConfig) -> FomState:
    """Advance one consistent-flux step; returns a new state."""
    dt = config.dt
    forcing = dt * momentum_rate(state, ops, config)
    u_star = state.u_p + forcing
    rhs = (ops.M_p @ u_star + ops.r_M) / dt
    p, iters = solve_ppe(ops.L_f, rhs, config.ref_cell, config.p_ref,
                         config.ppe_tol, config.max_iter, x0=state.p_p)
    u_p = u_star - dt * (ops.G_p @ p)
    u_f = ops.I_pf @ u_star + ops.u_b - dt * (ops.G_f @ p)
    step, time = state.step + 1, state.time + dt
    if not (np.all(np.isfinite(u_p)) and np.all(np.isfinite(u_f))):
        raise SimulationDiverged(f"non-finite velocity at step={step} time={time:.6g}")
    nu_t = (smagorinsky_viscosity(u_p, ops.mesh, config.C_s, ops=ops)
            if config.turbulence else np.zeros_like(state.nu_t))
    return FomState(u_p=u_p, u_f=u_f, p_p=p, nu_t=nu_t, time=time, step=step,
                    divergence=relative_divergence(ops, u_f), ppe_iterations=iters)


def _record(sset: SnapshotSet, state: FomState, mesh: StructuredMesh):
    for name, fld in state.fields().items():
        n = mesh.n_faces if name == "u_f" else mesh.n_cells
        write_snapshot(sset, name, state.time, fld, n_expected=n)


def run_fom(mesh: StructuredMesh, patches: BoundaryPatchSet, config: FomConfig,
            directory, ops: FvOperators | None = None, log_every: int = 50,
            stream=sys.stdout) -> SnapshotSet:
    """Run spin-up plus ``n_steps`` recorded steps and store snapshots.

    Snapshots of ``u_p``, ``p_p``, ``u_f`` and ``nu_t`` are written at the
    end of the spin-up and then every ``snapshot_stride`` steps, so a run
    records ``n_steps // snapshot_stride + 1`` snapshots per field.
    Progress lines ``step=<n> time=<t> div=<residual> ke=<energy>`` go to
    ``stream`` every ``log_every`` steps (``stream=None`` silences them).
    """
    config.validate(mesh, float(np.linalg.norm(patches.lid_velocity)))
    if ops is None:
        ops = build_operators(mesh, patches)
    sset = SnapshotSet(directory)
    if len(sset):
        raise FileExistsError(f"{directory} already holds snapshots")
    state = initial_state(ops, config)

    def report(s):
        if stream is not None:
            print(f"step={s.step} time={s.time:.6g} div={s.divergence:.3e} "
                  f"ke={kinetic_energy(mesh, s.u_p):.6e}", file=stream, flush=True)

    for _ in range(config.spinup_steps):
        state = cfm_step(state, ops, config)
        if log_every and state.step % log_every == 0:
            report(state)
    _record(sset, state, mesh)
    for n in range(1, config.n_steps + 1):
        state = cfm_step(state, ops, config)
        if n % config.snapshot_stride == 0:
            _record(sset, state, mesh)
        if log_every and state.step % log_every == 0:
            report(state)
    return sset
