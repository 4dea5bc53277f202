"""Galerkin projection of the consistent flux method and the online ROM loop.

The full-order operators are projected after discretisation: every reduced
matrix is ``B_out^T W O B_in`` for a full operator ``O``, the output basis
``B_out`` and its inner-product weight ``W`` (cell volumes ``V`` for cell
bases, face areas ``Sigma`` for the face basis).

Online, one step advances the coefficients ``a`` (cell velocity), ``b``
(pressure) and ``c`` (face velocity) as::

    L_r b'   = (M_r a + q_M)/dt - A_r(c) a + nu B_r a + Bt_r(d) a + q_r
    a'       = a + dt(-C_r(c) a + nu D_r a + Dt_r(d) a + r_r) - dt Gh_r b'
    W_r c'   = N_r a + dt(-K_r(c) a + nu P_r a + Pt_r(d) a + s_r) + w_b - dt G_r b'

where ``X(y) a`` denotes the contraction ``sum_i y_i X[i] a`` and ``d``
holds the eddy-viscosity coefficients of the current level.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from .fields_io import SnapshotSet, read_array, read_meta, write_array
from .operators import FvOperators, face_viscosity
from .pod import PodBasis

__all__ = [
    "RomBases",
    "ReducedModel",
    "RomState",
    "RomTrajectory",
    "WarmupError",
    "assemble_reduced_linear",
    "assemble_reduced_convection",
    "assemble_reduced_turbulent_diffusion",
    "build_reduced_model",
    "rom_step",
    "run_rom_online",
    "reconstruct_field",
    "project_state",
    "save_model",
    "load_model",
    "write_trajectory_csv",
]


class WarmupError(RuntimeError):
    """The closure needs more history than is available."""


@dataclass(frozen=True, eq=False)
class RomBases:
    """Cell-velocity, pressure, face-velocity and eddy-viscosity bases."""

    phi: PodBasis
    chi: PodBasis
    psi: PodBasis
    xi: PodBasis

    def check(self, ops: FvOperators):
        h, m = ops.mesh.n_cells, ops.mesh.n_faces
        expected = {"phi": 3 * h, "chi": h, "psi": 3 * m, "xi": h}
        for name, n in expected.items():
            basis = getattr(self, name)
            if basis.dof != n:
                raise ValueError(f"basis {name} has {basis.dof} dofs, mesh needs {n}")
        if self.phi.n_modes != self.psi.n_modes:
            raise ValueError("cell and face velocity bases must have the same number of modes")


def _wt(basis: PodBasis) -> np.ndarray:
    """``B^T W`` as a dense (n_modes x dof) array."""
    return (basis.modes * basis.weights.values[:, None]).T


def assemble_reduced_linear(bases: RomBases, ops: FvOperators, nu: float) -> dict:
    """All reduced matrices and vectors that do not depend on the state."""
    bases.check(ops)
    phi, chi, psi = bases.phi.modes, bases.chi.modes, bases.psi.modes
    xv, pv, ps = _wt(bases.chi), _wt(bases.phi), _wt(bases.psi)
    d_phi = ops.D_p @ phi
    r_p = ops.boundary_vector(nu)
    return {
        "L_r": xv @ (ops.L_f @ chi),
        "M_r": xv @ (ops.M_p @ phi),
        "B_r": xv @ (ops.M_p @ d_phi),
        "q_r_M": xv @ ops.r_M,
        "q_r": xv @ (ops.M_p @ r_p),
        "D_r": pv @ d_phi,
        "Gh_r": pv @ (ops.G_p @ chi),
        "r_r": pv @ r_p,
        "W_r": ps @ psi,
        "N_r": ps @ (ops.I_pf @ phi),
        "P_r": ps @ (ops.I_pf @ d_phi),
        "G_r": ps @ (ops.G_f @ chi),
        "s_r": ps @ (ops.I_pf @ r_p),
        "w_b": ps @ ops.u_b,
    }


def assemble_reduced_convection(bases: RomBases, ops: FvOperators):
    """Tensors ``A_r``, ``C_r``, ``K_r``; slice ``i`` projects ``C_p(psi_i) phi``."""
    bases.check(ops)
    phi = bases.phi.modes
    xv, pv, ps = _wt(bases.chi), _wt(bases.phi), _wt(bases.psi)
    n = bases.psi.n_modes
    a_r = np.empty((n, bases.chi.n_modes, bases.phi.n_modes))
    c_r = np.empty((n, bases.phi.n_modes, bases.phi.n_modes))
    k_r = np.empty((n, bases.psi.n_modes, bases.phi.n_modes))
    for i in range(n):
        conv = ops.convection(bases.psi.modes[:, i]) @ phi
        a_r[i] = xv @ (ops.M_p @ conv)
        c_r[i] = pv @ conv
        k_r[i] = ps @ (ops.I_pf @ conv)
    return a_r, c_r, k_r


def assemble_reduced_turbulent_diffusion(bases: RomBases, ops: FvOperators):
    """Tensors ``Bt_r``, ``Dt_r``, ``Pt_r`` for the eddy-viscosity diffusion.

    Slice ``i`` projects the Laplacian whose face viscosity is the face
    interpolation of eddy-viscosity mode ``xi_i`` (zero on walls), on the
    pressure, cell-momentum and face-momentum side respectively.
    """
    bases.check(ops)
    phi = bases.phi.modes
    xv, pv, ps = _wt(bases.chi), _wt(bases.phi), _wt(bases.psi)
    n = bases.xi.n_modes
    bt = np.empty((n, bases.chi.n_modes, bases.phi.n_modes))
    dt_ = np.empty((n, bases.phi.n_modes, bases.phi.n_modes))
    pt = np.empty((n, bases.psi.n_modes, bases.phi.n_modes))
    for i in range(n):
        nu_face = face_viscosity(ops.mesh, bases.xi.modes[:, i], 0.0, wall_value=0.0)
        lap, _ = ops.laplacian(nu_face, with_boundary=False, signed=True)
        d_phi = lap @ phi
        bt[i] = xv @ (ops.M_p @ d_phi)
        dt_[i] = pv @ d_phi
        pt[i] = ps @ (ops.I_pf @ d_phi)
    return bt, dt_, pt


@dataclass(eq=False)
class ReducedModel:
    """Offline reduced operators plus LU factors of ``L_r`` and ``W_r``."""

    nu: float
    dt: float
    L_r: np.ndarray
    M_r: np.ndarray
    B_r: np.ndarray
    q_r_M: np.ndarray
    q_r: np.ndarray
    D_r: np.ndarray
    Gh_r: np.ndarray
    r_r: np.ndarray
    W_r: np.ndarray
    N_r: np.ndarray
    P_r: np.ndarray
    G_r: np.ndarray
    s_r: np.ndarray
    w_b: np.ndarray
    A_r: np.ndarray
    C_r: np.ndarray
    K_r: np.ndarray
    Bt_r: np.ndarray
    Dt_r: np.ndarray
    Pt_r: np.ndarray
    _lu_L: tuple = field(default=None, repr=False)
    _lu_W: tuple = field(default=None, repr=False)

    ARRAYS = ("L_r", "M_r", "B_r", "q_r_M", "q_r", "D_r", "Gh_r", "r_r", "W_r", "N_r",
              "P_r", "G_r", "s_r", "w_b", "A_r", "C_r", "K_r", "Bt_r", "Dt_r", "Pt_r")

    def __post_init__(self):
        for name in self.ARRAYS:
            arr = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"reduced array {name} has non-finite entries")
            setattr(self, name, arr)
        n_p, n_u = self.M_r.shape
        n_nut = self.Bt_r.shape[0]
        shapes = {
            "L_r": (n_p, n_p), "B_r": (n_p, n_u), "q_r_M": (n_p,), "q_r": (n_p,),
            "D_r": (n_u, n_u), "Gh_r": (n_u, n_p), "r_r": (n_u,), "W_r": (n_u, n_u),
            "N_r": (n_u, n_u), "P_r": (n_u, n_u), "G_r": (n_u, n_p), "s_r": (n_u,),
            "w_b": (n_u,), "A_r": (n_u, n_p, n_u), "C_r": (n_u, n_u, n_u),
            "K_r": (n_u, n_u, n_u), "Bt_r": (n_nut, n_p, n_u), "Dt_r": (n_nut, n_u, n_u),
            "Pt_r": (n_nut, n_u, n_u),
        }
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        self._lu_L = _factor(self.L_r, "L_r")
        self._lu_W = _factor(self.W_r, "W_r")

    @property
    def n_u(self) -> int:
        return self.M_r.shape[1]

    @property
    def n_p(self) -> int:
        return self.M_r.shape[0]

    @property
    def n_nut(self) -> int:
        return self.Bt_r.shape[0]


def _factor(a, name):
    lu = sla.lu_factor(a, check_finite=True)
    piv = np.abs(np.diag(lu[0]))
    if piv.min() <= 1e-14 * max(piv.max(), 1e-300):
        raise np.linalg.LinAlgError(f"{name} is singular (min pivot {piv.min():.3e})")
    return lu


def build_reduced_model(bases: RomBases, ops: FvOperators, nu: float, dt: float) -> ReducedModel:
    """Run the complete offline stage."""
    lin = assemble_reduced_linear(bases, ops, nu)
    a_r, c_r, k_r = assemble_reduced_convection(bases, ops)
    bt, dt_, pt = assemble_reduced_turbulent_diffusion(bases, ops)
    return ReducedModel(nu=float(nu), dt=float(dt), A_r=a_r, C_r=c_r, K_r=k_r,
                        Bt_r=bt, Dt_r=dt_, Pt_r=pt, **lin)


@dataclass
class RomState:
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray
    step: int = 0
    time: float = 0.0


def _contract(tensor, y, x):
    """``sum_i y_i tensor[i] @ x``."""
    return np.einsum("i,ijk,k->j", y, tensor, x)


def rom_step(state: RomState, model: ReducedModel, d_next=None) -> RomState:
    """Advance one reduced consistent-flux step.

    The diffusion of this step uses ``state.d`` (eddy-viscosity
    coefficients of the current level).  ``d_next`` becomes the ``d`` of
    the returned state; when omitted the current ``d`` is carried over.
    """
    a, c, d = state.a, state.c, state.d
    dt, nu = model.dt, model.nu
    rhs_p = ((model.M_r @ a + model.q_r_M) / dt - _contract(model.A_r, c, a)
             + nu * (model.B_r @ a) + _contract(model.Bt_r, d, a) + model.q_r)
    b_new = sla.lu_solve(model._lu_L, rhs_p)
    a_new = (a + dt * (-_contract(model.C_r, c, a) + nu * (model.D_r @ a)
                       + _contract(model.Dt_r, d, a) + model.r_r)
             - dt * (model.Gh_r @ b_new))
    rhs_c = (model.N_r @ a + dt * (-_contract(model.K_r, c, a) + nu * (model.P_r @ a)
                                   + _contract(model.Pt_r, d, a) + model.s_r)
             + model.w_b - dt * (model.G_r @ b_new))
    c_new = sla.lu_solve(model._lu_W, rhs_c)
    step = state.step + 1
    if not (np.all(np.isfinite(a_new)) and np.all(np.isfinite(b_new))
            and np.all(np.isfinite(c_new))):
        raise FloatingPointError(f"reduced state became non-finite at step={step}")
    d_new = np.array(d if d_next is None else d_next, dtype=float)
    if d_new.shape != (model.n_nut,):
        raise ValueError(f"d_next must have length {model.n_nut}")
    return RomState(a_new, b_new, c_new, d_new, step, state.time + dt)


@dataclass
class RomTrajectory:
    """Coefficients recorded at every reduced step, rows indexed by step."""

    times: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray
    mode: str = "oracle-d"
    warmup_steps: int = 0

    def at(self, steps) -> "RomTrajectory":
        steps = np.asarray(steps)
        return RomTrajectory(self.times[steps], self.a[steps], self.b[steps], self.c[steps],
                             self.d[steps], self.mode, self.warmup_steps)


MODES = ("hybrid", "oracle-d", "frozen-nu")


def run_rom_online(model: ReducedModel, init: RomState, n_steps: int, mode: str = "oracle-d",
                   closure=None, oracle_d=None, warmup_d=None, history_stride: int = 1,
                   log=None) -> RomTrajectory:
    """Advance the reduced model ``n_steps`` steps from ``init``.

    Parameters
    ----------
    mode : {"hybrid", "oracle-d", "frozen-nu"}
        ``oracle-d`` reads the eddy-viscosity coefficients of every step from
        ``oracle_d`` (shape ``(n_steps + 1, n_nut)``); ``frozen-nu`` keeps
        ``init.d`` fixed; ``hybrid`` queries ``closure.predict`` with the
        ``(a, b)`` history after every step.
    closure : object with ``lookback`` and ``predict(history)``
        ``history`` is a ``(lookback, n_u + n_p)`` array of raw ``[a, b]``
        rows, oldest first, sampled every ``history_stride`` steps.
    warmup_d : array, optional
        Coefficients used in hybrid mode while the history is still shorter
        than the closure's lookback.  Without it a short history raises
        :class:`WarmupError`.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    if mode == "oracle-d":
        if oracle_d is None:
            raise ValueError("oracle-d mode needs the projected eddy-viscosity coefficients")
        oracle_d = np.asarray(oracle_d, dtype=float)
        if oracle_d.shape[0] < n_steps + 1:
            raise ValueError(f"oracle_d has {oracle_d.shape[0]} rows, need {n_steps + 1}")
    if mode == "hybrid" and closure is None:
        raise ValueError("hybrid mode needs a trained closure")

    state = RomState(np.array(init.a, float), np.array(init.b, float), np.array(init.c, float),
                     np.array(init.d, float), init.step, init.time)
    if mode == "oracle-d":
        state.d = oracle_d[0].copy()
    rows = {k: [getattr(state, k).copy()] for k in "abcd"}
    times = [state.time]
    ab_hist = [np.concatenate([state.a, state.b])]
    warm = 0
    lookback = getattr(closure, "lookback", 1)
    if mode == "hybrid":
        state.d, used_warmup = _hybrid_d(closure, ab_hist, 0, lookback, history_stride, warmup_d)
        warm += used_warmup
        rows["d"][0] = state.d.copy()
    for n in range(1, n_steps + 1):
        d_next = oracle_d[n] if mode == "oracle-d" else None
        state = rom_step(state, model, d_next)
        if mode == "hybrid":
            ab_hist.append(np.concatenate([state.a, state.b]))
            state.d, used_warmup = _hybrid_d(closure, ab_hist, n, lookback, history_stride,
                                             warmup_d)
            warm += used_warmup
        for k in "abcd":
            rows[k].append(getattr(state, k).copy())
        times.append(state.time)
    if log is not None and warm:
        log(f"hybrid warm-up: {warm} steps used projected eddy-viscosity coefficients")
    return RomTrajectory(np.array(times), *(np.array(rows[k]) for k in "abcd"),
                         mode=mode, warmup_steps=warm)


def _hybrid_d(closure, ab_hist, n, lookback, stride, warmup_d):
    first = n - (lookback - 1) * stride
    if first < 0:
        if warmup_d is None:
            raise WarmupError(
                f"closure needs {lookback} history samples at stride {stride}; "
                f"only {n // stride + 1} available at step {n}")
        return np.array(warmup_d[n], dtype=float), 1
    window = np.array(ab_hist[first: n + 1: stride])
    return np.asarray(closure.predict(window), dtype=float), 0


def reconstruct_field(basis: PodBasis, coeffs) -> np.ndarray:
    """``modes @ coeffs`` for one coefficient vector or a (n_modes, n) matrix."""
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape[0] != basis.n_modes:
        raise ValueError(f"{coeffs.shape[0]} coefficients for a {basis.n_modes}-mode basis")
    return basis.modes @ coeffs


def project_state(bases: RomBases, u_p, p_p, u_f, nu_t, step=0, time=0.0) -> RomState:
    """Project one full-order state onto the bases."""
    from .pod import project_coefficients
    return RomState(project_coefficients(u_p, bases.phi), project_coefficients(p_p, bases.chi),
                    project_coefficients(u_f, bases.psi), project_coefficients(nu_t, bases.xi),
                    step, time)


def save_model(sset: SnapshotSet, model: ReducedModel) -> None:
    for name in ReducedModel.ARRAYS:
        meta = {"nu": model.nu, "dt": model.dt} if name == "L_r" else None
        write_array(sset, name, getattr(model, name), meta=meta)


def load_model(sset: SnapshotSet) -> ReducedModel:
    meta = read_meta(sset, "L_r")
    arrays = {name: read_array(sset, name) for name in ReducedModel.ARRAYS}
    return ReducedModel(nu=meta["nu"], dt=meta["dt"], **arrays)


def write_trajectory_csv(path, traj: RomTrajectory) -> None:
    """CSV with ``step,time,a_1..a_Nu,b_1..b_Np,c_1..c_Nu,d_1..d_Nnut``."""
    path = Path(path)
    header = (["step", "time"]
              + [f"a_{i + 1}" for i in range(traj.a.shape[1])]
              + [f"b_{i + 1}" for i in range(traj.b.shape[1])]
              + [f"c_{i + 1}" for i in range(traj.c.shape[1])]
              + [f"d_{i + 1}" for i in range(traj.d.shape[1])])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for n in range(traj.times.shape[0]):
            writer.writerow([n, repr(float(traj.times[n]))]
                            + [repr(float(x)) for x in np.concatenate(
                                [traj.a[n], traj.b[n], traj.c[n], traj.d[n]])])


def read_trajectory_csv(path) -> RomTrajectory:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = np.array([[float(x) for x in row] for row in reader])
    cols = {p: [i for i, h in enumerate(header) if h.startswith(p + "_")] for p in "abcd"}
    return RomTrajectory(data[:, 1], *(data[:, cols[p]] for p in "abcd"))
