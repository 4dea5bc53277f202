"""``romflux`` command line: the offline/online pipeline as subcommands.

Artifacts live under the case directory::

    snapshots/          full-order fields (fom-run)
    pod/                bases, eigenvalues, projected coefficients (pod)
    rom/<dims>/         reduced models (rom-offline)
    closure/<arch>/     trained network, training.csv, holdout.csv (closure-train)
    online/<tag>.csv    coefficient trajectories (rom-online)
    results/            error, energy and summary CSVs (evaluate, emit-plots)
"""

from __future__ import annotations

import argparse
import csv
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .closure import (NeuralClosure, build_sequences, load_closure, make_network, save_closure,
                      train, write_training_csv)
from .config import ConfigError, parse_config
from .fields_io import SnapshotSet, read_array, read_meta, read_snapshot_matrix, write_array
from .fom import FomConfig, run_fom
from .mesh import build_structured_mesh, classify_boundary
from .metrics import energy_enstrophy_series, relative_error_global, relative_error_time
from .operators import build_operators
from .pod import (InnerProductWeights, build_modes, cell_weights, correlation_matrix,
                  face_weights, load_basis, project_coefficients, save_basis, symmetric_eig)
from .rom import (RomBases, RomState, build_reduced_model, load_model, read_trajectory_csv,
                  run_rom_online, save_model, write_trajectory_csv)

SUBCOMMANDS = ("fom-run", "pod", "rom-offline", "closure-train", "rom-online", "evaluate",
               "emit-plots")
FAMILIES = (("phi", "u_p", "cell-vector"), ("chi", "p_p", "cell-scalar"),
            ("psi", "u_f", "face-vector"), ("xi", "nu_t", "cell-scalar"))


class PipelineError(RuntimeError):
    """A stage cannot run; the message says what is missing and how to produce it."""


# ---------------------------------------------------------------- helpers


class Case:
    def __init__(self, cfg, args):
        self.cfg = cfg
        self.dir = cfg.case_dir
        self.args = args
        r = cfg["rom"]
        if args.modes is not None:
            if args.modes < 1:
                raise ConfigError("--modes must be >= 1")
            self.dims = (args.modes,) * 3
        else:
            self.dims = (r["N_u"], r["N_p"], r["N_nut"])
        self.arch = args.closure or cfg["closure"]["architecture"]
        self.seed = cfg["closure"]["seed"] if args.seed is None else args.seed
        self._ops = None

    # paths
    @property
    def snapshots(self):
        return self.dir / "snapshots"

    @property
    def pod(self):
        return self.dir / "pod"

    def rom(self, dims):
        return self.dir / "rom" / _dims_tag(dims)

    def closure(self, arch=None):
        return self.dir / "closure" / (arch or self.arch)

    def trajectory(self, mode, dims, arch=None):
        tag = f"hybrid-{arch or self.arch}" if mode == "hybrid" else mode
        return self.dir / "online" / f"{tag}_{_dims_tag(dims)}.csv"

    @property
    def results(self):
        return self.dir / "results"

    # model pieces
    @property
    def mesh(self):
        return self.ops.mesh

    @property
    def ops(self):
        if self._ops is None:
            m = self.cfg["mesh"]
            mesh = build_structured_mesh(m["nx"], m["ny"], m["nz"], m["lx"], m["ly"], m["lz"])
            patches = classify_boundary(mesh, self.cfg["physics"]["lid_velocity"])
            self._ops = build_operators(mesh, patches)
        return self._ops

    def fom_config(self):
        p, t = self.cfg["physics"], self.cfg["time"]
        return FomConfig(nu=p["nu"], C_s=p["C_s"], Pr_t=p["Pr_t"], dt=t["dt"],
                         n_steps=t["n_steps"], snapshot_stride=t["snapshot_stride"],
                         spinup_steps=t["spinup_steps"], ref_cell=t["ref_cell"],
                         p_ref=t["p_ref"], ppe_tol=t["ppe_tol"],
                         turbulence=p["turbulence"])

    def mode_dims(self):
        """Reduced dimensions of every model: the main one plus the mode sweep."""
        if self.args.modes is not None:
            return [self.dims]
        sweep = [(n, n, n) for n in self.cfg["rom"]["mode_counts"]]
        return sorted(set(sweep) | {self.dims})


def _dims_tag(dims):
    return "N{}-{}-{}".format(*dims)


def _require(path: Path, producer: str, what: str):
    if not path.exists():
        raise PipelineError(f"missing {what}: {path} (run `romflux {producer}` first)")


def _snapshot_set(case):
    _require(case.snapshots / SnapshotSet.MANIFEST, "fom-run", "full-order snapshots")
    return SnapshotSet(case.snapshots)


def _pod_set(case):
    _require(case.pod / SnapshotSet.MANIFEST, "pod", "POD bases")
    return SnapshotSet(case.pod)


def _bases(case, dims):
    sset = _pod_set(case)
    n_u, n_p, n_nut = dims
    full = {name: load_basis(sset, name) for name, _, _ in FAMILIES}
    for name, n in zip(("phi", "chi", "psi", "xi"), (n_u, n_p, n_u, n_nut)):
        if n > full[name].n_modes:
            raise PipelineError(f"{n} modes requested but pod/ holds only {full[name].n_modes} "
                                f"for {name} (rerun `romflux pod` with --modes {n})")
    return RomBases(full["phi"].truncate(n_u), full["chi"].truncate(n_p),
                    full["psi"].truncate(n_u), full["xi"].truncate(n_nut))


def _coefficients(case, dims):
    """Projected FOM coefficients (rows = snapshot index) truncated to ``dims``."""
    sset = _pod_set(case)
    n_u, n_p, n_nut = dims
    return (read_array(sset, "coef.phi")[:, :n_u], read_array(sset, "coef.chi")[:, :n_p],
            read_array(sset, "coef.psi")[:, :n_u], read_array(sset, "coef.xi")[:, :n_nut],
            read_array(sset, "times"))


def _fine_d(d_snap, stride):
    """Per-step coefficients by linear interpolation between snapshots."""
    n_snap = d_snap.shape[0]
    if n_snap == 1:
        return d_snap.copy()
    s = np.arange((n_snap - 1) * stride + 1) / stride
    k = np.minimum(s.astype(int), n_snap - 2)
    w = (s - k)[:, None]
    return (1 - w) * d_snap[k] + w * d_snap[k + 1]


def _write_csv(path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def _fmt(x):
    if x is None or x is np.ma.masked:
        return "undefined"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


# ---------------------------------------------------------------- stages


def cmd_fom_run(case):
    cfg = case.fom_config()
    if (case.snapshots / SnapshotSet.MANIFEST).exists():
        raise PipelineError(f"{case.snapshots} already holds snapshots; remove it to rerun")
    lid = float(np.linalg.norm(case.cfg["physics"]["lid_velocity"]))
    cfg.validate(case.mesh, lid)
    run_fom(case.mesh, case.ops.patches, cfg, case.snapshots, ops=case.ops)
    print(f"wrote {case.snapshots}")


def cmd_pod(case):
    sset = _snapshot_set(case)
    if (case.pod / SnapshotSet.MANIFEST).exists():
        raise PipelineError(f"{case.pod} already exists; remove it to recompute")
    n_max = max(max(d) for d in case.mode_dims())
    mesh = case.mesh
    weights = {"phi": cell_weights(mesh, 3), "chi": cell_weights(mesh),
               "psi": face_weights(mesh), "xi": cell_weights(mesh)}
    out = SnapshotSet(case.pod)
    for name, field, kind in FAMILIES:
        s = read_snapshot_matrix(sset, field)
        w: InnerProductWeights = weights[name]
        q, lam = symmetric_eig(correlation_matrix(s, w))
        basis = build_modes(s, q, lam, min(n_max, s.shape[1]), w, kind)
        save_basis(out, name, basis)
        write_array(out, f"coef.{name}", project_coefficients(s, basis).T)
        print(f"{name}: {basis.n_modes} modes from {s.shape[1]} snapshots of {field}, "
              f"captured energy {lam[:basis.n_modes].sum() / lam.clip(0).sum():.8f}")
        del s
    write_array(out, "times", sset.times("u_p"))
    print(f"wrote {case.pod}")


def cmd_rom_offline(case):
    cfg = case.cfg
    for dims in case.mode_dims():
        target = case.rom(dims)
        if (target / SnapshotSet.MANIFEST).exists():
            shutil.rmtree(target)
        model = build_reduced_model(_bases(case, dims), case.ops, cfg["physics"]["nu"],
                                    cfg["time"]["dt"])
        save_model(SnapshotSet(target), model)
        print(f"wrote {target}")


def _split_index(case, n_levels):
    return int(round(case.cfg["closure"]["split_fraction"] * n_levels))


def cmd_closure_train(case):
    c = case.cfg["closure"]
    a, b, _, d, _ = _coefficients(case, case.dims)
    lookback = c["lookback"]
    split = _split_index(case, a.shape[0])
    ds = build_sequences(a, b, d, lookback, split)
    net = make_network(case.arch, ds.x_train.shape[2], d.shape[1], case.seed)
    lr = case.cfg.learning_rate(case.arch)
    print(f"training {case.arch}: {ds.x_train.shape[0]} train / {ds.x_val.shape[0]} validation "
          f"samples, lookback {lookback}, {c['epochs']} epochs, lr {lr}, seed {case.seed}")
    net, report = train(net, ds, c["epochs"], c["batch"], lr, case.seed,
                        log_every=max(1, c["epochs"] // 12), stream=sys.stdout)
    hyper = {"epochs": c["epochs"], "batch": c["batch"], "lr": lr, "seed": case.seed,
             "split_index": split, "lookback": lookback, "dims": list(case.dims)}
    closure = NeuralClosure(net, ds.x_scaler, ds.y_scaler,
                            lookback if case.arch == "lstm" else 1, hyper)
    target = case.closure()
    if target.exists():
        shutil.rmtree(target)
    save_closure(target / "model", closure)
    write_training_csv(target / "training.csv", report)
    err = _holdout_error(case, closure, a, b, d, ds.val_steps)
    _write_csv(target / "holdout.csv", ["metric", "value"],
               [["nut_relative_l2", err], ["val_mse", report.val_mse[-1] if report.val_mse else None],
                ["train_mse", report.train_mse[-1] if report.train_mse else None]])
    print(f"trained in {report.wall_time:.1f} s; held-out nu_T reconstruction relative error "
          f"{err:.4%}; wrote {target}")


def _holdout_error(case, closure, a, b, d, steps):
    """Volume-weighted relative L2 error of the reconstructed eddy viscosity."""
    xi = _bases(case, case.dims).xi
    ab = np.hstack([a, b])
    num = den = 0.0
    for t in steps:
        pred = closure.predict(ab[max(0, t - closure.lookback + 1): t + 1])
        diff = xi.modes @ (pred - d[t])
        ref = xi.modes @ d[t]
        num += float(diff @ (xi.weights.values * diff))
        den += float(ref @ (xi.weights.values * ref))
    return float(np.sqrt(num / den)) if den > 0 else None


def _run_one(case, mode, dims, closure=None):
    _require(case.rom(dims) / SnapshotSet.MANIFEST, "rom-offline", "reduced model")
    model = load_model(SnapshotSet(case.rom(dims)))
    a, b, c, d, times = _coefficients(case, dims)
    stride = case.cfg["time"]["snapshot_stride"]
    d_fine = _fine_d(d, stride)
    n_steps = d_fine.shape[0] - 1
    init = RomState(a[0], b[0], c[0], d[0], 0, float(times[0]))
    traj = run_rom_online(model, init, n_steps, mode, closure=closure,
                          oracle_d=d_fine if mode == "oracle-d" else None,
                          warmup_d=d_fine, history_stride=stride, log=print)
    path = case.trajectory(mode, dims)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_trajectory_csv(path, traj)
    print(f"{mode} {_dims_tag(dims)}: {n_steps} steps; wrote {path}")


def cmd_rom_online(case):
    mode = case.args.mode or "hybrid"
    if mode == "hybrid":
        _require(case.closure() / "model" / SnapshotSet.MANIFEST, "closure-train",
                 f"{case.arch} closure")
        closure = load_closure(case.closure() / "model")
        if tuple(closure.hyper.get("dims", case.dims)) != tuple(case.dims):
            raise PipelineError(f"closure was trained for dims {closure.hyper['dims']}, "
                                f"not {list(case.dims)}; rerun `romflux closure-train`")
        _run_one(case, mode, case.dims, closure)
    elif mode == "oracle-d":
        for dims in case.mode_dims():
            _run_one(case, mode, dims)
    else:
        _run_one(case, mode, case.dims)


def _reconstructed(case, mode, dims):
    path = case.trajectory(mode, dims)
    _require(path, f"rom-online --mode {mode}", "ROM trajectory")
    traj = read_trajectory_csv(path)
    stride = case.cfg["time"]["snapshot_stride"]
    bases = _bases(case, dims)
    rows = np.arange(0, traj.times.shape[0], stride)
    return (bases.phi.modes @ traj.a[rows].T, bases.chi.modes @ traj.b[rows].T,
            bases.xi.modes @ traj.d[rows].T, traj.times[rows])


def cmd_evaluate(case):
    mode = case.args.mode or "hybrid"
    sset = _snapshot_set(case)
    mesh, ops = case.mesh, case.ops
    w_cell = mesh.cell_volumes
    w = {"u": np.tile(w_cell, 3), "p": w_cell, "nut": w_cell}
    fom = {"u": read_snapshot_matrix(sset, "u_p"), "p": read_snapshot_matrix(sset, "p_p"),
           "nut": read_snapshot_matrix(sset, "nu_t")}
    times = sset.times("u_p")
    u_r, p_r, nut_r, _ = _reconstructed(case, mode, case.dims)
    rom = {"u": u_r, "p": p_r, "nut": nut_r}
    if u_r.shape != fom["u"].shape:
        raise PipelineError("ROM trajectory and FOM snapshots cover different time windows")
    res = case.results
    summary = []
    label = f"hybrid-{case.arch}" if mode == "hybrid" else mode
    for key in ("u", "p", "nut"):
        series = relative_error_time(fom[key], rom[key], w[key])
        _write_csv(res / f"error_time_{key}.csv", ["time", "relative_error"],
                   [[t, series[j]] for j, t in enumerate(times)])
        summary.append([key, label, _dims_tag(case.dims),
                        relative_error_global(fom[key], rom[key], w[key])])

    sweep = sorted({d for d in case.mode_dims() if d[0] == d[1] == d[2]})
    for key in ("u", "p", "nut"):
        rows = []
        for dims in sweep:
            u_m, p_m, nut_m, _ = _reconstructed(case, "oracle-d", dims)
            r = {"u": u_m, "p": p_m, "nut": nut_m}[key]
            rows.append([dims[0], relative_error_global(fom[key], r, w[key])])
        _write_csv(res / f"error_modes_{key}.csv", ["n_modes", "relative_error"], rows)

    e_f, z_f = energy_enstrophy_series(fom["u"], mesh, ops)
    e_r, z_r = energy_enstrophy_series(u_r, mesh, ops)
    for name, f, r in (("energy", e_f, e_r), ("enstrophy", z_f, z_r)):
        rel = relative_error_time(f[None, :], r[None, :], np.ones(1))
        _write_csv(res / f"{name}.csv", ["time", "fom", "rom", "relative_error"],
                   [[t, f[j], r[j], rel[j]] for j, t in enumerate(times)])
        summary.append([name, label, _dims_tag(case.dims),
                        relative_error_global(f[None, :], r[None, :], np.ones(1))])

    holdout = case.closure() / "holdout.csv"
    if mode == "hybrid" and holdout.exists():
        with open(holdout, newline="") as fh:
            vals = {row["metric"]: row["value"] for row in csv.DictReader(fh)}
        summary.append(["nut_coefficients_holdout", label, _dims_tag(case.dims),
                        float(vals["nut_relative_l2"])])
    _write_csv(res / "summary.csv", ["quantity", "mode", "dims", "relative_error"], summary)
    for row in summary:
        print(f"{row[0]:>26s} {row[1]:>12s} {row[2]}: {_fmt(row[3])}")
    print(f"wrote {res}")


def cmd_emit_plots(case):
    pod = _pod_set(case)
    out = case.results / "plots"
    lams = [np.asarray(read_meta(pod, f"{name}.modes")["eigenvalues"]) for name, _, _ in FAMILIES]
    n = max(len(x) for x in lams)
    rows = []
    for i in range(n):
        row = [i + 1]
        for lam in lams:
            total = lam.clip(0).sum()
            row += ([lam[i], lam[: i + 1].clip(0).sum() / total] if i < len(lam) and total > 0
                    else [None, None])
        rows.append(row)
    header = ["index"] + [f"{h}_{name}" for name, _, _ in FAMILIES
                          for h in ("lambda", "cumulative")]
    _write_csv(out / "eigenvalues.csv", header, rows)

    mode = case.args.mode or "hybrid"
    path = case.trajectory(mode, case.dims)
    _require(path, f"rom-online --mode {mode}", "ROM trajectory")
    traj = read_trajectory_csv(path)
    a, b, _, d, times = _coefficients(case, case.dims)
    stride = case.cfg["time"]["snapshot_stride"]
    rows_idx = np.arange(0, traj.times.shape[0], stride)
    for sym, fom_c, rom_c in (("a", a, traj.a[rows_idx]), ("b", b, traj.b[rows_idx]),
                              ("d", d, traj.d[rows_idx])):
        k = fom_c.shape[1]
        header = ["time"] + [f"fom_{sym}_{i + 1}" for i in range(k)] + \
                 [f"rom_{sym}_{i + 1}" for i in range(k)]
        _write_csv(out / f"coefficients_{sym}.csv", header,
                   [[t, *fom_c[j], *rom_c[j]] for j, t in enumerate(times)])
    training = case.closure() / "training.csv"
    if training.exists():
        shutil.copyfile(training, out / f"training_{case.arch}.csv")
    print(f"wrote {out}")


COMMANDS = {
    "fom-run": cmd_fom_run,
    "pod": cmd_pod,
    "rom-offline": cmd_rom_offline,
    "closure-train": cmd_closure_train,
    "rom-online": cmd_rom_online,
    "evaluate": cmd_evaluate,
    "emit-plots": cmd_emit_plots,
}


def build_parser():
    p = argparse.ArgumentParser(
        prog="romflux",
        description="Finite-volume POD-Galerkin ROM with a learned eddy-viscosity closure.")
    p.add_argument("--version", action="version", version=f"romflux {__version__}")
    p.add_argument("subcommand", choices=SUBCOMMANDS, metavar="subcommand",
                   help="one of: " + ", ".join(SUBCOMMANDS))
    p.add_argument("--config", required=True, help="case configuration file")
    p.add_argument("--modes", type=int, default=None,
                   help="use N modes for every field (overrides [rom])")
    p.add_argument("--closure", choices=("mlp", "lstm"), default=None,
                   help="closure architecture (overrides [closure] architecture)")
    p.add_argument("--mode", choices=("hybrid", "oracle-d", "frozen-nu"), default=None,
                   help="online eddy-viscosity source (default hybrid)")
    p.add_argument("--seed", type=int, default=None, help="closure training seed")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = parse_config(args.config)
        case = Case(cfg, args)
        COMMANDS[args.subcommand](case)
    except (ConfigError, PipelineError, FileExistsError) as exc:
        print(f"romflux {args.subcommand}: error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"romflux {args.subcommand}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
