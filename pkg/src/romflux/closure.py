"""Learned map from velocity/pressure coefficients to eddy-viscosity coefficients.

Two regressors are implemented from scratch in float64 numpy:

* ``mlp``: current-step ``[a, b]`` -> Dense(128, relu) -> Dropout(0.2)
  -> Dense(64, relu) -> Dense(n_nut).
* ``lstm``: a window of ``lookback`` steps -> LSTM(64, full sequence)
  -> LSTM(32, last state) -> Dense(32, relu) -> Dense(n_nut).

Both are trained with Adam on the mean squared error of standardised
targets, with gradients from hand-written reverse-mode passes.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fields_io import SnapshotSet, read_array, read_meta, write_array
from .rom import WarmupError

__all__ = [
    "StandardScaler",
    "SequenceDataset",
    "MlpNet",
    "LstmNet",
    "NeuralClosure",
    "TrainingReport",
    "TrainingDiverged",
    "fit_scaler",
    "build_sequences",
    "make_network",
    "mse_loss",
    "train",
    "predict_d",
    "save_closure",
    "load_closure",
    "write_training_csv",
    "HYPERPARAMETERS",
]

CLOSURE_FORMAT_VERSION = 1

# Adam / MSE settings per architecture
HYPERPARAMETERS = {
    "mlp": {"epochs": 1200, "batch": 64, "lr": 3e-5, "lookback": 1},
    "lstm": {"epochs": 1200, "batch": 64, "lr": 2e-5, "lookback": 15},
}


class TrainingDiverged(FloatingPointError):
    pass


# ---------------------------------------------------------------- scaling


@dataclass(frozen=True, eq=False)
class StandardScaler:
    """Per-feature standardisation; near-constant features keep unit scale."""

    mean: np.ndarray
    std: np.ndarray

    def transform(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def inverse(self, z):
        return np.asarray(z, dtype=float) * self.std + self.mean


def fit_scaler(data, min_std: float = 1e-12) -> StandardScaler:
    """Fit mean and (population) standard deviation over the rows of ``data``."""
    x = np.asarray(data, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("scaler needs a (n_samples >= 2, n_features) matrix")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std <= min_std, 1.0, std)
    return StandardScaler(mean, std)


# ---------------------------------------------------------------- datasets


@dataclass(eq=False)
class SequenceDataset:
    """Scaled lookback windows and targets, split in time.

    ``x_train`` has shape ``(n, lookback, n_features)``; the MLP uses only
    the last step of each window (see :meth:`current`).
    """

    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_scaler: StandardScaler
    y_scaler: StandardScaler
    lookback: int
    train_steps: np.ndarray
    val_steps: np.ndarray

    @staticmethod
    def current(x):
        return x[:, -1, :]


def _windows(z, steps, lookback):
    idx = steps[:, None] + np.arange(-lookback + 1, 1)[None, :]
    return z[idx]


def build_sequences(a_hist, b_hist, d_hist, lookback: int, split_index: int) -> SequenceDataset:
    """Window the coefficient histories (rows are time levels).

    Training targets are the steps ``t`` in ``[lookback, split_index)``,
    validation targets ``[split_index + lookback, n)``; the window of step
    ``t`` covers ``[t - lookback + 1, t]``.  Scalers are fitted on rows
    ``[0, split_index)`` only.
    """
    a_hist, b_hist, d_hist = (np.asarray(v, dtype=float) for v in (a_hist, b_hist, d_hist))
    n = a_hist.shape[0]
    if b_hist.shape[0] != n or d_hist.shape[0] != n:
        raise ValueError("coefficient histories must have the same number of time levels")
    if lookback < 1:
        raise ValueError("lookback must be >= 1")
    if n < lookback + 1:
        raise ValueError(f"history of {n} levels is shorter than lookback + 1 = {lookback + 1}")
    if not lookback < split_index <= n:
        raise ValueError(f"split_index must lie in ({lookback}, {n}]")
    ab = np.hstack([a_hist, b_hist])
    x_scaler = fit_scaler(ab[:split_index])
    y_scaler = fit_scaler(d_hist[:split_index])
    z = x_scaler.transform(ab)
    y = y_scaler.transform(d_hist)
    train_steps = np.arange(lookback, split_index)
    val_steps = np.arange(split_index + lookback, n)
    return SequenceDataset(_windows(z, train_steps, lookback), y[train_steps],
                           _windows(z, val_steps, lookback), y[val_steps],
                           x_scaler, y_scaler, lookback, train_steps, val_steps)


# ---------------------------------------------------------------- layers


def _glorot(rng, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def _orthogonal(rng, rows, cols):
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    return q if rows >= cols else q.T


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class _Net:
    kind = ""
    names: tuple = ()

    def __init__(self, params):
        self.params = {k: np.asarray(params[k], dtype=float) for k in self.names}

    def flat(self):
        return np.concatenate([self.params[k].ravel() for k in self.names])

    def set_flat(self, vec):
        i = 0
        for k in self.names:
            p = self.params[k]
            p[...] = vec[i: i + p.size].reshape(p.shape)
            i += p.size

    def n_params(self):
        return sum(p.size for p in self.params.values())

    def predict(self, x):
        return self.forward(x, train=False)[0]


class MlpNet(_Net):
    """Dense(128, relu) -> Dropout -> Dense(64, relu) -> Dense(n_out)."""

    kind = "mlp"
    names = ("W1", "b1", "W2", "b2", "W3", "b3")

    def __init__(self, params, dropout=0.2):
        super().__init__(params)
        self.dropout = float(dropout)

    @classmethod
    def init(cls, n_in, n_out, rng, hidden=(128, 64), dropout=0.2):
        h1, h2 = hidden
        return cls({"W1": _glorot(rng, n_in, h1), "b1": np.zeros(h1),
                    "W2": _glorot(rng, h1, h2), "b2": np.zeros(h2),
                    "W3": _glorot(rng, h2, n_out), "b3": np.zeros(n_out)}, dropout)

    def forward(self, x, train=False, rng=None, mask=None):
        """``x`` is ``(batch, n_in)`` or a window batch whose last step is used."""
        p = self.params
        if x.ndim == 3:
            x = x[:, -1, :]
        z1 = x @ p["W1"] + p["b1"]
        h1 = np.maximum(z1, 0.0)
        if train and self.dropout > 0:
            if mask is None:
                keep = 1.0 - self.dropout
                mask = (rng.random(h1.shape) < keep) / keep
            h1d = h1 * mask
        else:
            mask = None
            h1d = h1
        z2 = h1d @ p["W2"] + p["b2"]
        h2 = np.maximum(z2, 0.0)
        y = h2 @ p["W3"] + p["b3"]
        return y, (x, z1, mask, h1d, z2, h2)

    def backward(self, cache, dy):
        x, z1, mask, h1d, z2, h2 = cache
        p = self.params
        g = {"W3": h2.T @ dy, "b3": dy.sum(0)}
        dz2 = (dy @ p["W3"].T) * (z2 > 0)
        g["W2"] = h1d.T @ dz2
        g["b2"] = dz2.sum(0)
        dh1 = dz2 @ p["W2"].T
        if mask is not None:
            dh1 = dh1 * mask
        dz1 = dh1 * (z1 > 0)
        g["W1"] = x.T @ dz1
        g["b1"] = dz1.sum(0)
        return g


def _lstm_forward(x, W, U, b):
    n, steps, _ = x.shape
    hdim = U.shape[0]
    h = np.zeros((n, hdim))
    c = np.zeros((n, hdim))
    hs = np.empty((n, steps, hdim))
    cache = []
    for t in range(steps):
        z = x[:, t] @ W + h @ U + b
        i = _sigmoid(z[:, :hdim])
        f = _sigmoid(z[:, hdim:2 * hdim])
        g = np.tanh(z[:, 2 * hdim:3 * hdim])
        o = _sigmoid(z[:, 3 * hdim:])
        c_prev, h_prev = c, h
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        hs[:, t] = h
        cache.append((i, f, g, o, c_prev, tc, h_prev))
    return hs, cache


def _lstm_backward(x, W, U, cache, dhs):
    n, steps, _ = x.shape
    hdim = U.shape[0]
    dW, dU = np.zeros_like(W), np.zeros_like(U)
    db = np.zeros(4 * hdim)
    dx = np.empty_like(x)
    dh_next = np.zeros((n, hdim))
    dc_next = np.zeros((n, hdim))
    for t in reversed(range(steps)):
        i, f, g, o, c_prev, tc, h_prev = cache[t]
        dh = dhs[:, t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz = np.hstack([dc * g * i * (1.0 - i), dc * c_prev * f * (1.0 - f),
                        dc * i * (1.0 - g * g), dh * tc * o * (1.0 - o)])
        dW += x[:, t].T @ dz
        dU += h_prev.T @ dz
        db += dz.sum(0)
        dx[:, t] = dz @ W.T
        dh_next = dz @ U.T
        dc_next = dc * f
    return dx, dW, dU, db


class LstmNet(_Net):
    """LSTM(64, sequences) -> LSTM(32) -> Dense(32, relu) -> Dense(n_out).

    Gate order inside the stacked kernels is input, forget, candidate, output.
    """

    kind = "lstm"
    names = ("W1", "U1", "b1", "W2", "U2", "b2", "W3", "b3", "W4", "b4")

    @classmethod
    def init(cls, n_in, n_out, rng, units=(64, 32), dense=32):
        u1, u2 = units

        def bias(h):
            b = np.zeros(4 * h)
            b[h:2 * h] = 1.0
            return b

        return cls({"W1": _glorot(rng, n_in, 4 * u1), "U1": _orthogonal(rng, u1, 4 * u1),
                    "b1": bias(u1),
                    "W2": _glorot(rng, u1, 4 * u2), "U2": _orthogonal(rng, u2, 4 * u2),
                    "b2": bias(u2),
                    "W3": _glorot(rng, u2, dense), "b3": np.zeros(dense),
                    "W4": _glorot(rng, dense, n_out), "b4": np.zeros(n_out)})

    def forward(self, x, train=False, rng=None):
        p = self.params
        if x.ndim != 3:
            raise ValueError("LSTM input must be (batch, lookback, features)")
        hs1, c1 = _lstm_forward(x, p["W1"], p["U1"], p["b1"])
        hs2, c2 = _lstm_forward(hs1, p["W2"], p["U2"], p["b2"])
        last = hs2[:, -1]
        z3 = last @ p["W3"] + p["b3"]
        h3 = np.maximum(z3, 0.0)
        y = h3 @ p["W4"] + p["b4"]
        return y, (x, hs1, c1, hs2, c2, last, z3, h3)

    def backward(self, cache, dy):
        x, hs1, c1, hs2, c2, last, z3, h3 = cache
        p = self.params
        g = {"W4": h3.T @ dy, "b4": dy.sum(0)}
        dz3 = (dy @ p["W4"].T) * (z3 > 0)
        g["W3"] = last.T @ dz3
        g["b3"] = dz3.sum(0)
        dhs2 = np.zeros_like(hs2)
        dhs2[:, -1] = dz3 @ p["W3"].T
        dhs1, g["W2"], g["U2"], g["b2"] = _lstm_backward(hs1, p["W2"], p["U2"], c2, dhs2)
        _, g["W1"], g["U1"], g["b1"] = _lstm_backward(x, p["W1"], p["U1"], c1, dhs1)
        return g


def make_network(kind: str, n_in: int, n_out: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    if kind == "mlp":
        return MlpNet.init(n_in, n_out, rng)
    if kind == "lstm":
        return LstmNet.init(n_in, n_out, rng)
    raise ValueError(f"unknown closure architecture {kind!r}; expected 'mlp' or 'lstm'")


def mse_loss(y, target):
    """Mean squared error over all entries and its gradient with respect to ``y``."""
    diff = y - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


# ---------------------------------------------------------------- training


@dataclass
class TrainingReport:
    train_mse: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)
    final_epoch: int = 0
    seed: int = 0
    wall_time: float = 0.0


class _Adam:
    def __init__(self, n, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _flat_grad(net, grads):
    return np.concatenate([grads[k].ravel() for k in net.names])


def _eval_mse(net, x, y, chunk=512):
    if x.shape[0] == 0:
        return float("nan")
    total = 0.0
    for s in range(0, x.shape[0], chunk):
        out = net.predict(x[s: s + chunk])
        total += float(np.sum((out - y[s: s + chunk]) ** 2))
    return total / y.size


def train(net, dataset: SequenceDataset, epochs: int, batch: int = 64, lr: float = 1e-3,
          seed: int = 0, log_every: int = 0, stream=None):
    """Minimise the scaled-target MSE with Adam; returns ``(net, report)``.

    Minibatches come from a per-epoch permutation drawn from
    ``default_rng(seed)``, which also drives the dropout masks.  ``net`` is
    updated in place.
    """
    if dataset.x_train.shape[0] == 0:
        raise ValueError("training set is empty")
    if epochs < 0 or batch < 1 or lr < 0:
        raise ValueError("epochs >= 0, batch >= 1 and lr >= 0 required")
    rng = np.random.default_rng(seed)
    x, y = dataset.x_train, dataset.y_train
    opt = _Adam(net.n_params(), lr)
    theta = net.flat()
    report = TrainingReport(seed=seed)
    t0 = time.perf_counter()
    n = x.shape[0]
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        for s in range(0, n, batch):
            idx = order[s: s + batch]
            out, cache = net.forward(x[idx], train=True, rng=rng)
            loss, dy = mse_loss(out, y[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}")
            theta = opt.step(theta, _flat_grad(net, net.backward(cache, dy)))
            net.set_flat(theta)
        report.train_mse.append(_eval_mse(net, x, y))
        report.val_mse.append(_eval_mse(net, dataset.x_val, dataset.y_val))
        report.final_epoch = epoch
        if log_every and stream is not None and epoch % log_every == 0:
            print(f"epoch={epoch} train_mse={report.train_mse[-1]:.6e} "
                  f"val_mse={report.val_mse[-1]:.6e}", file=stream, flush=True)
    report.wall_time = time.perf_counter() - t0
    return net, report


def write_training_csv(path, report: TrainingReport) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_mse", "val_mse"])
        for e, (tr, va) in enumerate(zip(report.train_mse, report.val_mse), 1):
            w.writerow([e, repr(tr), repr(va)])


# ---------------------------------------------------------------- deployment


@dataclass(eq=False)
class NeuralClosure:
    """A trained network with its scalers, ready for online queries."""

    net: _Net
    x_scaler: StandardScaler
    y_scaler: StandardScaler
    lookback: int
    hyper: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.net.kind

    def predict(self, history) -> np.ndarray:
        return predict_d(self, history)


def predict_d(closure: NeuralClosure, history) -> np.ndarray:
    """Eddy-viscosity coefficients from raw ``[a, b]`` rows, oldest first.

    Only the last ``lookback`` rows are used.
    """
    hist = np.asarray(history, dtype=float)
    if hist.ndim == 1:
        hist = hist[None, :]
    if hist.shape[0] < closure.lookback:
        raise WarmupError(f"closure needs {closure.lookback} history rows, got {hist.shape[0]}")
    window = closure.x_scaler.transform(hist[-closure.lookback:])[None]
    return closure.y_scaler.inverse(closure.net.predict(window)[0])


def save_closure(directory, closure: NeuralClosure) -> None:
    """Write the network, scalers and hyperparameters into a ROMF directory."""
    sset = SnapshotSet(directory)
    if len(sset):
        raise FileExistsError(f"{directory} already holds a closure")
    meta = {"version": CLOSURE_FORMAT_VERSION, "architecture": closure.kind,
            "lookback": closure.lookback, "hyper": closure.hyper,
            "names": list(closure.net.names)}
    if isinstance(closure.net, MlpNet):
        meta["dropout"] = closure.net.dropout
    write_array(sset, "x_mean", closure.x_scaler.mean, meta=meta)
    write_array(sset, "x_std", closure.x_scaler.std)
    write_array(sset, "y_mean", closure.y_scaler.mean)
    write_array(sset, "y_std", closure.y_scaler.std)
    for k in closure.net.names:
        write_array(sset, f"param.{k}", closure.net.params[k])


def load_closure(directory) -> NeuralClosure:
    sset = SnapshotSet(directory)
    meta = read_meta(sset, "x_mean")
    if meta.get("version") != CLOSURE_FORMAT_VERSION:
        raise ValueError(f"{directory}: unsupported closure format {meta.get('version')}")
    params = {k: read_array(sset, f"param.{k}") for k in meta["names"]}
    if meta["architecture"] == "mlp":
        net = MlpNet(params, meta.get("dropout", 0.2))
    elif meta["architecture"] == "lstm":
        net = LstmNet(params)
    else:
        raise ValueError(f"{directory}: unknown architecture {meta['architecture']!r}")
    return NeuralClosure(net, StandardScaler(read_array(sset, "x_mean"), read_array(sset, "x_std")),
                         StandardScaler(read_array(sset, "y_mean"), read_array(sset, "y_std")),
                         int(meta["lookback"]), meta.get("hyper", {}))
