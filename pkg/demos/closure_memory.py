"""A recurrent closure beats a current-step closure when the target has memory.

The target depends on the inputs one and two steps back, so the MLP, which
sees only the current (a, b) row, cannot beat predicting the training
mean. The LSTM reads a window of past rows and recovers the dependence.

    python demos/closure_memory.py
"""

import numpy as np

from romflux.closure import build_sequences, make_network, train

rng = np.random.default_rng(0)
n = 500
x = rng.standard_normal((n, 2))
d = np.zeros((n, 1))
d[2:, 0] = 0.9 * x[1:-1, 0] - 0.6 * x[:-2, 1]
ds = build_sequences(x[:, :1], x[:, 1:], d, lookback=4, split_index=400)

print(f"mean-predictor MSE {np.mean(ds.y_val ** 2):.4f}")
for kind in ("mlp", "lstm"):
    net = make_network(kind, 2, 1, seed=0)
    _, report = train(net, ds, epochs=60, batch=32, lr=3e-3, seed=0)
    print(f"{kind:>4}: validation MSE {report.val_mse[-1]:.4f}")
