import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from romflux.closure import (HYPERPARAMETERS, LstmNet, MlpNet, NeuralClosure,
                             TrainingDiverged, _lstm_forward, build_sequences, fit_scaler,
                             load_closure, make_network, mse_loss, predict_d, save_closure, train,
                             write_training_csv)
from romflux.rom import WarmupError

# --- scaler ---------------------------------------------------------------------------


def test_scaler_two_point_column():
    s = fit_scaler(np.array([[1.0], [3.0]]))
    assert s.mean[0] == 2.0 and s.std[0] == 1.0
    np.testing.assert_array_equal(s.transform([[1.0], [3.0]])[:, 0], [-1.0, 1.0])


def test_scaler_constant_column():
    x = np.full((5, 1), 4.2)
    s = fit_scaler(x)
    assert s.std[0] == 1.0
    np.testing.assert_array_equal(s.transform(x), 0.0)
    np.testing.assert_array_equal(s.inverse(s.transform(x)), x)


def test_scaler_random_round_trip(rng):
    x = rng.standard_normal((50, 7)) * rng.uniform(0.1, 10, 7) + rng.standard_normal(7)
    s = fit_scaler(x)
    z = s.transform(x)
    assert np.abs(s.inverse(z) - x).max() <= 1e-12 * np.abs(x).max()
    np.testing.assert_allclose(z.mean(0), 0.0, atol=1e-10)
    np.testing.assert_allclose(z.std(0), 1.0, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 12), st.integers(1, 4)),
              elements=st.floats(-1e3, 1e3)))
def test_scaler_inverse_transform_is_identity(x):
    s = fit_scaler(x)
    assert np.all(s.std > 0)
    np.testing.assert_allclose(s.inverse(s.transform(x)), x, rtol=1e-12, atol=1e-12 * (1 + np.abs(x).max()))


def test_scaler_needs_two_samples():
    with pytest.raises(ValueError):
        fit_scaler(np.zeros((1, 3)))
    with pytest.raises(ValueError):
        fit_scaler(np.zeros((0, 3)))


# --- sequences ------------------------------------------------------------------------


def histories(n, n_u=3, n_p=2, n_nut=2, seed=0):
    r = np.random.default_rng(seed)
    return r.standard_normal((n, n_u)), r.standard_normal((n, n_p)), r.standard_normal((n, n_nut))


def test_sample_count_for_long_series():
    a, b, d = histories(2000)
    ds = build_sequences(a, b, d, 15, 1800)
    assert ds.x_train.shape == (1785, 15, 5)
    assert ds.y_train.shape == (1785, 2)
    assert ds.x_val.shape[0] == 2000 - 1815


def test_lookback_one_gives_current_step():
    a, b, d = histories(30)
    ds = build_sequences(a, b, d, 1, 20)
    assert ds.x_train.shape[1] == 1
    np.testing.assert_allclose(ds.x_scaler.inverse(ds.x_train[:, 0]), np.hstack([a, b])[1:20],
                               rtol=0, atol=1e-14)


def test_windows_match_index_enumeration():
    a, b, d = histories(60, seed=4)
    lookback, split = 5, 40
    ds = build_sequences(a, b, d, lookback, split)
    ab = np.hstack([a, b])
    xs, ys = ds.x_scaler, ds.y_scaler
    train_x, train_y, val_x, val_y = [], [], [], []
    for t in range(60):
        window = [xs.transform(ab[s]) for s in range(t - lookback + 1, t + 1)]
        if lookback <= t < split:
            train_x.append(window)
            train_y.append(ys.transform(d[t]))
        elif t >= split + lookback:
            val_x.append(window)
            val_y.append(ys.transform(d[t]))
    np.testing.assert_array_equal(ds.x_train, np.array(train_x))
    np.testing.assert_array_equal(ds.y_train, np.array(train_y))
    np.testing.assert_array_equal(ds.x_val, np.array(val_x))
    np.testing.assert_array_equal(ds.y_val, np.array(val_y))
    # no validation window reaches back into the training range
    assert ds.val_steps.min() - lookback + 1 >= split


def test_scalers_ignore_validation_rows():
    a, b, d = histories(50)
    ds1 = build_sequences(a, b, d, 3, 30)
    a2, b2, d2 = a.copy(), b.copy(), d.copy()
    a2[30:] *= 100
    d2[30:] += 7
    ds2 = build_sequences(a2, b2, d2, 3, 30)
    np.testing.assert_array_equal(ds1.x_scaler.mean, ds2.x_scaler.mean)
    np.testing.assert_array_equal(ds1.y_scaler.std, ds2.y_scaler.std)
    np.testing.assert_array_equal(ds1.x_train, ds2.x_train)


def test_short_history_rejected():
    a, b, d = histories(5)
    with pytest.raises(ValueError):
        build_sequences(a, b, d, 5, 5)


# --- forward passes -------------------------------------------------------------------


def zeroed(net):
    net.set_flat(np.zeros(net.n_params()))
    return net


@pytest.mark.parametrize("kind", ["mlp", "lstm"])
def test_zero_weights_give_zero_output(kind, rng):
    net = zeroed(make_network(kind, 4, 3))
    y = net.predict(rng.standard_normal((6, 5, 4)))
    np.testing.assert_array_equal(y, 0.0)


def test_mlp_identity_first_layer_zero_deeper():
    net = zeroed(make_network("mlp", 4, 2))
    net.params["W1"][:4, :4] = np.eye(4)
    np.testing.assert_array_equal(net.predict(np.ones((3, 4))), 0.0)


def test_layer_shapes():
    lstm = make_network("lstm", 20, 10)
    shapes = {k: v.shape for k, v in lstm.params.items()}
    assert shapes == {"W1": (20, 256), "U1": (64, 256), "b1": (256,),
                      "W2": (64, 128), "U2": (32, 128), "b2": (128,),
                      "W3": (32, 32), "b3": (32,), "W4": (32, 10), "b4": (10,)}
    mlp = make_network("mlp", 20, 10)
    assert [mlp.params[k].shape for k in mlp.names] == [(20, 128), (128,), (128, 64), (64,),
                                                         (64, 10), (10,)]
    assert mlp.dropout == 0.2
    np.testing.assert_array_equal(lstm.params["b1"][64:128], 1.0)
    with pytest.raises(ValueError):
        make_network("transformer", 2, 2)


def test_single_cell_lstm_hand_computed():
    def sig(z):
        return 1.0 / (1.0 + math.exp(-z))

    wi, wf, wg, wo = 0.5, -0.3, 0.8, 0.2
    ui, uf, ug, uo = 0.1, 0.4, -0.6, 0.7
    bi, bf, bg, bo = 0.05, 1.0, -0.1, 0.3
    xs = [0.9, -1.4]
    W = np.array([[wi, wf, wg, wo]])
    U = np.array([[ui, uf, ug, uo]])
    b = np.array([bi, bf, bg, bo])
    hs, _ = _lstm_forward(np.array(xs).reshape(1, 2, 1), W, U, b)
    h = c = 0.0
    expected = []
    for x in xs:
        i = sig(wi * x + ui * h + bi)
        f = sig(wf * x + uf * h + bf)
        g = math.tanh(wg * x + ug * h + bg)
        o = sig(wo * x + uo * h + bo)
        c = f * c + i * g
        h = o * math.tanh(c)
        expected.append(h)
    np.testing.assert_allclose(hs[0, :, 0], expected, rtol=0, atol=1e-12)


def test_inference_is_repeatable_and_dropout_free(rng):
    x = rng.standard_normal((8, 4, 3))
    for kind in ("mlp", "lstm"):
        net = make_network(kind, 3, 2, seed=1)
        assert net.predict(x).tobytes() == net.predict(x).tobytes()
    mlp = make_network("mlp", 3, 2, seed=1)
    y_train, _ = mlp.forward(x, train=True, rng=np.random.default_rng(0))
    assert not np.allclose(y_train, mlp.predict(x))


def test_lstm_rejects_flat_input():
    with pytest.raises(ValueError):
        make_network("lstm", 3, 2).predict(np.zeros((4, 3)))


# --- gradient checks ------------------------------------------------------------------


def gradient_check(net, loss_fn, grads):
    theta = net.flat().copy()
    analytic = np.concatenate([grads[k].ravel() for k in net.names])
    numeric = np.empty_like(theta)
    eps = 1e-6
    for j in range(theta.size):
        t = theta.copy()
        t[j] += eps
        net.set_flat(t)
        up = loss_fn()
        t[j] -= 2 * eps
        net.set_flat(t)
        down = loss_fn()
        numeric[j] = (up - down) / (2 * eps)
    net.set_flat(theta)
    return np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric)


def test_mlp_gradient_check(rng):
    net = MlpNet.init(3, 2, rng, hidden=(6, 5))
    for k in ("b1", "b2"):
        net.params[k][:] = rng.uniform(0.1, 0.3, net.params[k].shape)
    x = rng.standard_normal((7, 3))
    target = rng.standard_normal((7, 2))
    mask = (rng.random((7, 6)) < 0.8) / 0.8
    y, cache = net.forward(x, train=True, mask=mask)
    _, dy = mse_loss(y, target)
    grads = net.backward(cache, dy)

    def loss():
        return mse_loss(net.forward(x, train=True, mask=mask)[0], target)[0]

    assert gradient_check(net, loss, grads) <= 1e-6


def test_lstm_gradient_check(rng):
    net = LstmNet.init(3, 2, rng, units=(4, 3), dense=5)
    net.params["b3"][:] = 0.2
    x = rng.standard_normal((5, 4, 3))
    target = rng.standard_normal((5, 2))
    y, cache = net.forward(x)
    _, dy = mse_loss(y, target)
    grads = net.backward(cache, dy)

    def loss():
        return mse_loss(net.forward(x)[0], target)[0]

    assert gradient_check(net, loss, grads) <= 1e-6


# --- training -------------------------------------------------------------------------


def small_dataset(kind="mlp", n=120, lookback=3, seed=0):
    a, b, d = histories(n, 2, 1, 2, seed)
    return build_sequences(a, b, d, lookback, int(0.8 * n))


def test_zero_learning_rate_keeps_parameters():
    ds = small_dataset()
    net = make_network("mlp", 3, 2, seed=3)
    before = net.flat().copy()
    _, rep = train(net, ds, epochs=3, batch=16, lr=0.0, seed=1)
    np.testing.assert_array_equal(net.flat(), before)
    assert rep.train_mse[0] == rep.train_mse[-1]
    assert len(rep.train_mse) == len(rep.val_mse) == rep.final_epoch == 3


@pytest.mark.parametrize("kind", ["mlp", "lstm"])
def test_seeded_training_is_bit_identical(kind):
    ds = small_dataset()
    runs = []
    for _ in range(2):
        net = make_network(kind, 3, 2, seed=5)
        _, rep = train(net, ds, epochs=3, batch=16, lr=1e-3, seed=9)
        runs.append((net.flat().tobytes(), rep.train_mse, rep.val_mse))
    assert runs[0] == runs[1]


def test_divergence_aborts_with_epoch():
    ds = small_dataset()
    ds.y_train[0, 0] = np.inf
    with pytest.raises(TrainingDiverged, match="epoch 1"):
        train(make_network("mlp", 3, 2), ds, epochs=2, batch=16, lr=1e-3)


def test_mlp_learns_linear_map_to_noise_floor():
    r = np.random.default_rng(21)
    n, sigma = 1500, 0.1
    x = r.standard_normal((n, 4))
    w = r.standard_normal((4, 2))
    noise = sigma * r.standard_normal((n, 2))
    d = x @ w + noise
    ds = build_sequences(x[:, :2], x[:, 2:], d, 1, 1200)
    floor = float(np.mean((noise[ds.val_steps] / ds.y_scaler.std) ** 2))
    net = make_network("mlp", 4, 2, seed=0)
    _, rep = train(net, ds, epochs=200, batch=64, lr=3e-4, seed=0)
    assert rep.val_mse[-1] < 1.5 * floor


def test_constant_target_is_reproduced():
    r = np.random.default_rng(2)
    a = r.standard_normal((80, 2))
    b = r.standard_normal((80, 1))
    d0 = np.array([0.3, -1.2])
    ds = build_sequences(a, b, np.tile(d0, (80, 1)), 1, 60)
    net = make_network("mlp", 3, 2, seed=0)
    _, rep = train(net, ds, epochs=100, batch=16, lr=1e-3, seed=0)
    closure = NeuralClosure(net, ds.x_scaler, ds.y_scaler, 1)
    # the target scaler maps d0 to 0, so the error is the raw network output
    tol = 4.0 * np.sqrt(rep.train_mse[-1])
    assert rep.train_mse[-1] < 1e-4
    np.testing.assert_allclose(predict_d(closure, np.hstack([a, b])[-1]), d0, rtol=0, atol=tol)


def test_zero_weight_model_predicts_target_mean(rng):
    ds = small_dataset()
    net = zeroed(make_network("lstm", 3, 2))
    closure = NeuralClosure(net, ds.x_scaler, ds.y_scaler, 3)
    np.testing.assert_allclose(closure.predict(rng.standard_normal((5, 3))), ds.y_scaler.mean)


def test_prediction_needs_full_lookback(rng):
    ds = small_dataset()
    closure = NeuralClosure(make_network("lstm", 3, 2), ds.x_scaler, ds.y_scaler, 3)
    with pytest.raises(WarmupError):
        closure.predict(rng.standard_normal((2, 3)))
    assert closure.predict(rng.standard_normal((7, 3))).shape == (2,)


def ar2_dataset(n=500, lookback=4, seed=0):
    """d_t depends on the two previous inputs only, invisible to a current-step model."""
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, 2))
    d = np.zeros((n, 1))
    d[2:, 0] = 0.9 * x[1:-1, 0] - 0.6 * x[:-2, 1]
    return build_sequences(x[:, :1], x[:, 1:], d, lookback, int(0.8 * n))


def ar2_validation_mse():
    ds = ar2_dataset()
    out = {}
    for kind in ("mlp", "lstm"):
        net = make_network(kind, 2, 1, seed=0)
        _, rep = train(net, ds, epochs=60, batch=32, lr=3e-3, seed=0)
        out[kind] = rep.val_mse[-1]
    return out


def test_recurrent_model_beats_current_step_model_on_ar2():
    mse = ar2_validation_mse()
    assert mse["lstm"] < mse["mlp"]
    assert mse["lstm"] < 0.5


@pytest.mark.parametrize("kind", ["mlp", "lstm"])
def test_save_load_round_trip(tmp_path, kind, rng):
    ds = small_dataset()
    net = make_network(kind, 3, 2, seed=2)
    closure = NeuralClosure(net, ds.x_scaler, ds.y_scaler, 3, dict(HYPERPARAMETERS[kind]))
    save_closure(tmp_path / "c", closure)
    back = load_closure(tmp_path / "c")
    assert back.kind == kind and back.lookback == 3
    assert back.hyper == HYPERPARAMETERS[kind]
    h = rng.standard_normal((4, 3))
    assert back.predict(h).tobytes() == closure.predict(h).tobytes()
    with pytest.raises(FileExistsError):
        save_closure(tmp_path / "c", closure)


def test_training_csv_and_log(tmp_path):
    ds = small_dataset()
    stream = io.StringIO()
    _, rep = train(make_network("mlp", 3, 2), ds, epochs=4, batch=16, lr=1e-3, log_every=2,
                   stream=stream)
    assert stream.getvalue().count("epoch=") == 2
    write_training_csv(tmp_path / "t.csv", rep)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_mse,val_mse" and len(lines) == 5
