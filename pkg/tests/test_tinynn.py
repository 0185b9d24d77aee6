import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

import gradcheck
from gazeforge import tinynn as nn

N_INST = 20


def _block(rng, E, hidden):
    store = nn.ParamStore()
    nn.init_attention_block(store, rng, "b.", E, hidden)
    # move biases and norms off their trivial init so every gradient is exercised
    for k, v in store.params.items():
        v += rng.normal(0, 0.3, v.shape)
    return store


def test_dense_examples():
    x = np.array([[1.0, 2.0, 3.0]])
    assert np.array_equal(nn.dense(x, np.eye(3), np.zeros(3)).data, x)
    assert nn.dense(np.array([2.0]), np.array([[3.0]]), np.array([1.0])).data.tolist() == [7.0]
    with pytest.raises(nn.ShapeError):
        nn.dense(np.ones(3), np.ones((2, 2)))


def test_dense_gradients():
    rng = np.random.default_rng(0)
    for k in range(N_INST):
        n, i, o = (int(x) for x in rng.integers(1, 5, 3))
        arrays = {"x": rng.normal(size=(n, i)), "W": rng.normal(size=(i, o)), "b": rng.normal(size=o)}
        gradcheck.check(lambda p: gradcheck.project(nn.dense(p["x"], p["W"], p["b"]), np.random.default_rng(k)),
                        arrays)


def test_softmax_examples():
    assert np.allclose(nn.softmax(np.full(6, 2.5)).data, 1 / 6, atol=1e-15)
    e = math.e
    assert np.allclose(nn.softmax(np.array([1.0, 2.0])).data, [1 / (1 + e), e / (1 + e)], rtol=1e-14)
    big = nn.softmax(np.array([1000.0, 1001.0])).data
    assert np.all(np.isfinite(big))


@given(hnp.arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_prop_softmax(v, c):
    p = nn.softmax(v).data
    assert abs(p.sum() - 1) < 1e-12 and np.all(p > 0)
    assert np.max(np.abs(nn.softmax(v + c).data - p)) < 1e-12


def test_elementwise_gradients():
    rng = np.random.default_rng(1)
    ops = {
        "tanh": nn.tanh, "sigmoid": nn.sigmoid, "exp": nn.exp, "softplus": nn.softplus,
        "log_sigmoid": nn.log_sigmoid, "gelu": nn.gelu, "softmax": nn.softmax, "log_softmax": nn.log_softmax,
        "log": lambda t: nn.log(t * t + 0.5), "l2norm": lambda t: nn.l2norm(t, -1),
        "mean": lambda t: nn.mean(t, axis=0, keepdims=True), "div": lambda t: t / (t * t + 1.0),
        "swap": lambda t: nn.swapaxes(t, 0, 1), "reshape": lambda t: nn.reshape(t, (-1,)),
        "getitem": lambda t: t[np.array([0, 0, 1]), np.array([1, 0, 1])],
        "concat": lambda t: nn.concat([t, t * 2.0], axis=-1), "stack": lambda t: nn.stack([t, t * t], 0),
        "floor": lambda t: nn.floor_at(t, 0.1),
    }
    for name, op in ops.items():
        for k in range(N_INST):
            x = rng.normal(size=(3, 4))
            if name == "floor":
                x = x[np.abs(x - 0.1) > 1e-3].reshape(-1)[:6] if np.sum(np.abs(x - 0.1) > 1e-3) >= 6 else x + 1
            gradcheck.check(lambda p: gradcheck.project(op(p["x"]), np.random.default_rng(k)), {"x": x})


def test_layer_norm_gradients():
    rng = np.random.default_rng(2)
    for k in range(N_INST):
        E = int(rng.integers(2, 6))
        arrays = {"x": rng.normal(size=(3, E)), "g": rng.normal(size=E), "b": rng.normal(size=E)}
        gradcheck.check(lambda p: gradcheck.project(nn.layer_norm(p["x"], p["g"], p["b"]),
                                                    np.random.default_rng(k)), arrays)


def test_attention_single_item_and_duplicates():
    rng = np.random.default_rng(3)
    p = nn.ParamStore()
    nn.init_attention_block(p, rng, "", 4, 8)
    t = p.tensors()
    assert nn.attention_weights(rng.normal(size=(1, 4)), t).tolist() == [[1.0]]
    row = rng.normal(size=4)
    Y = nn.attention_block(np.stack([row, row, rng.normal(size=4)]), t).data
    assert np.array_equal(Y[0], Y[1])
    with pytest.raises(nn.ShapeError):
        nn.attention_block(np.ones((2, 5)), t)


def test_attention_mask_ignores_padding():
    rng = np.random.default_rng(4)
    t = _block(rng, 4, 6).tensors()
    X = rng.normal(size=(3, 4))
    padded = np.vstack([X, rng.normal(size=(2, 4))])
    full = nn.attention_block(X, t, "b.").data
    masked = nn.attention_block(padded, t, "b.", key_mask=np.array([1, 1, 1, 0, 0])).data[:3]
    assert np.allclose(full, masked, atol=1e-12)


def test_attention_gradients():
    rng = np.random.default_rng(5)
    for k in range(N_INST):
        # width 2 makes layer norm emit +-1 rows, leaving query gradients at rounding-noise level
        E, m = int(rng.integers(3, 6)), int(rng.integers(1, 4))
        store = _block(rng, E, 3)
        arrays = dict(store.params)
        arrays["X"] = rng.normal(size=(2, m, E))
        mask = np.ones((2, m))
        mask[1, -1] = 0 if m > 1 else 1
        gradcheck.check(lambda p: gradcheck.project(nn.attention_block(p["X"], p, "b.", key_mask=mask),
                                                    np.random.default_rng(k)), arrays)


def test_rnn_examples():
    b = np.array([0.3, -0.2])
    assert np.allclose(nn.rnn_step(np.ones(2), np.ones(3), np.zeros((2, 2)), np.zeros((3, 2)), b).data, np.tanh(b))
    assert np.array_equal(nn.rnn_step(np.zeros(2), np.zeros(3), np.ones((2, 2)), np.ones((3, 2)), np.zeros(2)).data,
                          np.zeros(2))
    with pytest.raises(nn.ShapeError):
        nn.rnn_step(np.zeros(3), np.zeros(3), np.ones((2, 2)), np.ones((3, 2)), np.zeros(2))


def test_rnn_unrolled_gradients():
    rng = np.random.default_rng(6)
    for k in range(N_INST):
        H, I = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        xs = rng.normal(size=(3, 2, I))
        arrays = {"Wh": rng.normal(size=(H, H)), "Wx": rng.normal(size=(I, H)), "b": rng.normal(size=H),
                  "h0": rng.normal(size=(2, H))}

        def run(p):
            h = p["h0"]
            for x in xs:
                h = nn.rnn_step(h, x, p["Wh"], p["Wx"], p["b"])
            return gradcheck.project(h, np.random.default_rng(k))
        gradcheck.check(run, arrays)


def test_broadcast_and_matmul_gradients():
    rng = np.random.default_rng(7)
    for k in range(N_INST):
        arrays = {"a": rng.normal(size=(2, 3, 4)), "b": rng.normal(size=(4, 2)), "v": rng.normal(size=4),
                  "c": rng.normal(size=(1, 2))}

        def f(p):
            y = nn.matmul(p["a"], p["b"]) * p["c"] - p["c"]
            z = nn.matmul(p["v"], p["b"]) + nn.reshape(nn.matmul(p["a"], p["v"]), (2, 3, 1))
            return gradcheck.project(y + z, np.random.default_rng(k))
        gradcheck.check(f, arrays)


def test_adam_zero_grad_and_first_step():
    s = nn.ParamStore()
    s.add("w", np.array([1.5, -2.0]))
    before = s.params["w"].copy()
    nn.adam_update(s, {"w": np.zeros(2)}, lr=0.01)
    assert np.array_equal(s.params["w"], before)
    s = nn.ParamStore()
    s.add("w", np.array(0.5))
    g, lr, eps = 0.3, 0.01, 1e-8
    nn.adam_update(s, {"w": np.array(g)}, lr=lr, eps=eps)
    # bias-corrected first step: m_hat = g, v_hat = g^2
    assert float(s.params["w"]) == pytest.approx(0.5 - lr * g / (abs(g) + eps), abs=1e-15)
    with pytest.raises(nn.ShapeError):
        nn.adam_update(s, {"w": np.zeros(3)})


def test_adam_determinism_and_checkpoint(tmp_path):
    def run():
        rng = np.random.default_rng(0)
        s = nn.ParamStore()
        s.glorot("W", (3, 2), rng)
        for _ in range(5):
            nn.adam_update(s, {"W": rng.normal(size=(3, 2))})
        return s
    a, b = run(), run()
    assert np.array_equal(a.params["W"], b.params["W"]) and a.step == 5
    a.save(tmp_path / "p.json")
    c = nn.ParamStore.load(tmp_path / "p.json")
    assert c.step == 5
    for d in ("params", "m", "v"):
        assert np.array_equal(getattr(c, d)["W"], getattr(a, d)["W"])
    g = np.ones((3, 2))
    nn.adam_update(a, {"W": g})
    nn.adam_update(c, {"W": g})
    assert np.array_equal(a.params["W"], c.params["W"])


def test_param_store_shapes():
    s = nn.ParamStore()
    s.zeros("a", (2, 3))
    with pytest.raises(KeyError):
        s.add("a", 1.0)
    assert s.m["a"].shape == s.v["a"].shape == (2, 3) and s.n_params() == 6
    cp = s.copy()
    cp.params["a"] += 1
    assert s.params["a"].sum() == 0


def test_backward_accumulates_shared_nodes():
    x = nn.param(np.array([2.0]))
    y = x * x + x
    y.backward()
    assert x.grad.tolist() == [5.0]
    assert x.detach().requires_grad is False
