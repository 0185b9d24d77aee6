import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

import gradcheck
import oracles
from gazeforge import tinynn as nn
from gazeforge.model.losses import (COMPONENTS, LossWeights, NonFiniteLossError, adv_losses, adv_losses_from_logits,
                                    categorical_cross_entropy, check_finite, compose_losses, dtw_distance, dtw_loss,
                                    dtw_path, kl_divergence, mse, mutual_information, mutual_information_loss)


def dist(rng, n=6, zeros=False):
    p = rng.random(n) ** 3
    if zeros:
        p[rng.random(n) < 0.3] = 0.0
        if p.sum() == 0:
            p[0] = 1.0
    return p / p.sum()


simplex = hnp.arrays(np.float64, 6, elements=st.floats(0, 1)).filter(lambda a: a.sum() > 1e-3).map(
    lambda a: a / a.sum())


# KL / CE


def test_kl_examples():
    u = np.full(6, 1 / 6)
    assert kl_divergence(u, u) == 0.0
    assert kl_divergence(np.eye(6)[0], u) == pytest.approx(math.log(6), abs=1e-12)
    assert kl_divergence(np.eye(6)[0], u) == pytest.approx(oracles.kl_scalar(np.eye(6)[0], u), abs=1e-12)


def test_kl_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        P, Q = dist(rng, zeros=True), dist(rng, zeros=True)
        assert kl_divergence(P, Q) == pytest.approx(oracles.kl_scalar(P, Q), rel=1e-10, abs=1e-12)
    P, Q = np.stack([dist(rng) for _ in range(4)]), np.stack([dist(rng) for _ in range(4)])
    assert kl_divergence(P, Q) == pytest.approx(np.mean([oracles.kl_scalar(p, q) for p, q in zip(P, Q)]))


@given(simplex, simplex)
def test_prop_kl_nonnegative(P, Q):
    assert kl_divergence(P, Q) >= -1e-15
    # exact when nothing is floored; otherwise bounded by the mass the floor adds
    if P.min() >= 1e-12:
        assert abs(kl_divergence(P, P)) <= 1e-15
    assert -1e-15 <= kl_divergence(P, P) <= 6e-12


def test_ce_examples():
    assert categorical_cross_entropy([2, 4], np.eye(6)[[2, 4]]) == pytest.approx(0.0, abs=1e-12)
    assert categorical_cross_entropy([0, 5, 3], np.full((3, 6), 1 / 6)) == pytest.approx(math.log(6), abs=1e-9)
    rng = np.random.default_rng(1)
    D = np.stack([dist(rng) for _ in range(7)])
    y = rng.integers(0, 6, 7)
    assert categorical_cross_entropy(y, D) == pytest.approx(oracles.ce_scalar(y, D), rel=1e-12)
    perm = rng.permutation(7)
    assert categorical_cross_entropy(y[perm], D[perm]) == pytest.approx(categorical_cross_entropy(y, D), rel=1e-14)
    assert categorical_cross_entropy(np.eye(6)[y], D) == pytest.approx(categorical_cross_entropy(y, D), rel=1e-14)


# adversarial


def test_adv_examples():
    ld, lg = adv_losses(np.full(4, 0.5), np.full(4, 0.5))
    assert ld == pytest.approx(2 * math.log(2), abs=1e-12)
    assert adv_losses([0.5], [1 - 1e-12])[1] == pytest.approx(0.0, abs=1e-11)
    rng = np.random.default_rng(2)
    r, f = rng.normal(size=5), rng.normal(size=5)
    ld, lg = adv_losses(1 / (1 + np.exp(-r)), 1 / (1 + np.exp(-f)))
    ld2, lg2 = adv_losses_from_logits(r, f)
    assert float(ld2.data) == pytest.approx(ld, rel=1e-12) and float(lg2.data) == pytest.approx(lg, rel=1e-12)


# trajectory


def test_mse_examples():
    assert mse([[0.0, 1.0]], [[0.0, 1.0]]) == 0.0
    assert mse([0.0], [2.0]) == 4.0
    rng = np.random.default_rng(3)
    for _ in range(100):
        n = int(rng.integers(1, 8))
        a, b = rng.normal(size=(n, 2)), rng.normal(size=(n, 2))
        assert abs(mse(a, b) - oracles.mse_scalar(a, b)) <= 1e-12
    with pytest.raises(ValueError):
        mse(np.zeros((2, 2)), np.zeros((3, 2)))


def test_dtw_examples():
    x = np.array([[0.0, 0.0], [1.0, 2.0], [3.0, 1.0]])
    assert dtw_distance(x, x) == 0.0
    assert dtw_distance([[0, 0]], [[3, 4]]) == 5.0
    with pytest.raises(ValueError):
        dtw_distance(np.zeros((0, 2)), x)


def test_dtw_matches_brute_force():
    rng = np.random.default_rng(4)
    for _ in range(300):
        n, m = (int(v) for v in rng.integers(1, 7, 2))
        x, y = rng.normal(size=(n, 2)), rng.normal(size=(m, 2))
        d = dtw_distance(x, y)
        assert abs(d - oracles.brute_dtw(x, y)) <= 1e-9
        path = dtw_path(x, y)
        assert path[0] == (0, 0) and path[-1] == (n - 1, m - 1)
        assert all(0 <= b[0] - a[0] <= 1 and 0 <= b[1] - a[1] <= 1 and b != a for a, b in zip(path, path[1:]))
        assert abs(oracles.path_cost(x, y, path) - d) <= 1e-9


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.just(2)), elements=st.floats(-5, 5)),
       hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.just(2)), elements=st.floats(-5, 5)))
def test_prop_dtw_symmetric_and_zero(x, y):
    assert dtw_distance(x, y) == pytest.approx(dtw_distance(y, x), abs=1e-12)
    assert dtw_distance(x, x) == 0.0
    if dtw_distance(x, y) == 0.0:
        # zero distance means every aligned pair coincides
        assert all(np.array_equal(x[i], y[j]) for i, j in dtw_path(x, y))


# mutual information


def test_mi_cases():
    rng = np.random.default_rng(5)
    X, Y = rng.random((10_000, 3)), rng.random((10_000, 2))
    assert abs(mutual_information(X, Y)) <= 0.05
    assert abs(mutual_information(X, X) - math.log(4)) <= 0.05
    assert mutual_information_loss(np.ones((20, 3)), Y[:20]) == 0.0
    assert mutual_information_loss(X[:5], Y[:5]) == 0.0
    assert mutual_information_loss(X[:50], X[:50]) == pytest.approx(-mutual_information(X[:50], X[:50]))


def test_mi_matches_counting_oracle():
    rng = np.random.default_rng(6)
    for _ in range(20):
        z = rng.normal(size=200)
        w = z + rng.normal(0, 1.0, 200)
        bz = np.argsort(np.argsort(z, kind="stable"), kind="stable") * 4 // 200
        bw = np.argsort(np.argsort(w, kind="stable"), kind="stable") * 4 // 200
        # 1-D inputs: the principal coordinate is the centred value up to sign, which binning by rank may mirror
        got = mutual_information(z, w)
        want = oracles.plugin_mi(bz.tolist(), bw.tolist())
        assert got == pytest.approx(want, abs=1e-12) or got == pytest.approx(
            oracles.plugin_mi(bz.tolist(), (3 - bw).tolist()), abs=1e-12)


# composition


def _components(rng):
    return {k: float(rng.normal()) ** 2 * 3 for k in COMPONENTS}


def recompute(c, w):
    """Independent re-summation of every derived term."""
    L_rec = w.alpha_rec * c["L_mse"] + w.beta_rec * c["L_dtw"]
    L_aux_cls = c["L_cls_aux"] + w.lam * c["kl_pq"]
    L_traj = c["L_cls_traj"] + L_rec + w.beta_sup * c["kl_qp"]
    L_ars = L_traj + L_aux_cls + c["L_mi"]
    L_G = c["L_reg"] + c["L_adv"]
    if w.dedup:
        L_D = L_ars + c["L_cat_ce"]
    else:
        L_D = L_ars + c["L_cat_ce"] + c["L_dtw"] + c["L_mse"] + L_rec
    return dict(L_rec=L_rec, L_aux_cls=L_aux_cls, L_traj=L_traj, L_ars_total=L_ars, L_G_total=L_G,
                L_D_total=L_D, L_total=L_D + L_G)


def test_compose_zero_and_literal():
    r = compose_losses({k: 0.0 for k in COMPONENTS})
    assert all(v == 0.0 for v in r.as_dict().values())
    w = LossWeights(1, 1, 1, 1)
    c = {k: 1.0 for k in COMPONENTS}
    r = compose_losses(c, w)
    assert r.L_rec == 2 and r.L_traj == 4 and r.L_aux_cls == 2 and r.L_ars_total == 7
    assert r.L_D_total == r.L_ars_total + r.L_cat_ce + r.L_dtw + r.L_mse + r.L_rec == 12
    assert compose_losses(c, LossWeights(1, 1, 1, 1, dedup=True)).L_D_total == 8


def test_compose_identities_random():
    rng = np.random.default_rng(7)
    for _ in range(200):
        c = _components(rng)
        w = LossWeights(*rng.random(4), dedup=bool(rng.integers(2)))
        r = compose_losses(c, w).as_dict()
        for k, v in recompute(c, w).items():
            assert r[k] == v


def test_compose_errors():
    c = {k: 1.0 for k in COMPONENTS}
    c["kl_qp"] = float("nan")
    with pytest.raises(NonFiniteLossError) as ei:
        compose_losses(c)
    assert ei.value.term == "kl_qp"
    with pytest.raises(NonFiniteLossError):
        check_finite({"a": 1.0, "b": float("inf")})
    with pytest.raises(ValueError):
        LossWeights(lam=-1)


# gradients


def test_loss_gradients():
    rng = np.random.default_rng(8)
    for k in range(20):
        B = int(rng.integers(1, 5))
        y = rng.integers(0, 6, B)
        arrays = {"a": rng.normal(size=(B, 6)), "b": rng.normal(size=(B, 6)), "x": rng.normal(size=(B, 3, 2)),
                  "r": rng.normal(size=B), "f": rng.normal(size=B)}
        xt = rng.normal(size=(B, 3, 2))
        gradcheck.check(lambda p: categorical_cross_entropy(y, nn.softmax(p["a"])), arrays, only=["a"])
        gradcheck.check(lambda p: kl_divergence(nn.softmax(p["a"]), nn.softmax(p["b"])), arrays, only=["a", "b"])
        gradcheck.check(lambda p: mse(xt, p["x"]), arrays, only=["x"])
        gradcheck.check(lambda p: adv_losses_from_logits(p["r"], p["f"])[0], arrays, only=["r", "f"])
        gradcheck.check(lambda p: adv_losses_from_logits(p["r"], p["f"])[1], arrays, only=["f"])
        gradcheck.check(lambda p: adv_losses(nn.sigmoid(p["r"]), nn.sigmoid(p["f"]))[0], arrays, only=["r", "f"])


def test_dtw_gradient_path_frozen():
    rng = np.random.default_rng(9)
    for _ in range(20):
        B, N = int(rng.integers(1, 4)), int(rng.integers(2, 6))
        xt, xh = rng.normal(size=(B, N, 2)), rng.normal(size=(B, N, 2))
        lengths = rng.integers(1, N + 1, B)
        t = nn.param(xh)
        loss = dtw_loss(xt, t, lengths)
        loss.backward()
        paths = [dtw_path(xt[b, :lengths[b]], xh[b, :lengths[b]]) for b in range(B)]
        assert float(loss.data) == pytest.approx(
            np.mean([dtw_distance(xt[b, :lengths[b]], xh[b, :lengths[b]]) for b in range(B)]), abs=1e-12)

        def frozen():
            return sum(oracles.path_cost(xt[b], xh[b], paths[b]) for b in range(B)) / B
        num = oracles.numeric_grad(frozen, xh)
        assert oracles.rel_error(t.grad, num) < 1e-4
