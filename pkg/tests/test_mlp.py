import math
from dataclasses import replace

import numpy as np
import pytest

from oracles import central_gradient, relative_error
from terracast import mlp
from terracast.mlp import MlpWeights, TrainConfig, forward, grad, loss, predict


def random_weights(rng, q, q2, K, scale=1.0):
    return MlpWeights(rng.normal(0, scale, (q2, q)), rng.normal(0, scale, q2),
                      rng.normal(0, scale, (K, q2)))


def naive_forward(w, x):
    out = []
    for k in range(w.K):
        s = 0.0
        for i in range(w.q2):
            a = sum(x[m] * w.w1[i, m] for m in range(w.q)) + w.b1[i]
            s += w.w2[k, i] / (1.0 + math.exp(-a))
        out.append(s)
    return out


def flat(w):
    return np.concatenate([w.w1.ravel(), w.b1, w.w2.ravel()])


def unflat(v, q, q2, K):
    return MlpWeights(v[:q2 * q].reshape(q2, q), v[q2 * q:q2 * q + q2], v[q2 * q + q2:].reshape(K, q2))


def test_zero_weights_give_zero_output():
    w = MlpWeights(np.zeros((3, 4)), np.zeros(3), np.zeros((2, 3)))
    assert forward(w, np.ones(4)).tolist() == [0.0, 0.0]


def test_half_activation():
    w = MlpWeights(np.zeros((5, 2)), np.zeros(5), np.ones((3, 5)))
    assert forward(w, np.array([3.0, -1.0])).tolist() == [2.5, 2.5, 2.5]


def test_forward_matches_naive(rng):
    w = random_weights(rng, 5, 4, 3)
    x = rng.normal(size=5)
    np.testing.assert_allclose(forward(w, x), naive_forward(w, x), rtol=0, atol=1e-12)


def test_forward_width_check(rng):
    with pytest.raises(ValueError):
        forward(random_weights(rng, 5, 4, 3), np.ones(4))


def test_loss_zero_weights_is_sample_count(rng):
    X = rng.normal(size=(7, 3))
    y = rng.integers(1, 4, 7)
    assert loss(MlpWeights(np.zeros((2, 3)), np.zeros(2), np.zeros((3, 2))), (X, y)) == 7.0


def test_loss_perfect_outputs():
    # hidden unit saturates at 1, output row k picks class k
    w = MlpWeights(np.zeros((1, 1)), [1000.0], [[1.0], [0.0]])
    assert loss(w, (np.zeros((3, 1)), np.array([1, 1, 1]))) == 0.0


def test_loss_term_by_term(rng):
    w = random_weights(rng, 4, 3, 3)
    X = rng.normal(size=(12, 4))
    y = rng.integers(1, 4, 12)
    want = sum((float(k + 1 == c) - o) ** 2
               for x, c in zip(X, y) for k, o in enumerate(naive_forward(w, x)))
    assert loss(w, (X, y)) == pytest.approx(want, rel=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    q, q2, K = 4, 3, 2
    w = random_weights(rng, q, q2, K)
    X = rng.normal(size=(20, q))
    y = rng.integers(1, K + 1, 20)
    fd = central_gradient(lambda v: loss(unflat(v, q, q2, K), (X, y)), flat(w))
    assert relative_error(flat(grad(w, (X, y))), fd) <= 1e-6


def test_output_gradient_by_hand():
    # w2 = 0: outputs vanish, residual is the target, so dL/dw2 = -2 Y^T A
    w = MlpWeights(np.array([[1.0, -1.0], [0.5, 0.5]]), np.array([0.0, 0.1]), np.zeros((2, 2)))
    X = np.array([[1.0, 0.0], [0.0, 1.0]])
    y = np.array([1, 2])
    A = 1.0 / (1.0 + np.exp(-(X @ w.w1.T + w.b1)))
    g = grad(w, (X, y))
    np.testing.assert_allclose(g.w2, -2.0 * np.eye(2).T @ A, atol=1e-15)
    # w1 and b1 receive nothing while w2 is zero
    assert not g.w1.any() and not g.b1.any()


def test_gradient_doubles_with_duplicated_samples(rng):
    w = random_weights(rng, 3, 2, 2)
    X = rng.normal(size=(6, 3))
    y = rng.integers(1, 3, 6)
    once = flat(grad(w, (X, y)))
    twice = flat(grad(w, (np.vstack([X, X]), np.concatenate([y, y]))))
    np.testing.assert_allclose(twice, 2 * once, rtol=1e-14)


def test_predict_rule(rng):
    w = MlpWeights(np.zeros((1, 1)), [0.0], [[0.2], [1.8]])
    assert predict(w, np.zeros(1)) == 2
    tie = MlpWeights(np.zeros((1, 1)), [0.0], [[1.0], [1.0]])
    assert predict(tie, np.zeros(1)) == 1
    w = random_weights(rng, 3, 2, 3)
    X = rng.normal(size=(10, 3))
    # with the biased unit saturated, adding c to that column shifts all outputs by c
    w_aug = MlpWeights(np.vstack([w.w1, np.zeros(3)]), np.append(w.b1, 1e3),
                       np.hstack([w.w2, np.zeros((3, 1))]))
    shifted = MlpWeights(w_aug.w1, w_aug.b1, w_aug.w2 + np.array([[0, 0, 5.0]] * 3))
    assert np.array_equal(predict(w_aug, X), predict(shifted, X))


def _separable(rng, n=80):
    X = rng.normal(size=(n, 2))
    y = np.where(X[:, 0] + X[:, 1] > 0, 2, 1)
    return X, y


@pytest.mark.parametrize("optimizer", ["cg", "gd"])
def test_linearly_separable(rng, optimizer):
    X, y = _separable(rng)
    cfg = TrainConfig(q2=2, restarts=2, patience=50, learning_rate=1.0, optimizer=optimizer)
    w, _ = mlp.train((X, y), cfg, K=2)
    assert np.mean(predict(w, X) == y) >= 0.95


def test_xor_cells(rng):
    centers = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=float)
    labels = np.array([1, 2, 2, 1])
    idx = np.repeat(np.arange(4), 40)
    X = centers[idx] + rng.normal(0, 0.05, (idx.size, 2))
    y = labels[idx]
    cfg = TrainConfig(q2=4, restarts=5, patience=100, max_epochs=3000, validation_fraction=0.2)
    w, _ = mlp.train((X, y), cfg, K=2)
    assert np.mean(predict(w, X) == y) >= 0.95
    # any linear rule labels at most 3 of the 4 cells correctly: enumerate every
    # dichotomy of the cells that a half-plane can realize
    best = 0
    for a in np.linspace(-1, 1, 41):
        for b in np.linspace(-1, 1, 41):
            for c in np.linspace(-2, 2, 81):
                cls = np.where(centers @ [a, b] + c > 0, 2, 1)
                best = max(best, int(np.sum(cls == labels)))
    assert best == 3


def test_early_stopping_snapshot_is_best(rng):
    X, y = _separable(rng, 60)
    y[:12] = 3 - y[:12]  # noisy labels so validation loss turns around
    cfg = TrainConfig(q2=6, restarts=3, patience=15, max_epochs=400)
    _, rep = mlp.train((X, y), cfg, K=2)
    for r in rep.restarts:
        assert r.best_val_loss == min(r.val_history)
        assert r.val_history[r.best_epoch] == r.best_val_loss
        assert r.epochs_run < cfg.max_epochs  # patience stopped it
    ok = [r.best_val_loss for r in rep.restarts if not r.failed]
    assert rep.best_val_loss == min(ok)


def test_training_is_deterministic(rng):
    X, y = _separable(rng, 50)
    cfg = TrainConfig(q2=3, restarts=2, seed=4)
    w1, r1 = mlp.train((X, y), cfg, K=2)
    w2, r2 = mlp.train((X, y), cfg, K=2)
    assert w1 == w2 and r1 == r2


def test_parallel_restarts_match_serial(rng):
    X, y = _separable(rng, 50)
    cfg = TrainConfig(q2=3, restarts=3, seed=2)
    assert mlp.train((X, y), cfg, K=2)[0] == mlp.train((X, y), cfg, K=2, jobs=2)[0]


# line searches amplify rounding differences, so conjugate gradients gets a looser bound
@pytest.mark.parametrize("optimizer, rtol", [("gd", 1e-8), ("cg", 1e-5)])
def test_permuting_training_rows_keeps_trajectory(rng, optimizer, rtol):
    X, y = _separable(rng, 40)
    Y = np.eye(2)[y - 1]
    w0 = mlp.init_weights(2, 3, 2, np.random.default_rng(0))
    perm = rng.permutation(30)
    kw = dict(max_epochs=60, patience=59, learning_rate=0.5, optimizer=optimizer)
    a, ra = mlp.descend(w0, X[:30], Y[:30], X[30:], Y[30:], **kw)
    b, rb = mlp.descend(w0, X[:30][perm], Y[:30][perm], X[30:], Y[30:], **kw)
    # summation order differs, so agreement is up to rounding
    np.testing.assert_allclose(flat(a), flat(b), rtol=rtol, atol=1e-10)
    assert ra.best_val_loss == pytest.approx(rb.best_val_loss, rel=rtol)
    if optimizer == "gd":
        np.testing.assert_allclose(ra.val_history, rb.val_history, rtol=rtol)


def test_divergence_is_reported(rng):
    X, y = _separable(rng, 40)
    X = X * 1e3
    cfg = TrainConfig(q2=3, restarts=2, learning_rate=1e6, optimizer="gd", max_epochs=200,
                      patience=150)
    outcomes = mlp.train_all((X, y), cfg, K=2)
    assert all(w is None and rep.failed for w, rep in outcomes)
    with pytest.raises(mlp.TrainError):
        mlp.train((X, y), cfg, K=2)


def test_too_few_samples():
    with pytest.raises(mlp.TrainError):
        mlp.train((np.zeros((5, 2)), np.ones(5, dtype=int)), TrainConfig(), K=2)


@pytest.mark.parametrize("kwargs", [dict(patience=2000), dict(q2=0), dict(restarts=0),
                                    dict(learning_rate=0.0), dict(validation_fraction=1.0),
                                    dict(optimizer="adam")])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_init_scaling():
    w = mlp.init_weights(16, 4, 3, np.random.default_rng(1))
    assert np.all(np.abs(w.w1) <= 0.5 / 4) and np.all(np.abs(w.w2) <= 0.5 / 2)


def test_save_load_bit_exact(tmp_path, rng):
    w = random_weights(rng, 6, 5, 3)
    path = tmp_path / "m.mlp"
    mlp.save(w, path)
    back = mlp.load(path)
    X = rng.normal(size=(9, 6))
    assert back == w and np.array_equal(forward(back, X), forward(w, X))
    assert path.read_text().splitlines()[:4] == ["terracast-mlp 1", "q 6", "q2 5", "K 3"]
