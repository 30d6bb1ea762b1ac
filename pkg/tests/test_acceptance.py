"""Acceptance criteria, each run at its stated tolerance.

Every test records a single ``criterion N PASS|FAIL ...`` line that is
printed in the terminal summary (and immediately with ``-s``).
"""
import time

import numpy as np
import pytest

import conftest
from oracles import central_gradient, central_jacobian, relative_error
from terracast import evaluation as ev
from terracast import mlp, polyreg, synth
from terracast.cli import run as cli_run
from terracast.features import (NeighborhoodSpec, build_training_set, frequency_map,
                                frontier_pixels)
from terracast.grid import MISSING, LandCoverGrid, save_dataset, write_grid

# pinned fixtures -------------------------------------------------------------------

LINEAR = synth.GeneratorSpec(rows=60, cols=60, K=4, dates=4, dynamics="linear_logit",
                             env_layer_count=1, noise=0.15, seed=7)
LINEAR_SPLIT = dict(estimation=[(0, 1)], validation=(1, 2), test=(2, 3))

XOR = synth.GeneratorSpec(rows=60, cols=60, K=3, dates=5, dynamics="xor_gate",
                          env_layer_count=2, noise=0.1, seed=11)
XOR_SPLIT = dict(estimation=[(0, 1), (1, 2)], validation=(2, 3), test=(3, 4))
XOR_GRID = ev.HyperGrid(neighborhood_sizes=(1, 2), q2_values=(8, 30))
XOR_TRAIN = mlp.TrainConfig(seed=11)

RADIUS2_SEEDS = range(100, 110)


def radius2_spec(seed):
    return synth.GeneratorSpec(rows=60, cols=60, K=3, dates=4, dynamics="linear_logit",
                               effective_radius=2, env_layer_count=1, noise=0.05,
                               persistence=0.5, neighbor_weight=0.2, seed=seed)


# artifacts kept for the determinism rerun (criterion 8)
ARTIFACTS: dict[str, dict[str, bytes]] = {}


def record(number, ok, detail):
    line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def snapshot(report, d, tmp_path, tag, test=None):
    """Bytes of the selection table, model file and test-map prediction."""
    out = tmp_path / tag
    out.mkdir()
    ev.write_selection_csv(report, out / "selection.csv")
    ev.save_model(report.model, out / "model")
    files = {"selection.csv": (out / "selection.csv").read_bytes(),
             "model": (out / "model").read_bytes()}
    if test is not None:
        pred = ev.predict_map(report.model, d, test[0])
        write_grid(pred, out / "pred.asc")
        files["pred.asc"] = (out / "pred.asc").read_bytes()
    return files


# 1 ------------------------------------------------------------------------------------

def test_criterion_1_derivatives():
    start = time.perf_counter()
    worst = {"polyreg grad": 0.0, "polyreg hess": 0.0, "mlp grad": 0.0}
    rng = np.random.default_rng(2024)
    for _ in range(20):
        K, q_env, N = int(rng.integers(2, 5)), int(rng.integers(0, 4)), int(rng.integers(10, 61))
        p = K + q_env
        prev = rng.integers(0, K, N)
        X = np.hstack([np.eye(K)[prev], rng.integers(0, 6, (N, K)).astype(float),
                       rng.normal(size=(N, q_env))])
        y = rng.integers(1, K + 1, N)
        eps = float(rng.uniform(0, 1))
        v = rng.normal(0, 0.3, polyreg.param_count(K, p))

        def f(u):
            return polyreg.penalized_loglik(polyreg.PolyregParams.from_flat(u, K, p), (X, y), eps)

        def g(u):
            return polyreg.penalized_grad(polyreg.PolyregParams.from_flat(u, K, p), (X, y), eps)

        H = polyreg.penalized_hessian(polyreg.PolyregParams.from_flat(v, K, p), (X, y), eps)
        worst["polyreg grad"] = max(worst["polyreg grad"], relative_error(g(v), central_gradient(f, v)))
        worst["polyreg hess"] = max(worst["polyreg hess"], relative_error(H, central_jacobian(g, v)))
    for _ in range(20):
        q, q2, K, N = (int(rng.integers(1, 7)), int(rng.integers(1, 6)), int(rng.integers(2, 4)),
                       int(rng.integers(5, 31)))
        X = rng.normal(size=(N, q))
        y = rng.integers(1, K + 1, N)
        size = q2 * q + q2 + K * q2

        def unflat(u):
            return mlp.MlpWeights(u[:q2 * q].reshape(q2, q), u[q2 * q:q2 * q + q2],
                                  u[q2 * q + q2:].reshape(K, q2))

        v = rng.normal(0, 1, size)
        gw = mlp.grad(unflat(v), (X, y))
        got = np.concatenate([gw.w1.ravel(), gw.b1, gw.w2.ravel()])
        fd = central_gradient(lambda u: mlp.loss(unflat(u), (X, y)), v)
        worst["mlp grad"] = max(worst["mlp grad"], relative_error(got, fd))
    elapsed = time.perf_counter() - start
    ok = (worst["polyreg grad"] <= 1e-6 and worst["mlp grad"] <= 1e-6
          and worst["polyreg hess"] <= 1e-4 and elapsed < 30)
    detail = ", ".join(f"{k} rel err {v:.1e}" for k, v in worst.items())
    record(1, ok, f"{detail}; {elapsed:.1f} s")


# 2 ------------------------------------------------------------------------------------

def test_criterion_2_newton_contract():
    start = time.perf_counter()
    rng = np.random.default_rng(77)
    rows = []
    for _ in range(10):
        K, q_env, N = int(rng.integers(2, 6)), int(rng.integers(0, 4)), int(rng.integers(50, 400))
        prev = rng.integers(0, K, N)
        X = np.hstack([np.eye(K)[prev], rng.integers(0, 9, (N, K)).astype(float),
                       rng.normal(size=(N, q_env))])
        y = np.where(rng.random(N) < 0.6, prev + 1, rng.integers(1, K + 1, N))
        eps = float(10 ** rng.uniform(-3, 1))
        params, rep = polyreg.fit((X, y), eps, K=K)
        trace = rep.objective_trace
        monotone = all(b >= a for a, b in zip(trace, trace[1:]))
        gnorm = float(np.max(np.abs(polyreg.penalized_grad(params, (X, y), eps))))
        rows.append((monotone, rep.converged and gnorm <= 1e-8 and rep.iterations <= 100,
                     rep.iterations))
    elapsed = time.perf_counter() - start
    ok = all(m and c for m, c, _ in rows) and elapsed < 30
    record(2, ok, f"{sum(m for m, _, _ in rows)}/10 monotone, {sum(c for _, c, _ in rows)}/10 "
                  f"converged (max {max(i for _, _, i in rows)} iterations); {elapsed:.1f} s")


# 3 ------------------------------------------------------------------------------------

def test_criterion_3_linear_regime(tmp_path):
    start = time.perf_counter()
    d = synth.generate(LINEAR)
    s = LINEAR_SPLIT
    rep = ev.select_polyreg(d, s["estimation"], s["validation"], test_transition=s["test"])
    pred = ev.predict_map(rep.model, d, s["test"][0])
    err = ev.misclassification(d.covers[s["test"][1]], pred).overall_error
    bayes = synth.bayes_error(LINEAR, d, s["test"][0])
    elapsed = time.perf_counter() - start
    ARTIFACTS["c3"] = snapshot(rep, d, tmp_path, "c3", s["test"])
    ok = err <= bayes + 0.05 and elapsed < 120
    record(3, ok, f"polyreg test error {err:.4f} vs Bayes {bayes:.4f} (bound {bayes + 0.05:.4f}), "
                  f"selected s={rep.best['size']} eps={rep.best['eps']}; {elapsed:.1f} s")


# 4 ------------------------------------------------------------------------------------

def test_criterion_4_nonlinearity(tmp_path):
    start = time.perf_counter()
    d = synth.generate(XOR)
    s = XOR_SPLIT
    src, dst = s["test"]
    rep_mlp = ev.select_mlp(d, s["estimation"], s["validation"], XOR_GRID, XOR_TRAIN,
                            test_transition=s["test"])
    err_mlp = ev.misclassification(d.covers[dst], ev.predict_map(rep_mlp.model, d, src)).overall_error
    rep_poly = ev.select_polyreg(d, s["estimation"], s["validation"], XOR_GRID,
                                 test_transition=s["test"])
    # best polyreg candidate on the test map, over the whole grid
    poly_errs = []
    for size in XOR_GRID.neighborhood_sizes:
        samples = build_training_set(d, s["estimation"], NeighborhoodSpec(size))
        for eps in XOR_GRID.eps_values:
            params, _ = polyreg.fit(samples, eps)
            poly_errs.append(ev.misclassification(
                d.covers[dst], ev.predict_map(params, d, src)).overall_error)
    best_poly = min(poly_errs)
    bayes = synth.bayes_error(XOR, d, src)
    elapsed = time.perf_counter() - start
    ARTIFACTS["c4-mlp"] = snapshot(rep_mlp, d, tmp_path, "c4m", s["test"])
    ARTIFACTS["c4-poly"] = snapshot(rep_poly, d, tmp_path, "c4p", s["test"])
    ok = err_mlp <= best_poly - 0.05 and err_mlp <= bayes + 0.05 and elapsed < 240
    record(4, ok, f"MLP test error {err_mlp:.4f} (s={rep_mlp.best['size']}, "
                  f"q2={rep_mlp.best['q2']}), best polyreg {best_poly:.4f}, "
                  f"Bayes {bayes:.4f}; {elapsed:.1f} s")


# 5 ------------------------------------------------------------------------------------

def test_criterion_5_protocol(tmp_path):
    start = time.perf_counter()
    grid = ev.HyperGrid()
    pairs = {(s, e) for s in grid.neighborhood_sizes for e in grid.eps_values}
    grid_ok = (9, 10.0) in pairs and (1, 0.1) in pairs and {8, 30} <= set(grid.q2_values)
    selected = []
    for seed in RADIUS2_SEEDS:
        spec = radius2_spec(seed)
        d = synth.generate(spec)
        rep = ev.select_polyreg(d, [(0, 1)], (1, 2))
        selected.append(rep.best["size"])
        ARTIFACTS[f"c5-{seed}"] = snapshot(rep, d, tmp_path, f"c5-{seed}")
    hits = selected.count(2)
    elapsed = time.perf_counter() - start
    record(5, grid_ok and hits >= 8,
           f"default grids {'contain' if grid_ok else 'MISS'} the reference settings; "
           f"s=2 selected in {hits}/10 replications {selected}; {elapsed:.1f} s")


# 6 ------------------------------------------------------------------------------------

def _brute_counts(cells, K, s, weighted):
    rows, cols = cells.shape
    out = np.zeros((rows, cols, K))
    for i in range(rows):
        for j in range(cols):
            acc = [0.0] * K
            if cells[i, j] == MISSING:
                continue  # NODATA pixels keep an all-zero row
            for a in range(max(0, i - s), min(rows, i + s + 1)):
                for b in range(max(0, j - s), min(cols, j + s + 1)):
                    if (a, b) == (i, j) or cells[a, b] == MISSING:
                        continue
                    acc[cells[a, b] - 1] += np.exp(-np.hypot(a - i, b - j)) if weighted else 1.0
            tot = sum(acc)
            if weighted and tot > 0:
                acc = [v / tot for v in acc]
            out[i, j] = acc
    return out


def _brute_frontier(cells, r):
    rows, cols = cells.shape
    mask = np.zeros(cells.shape, bool)
    for i in range(rows):
        for j in range(cols):
            if cells[i, j] == MISSING:
                continue
            win = cells[max(0, i - r):i + r + 1, max(0, j - r):j + r + 1]
            mask[i, j] = bool(np.any((win != MISSING) & (win != cells[i, j])))
    return mask


def test_criterion_6_feature_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(606)
    worst, mismatches = 0.0, 0
    for _ in range(100):
        rows, cols = int(rng.integers(1, 31)), int(rng.integers(1, 31))
        K, s = int(rng.integers(2, 10)), int(rng.integers(1, 6))
        cells = rng.integers(1, K + 1, (rows, cols))
        cells[rng.random((rows, cols)) < 0.1] = MISSING
        cover = LandCoverGrid(cells)
        counts = frequency_map(cover, K, NeighborhoodSpec(s))
        mismatches += not np.array_equal(counts, _brute_counts(cells, K, s, False))
        weighted = frequency_map(cover, K, NeighborhoodSpec(s, "exp_distance"))
        worst = max(worst, float(np.max(np.abs(weighted - _brute_counts(cells, K, s, True)))))
        mismatches += not np.array_equal(frontier_pixels(cover, s), _brute_frontier(cells, s))
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and worst <= 1e-12 and elapsed < 30
    record(6, ok, f"100 grids: {mismatches} exact mismatches, weighted max abs diff "
                  f"{worst:.1e}; {elapsed:.1f} s")


# 7 ------------------------------------------------------------------------------------

def test_criterion_7_metric_arithmetic():
    true = np.array([[1, 1, 1, 1], [2, 2, 2, 3], [3, 3, 3, 3], [4, 4, 0, 1]])
    pred = np.array([[1, 2, 1, 1], [2, 2, 1, 3], [3, 1, 2, 3], [1, 4, 3, 1]])
    res = ev.misclassification(LandCoverGrid(true), LandCoverGrid(pred), class_count=4)
    # hand count: class 1 has 5 pixels with 1 wrong, class 2 3 with 1 wrong,
    # class 3 5 with 2 wrong, class 4 2 with 1 wrong; 15 pixels, 5 wrong
    want = [1 / 5, 1 / 3, 2 / 5, 1 / 2]
    ok = res.per_class_error.tolist() == want and res.overall_error == 1 - 10 / 15
    masked = ev.misclassification(LandCoverGrid(true), LandCoverGrid(pred),
                                  mask=np.eye(4, dtype=bool), class_count=4)
    # diagonal pixels (0,0)=1->1, (1,1)=2->2, (2,2)=3->2, (3,3)=1->1
    ok &= masked.per_class_error[:3].tolist() == [0.0, 0.0, 1.0]
    ok &= bool(np.isnan(masked.per_class_error[3])) and masked.overall_error == 0.25
    record(7, ok, f"per-class {np.round(res.per_class_error, 4).tolist()} overall "
                  f"{res.overall_error:.4f}; masked overall {masked.overall_error:.4f}")


# 8 ------------------------------------------------------------------------------------

def _cli_select(method, data, split, out, extra):
    est = ",".join(f"{a}:{b}" for a, b in split["estimation"])
    val = "{}:{}".format(*split["validation"])
    argv = [method, "--data", str(data), "--estimation", est, "--validation", val,
            "--jobs", "4", "--out", str(out)] + extra
    if "test" in split:
        argv += ["--test", "{}:{}".format(*split["test"])]
    assert cli_run(argv) == 0
    files = {"selection.csv": (out / "selection.csv").read_bytes()}
    files["model"] = (out / ("model.polyreg" if method == "select-polyreg" else "model.mlp")).read_bytes()
    if "test" in split:
        files["pred.asc"] = (out / "pred_{}.asc".format(split["test"][1])).read_bytes()
    return files


def test_criterion_8_determinism(tmp_path):
    needed = ["c3", "c4-mlp", "c4-poly"] + [f"c5-{s}" for s in RADIUS2_SEEDS]
    if any(k not in ARTIFACTS for k in needed):
        pytest.skip("criteria 3-5 must run first in the same session")
    start = time.perf_counter()
    same = {}
    d3 = tmp_path / "linear"
    save_dataset(synth.generate(LINEAR), d3)
    same["3"] = _cli_select("select-polyreg", d3, LINEAR_SPLIT, tmp_path / "r3", []) == ARTIFACTS["c3"]

    d4 = tmp_path / "xor"
    save_dataset(synth.generate(XOR), d4)
    sizes = ",".join(map(str, XOR_GRID.neighborhood_sizes))
    same["4 mlp"] = _cli_select(
        "select-mlp", d4, XOR_SPLIT, tmp_path / "r4m",
        ["--sizes", sizes, "--q2", ",".join(map(str, XOR_GRID.q2_values)),
         "--seed", str(XOR_TRAIN.seed)]) == ARTIFACTS["c4-mlp"]
    same["4 polyreg"] = _cli_select("select-polyreg", d4, XOR_SPLIT, tmp_path / "r4p",
                                    ["--sizes", sizes]) == ARTIFACTS["c4-poly"]
    c5 = []
    for seed in RADIUS2_SEEDS:
        d5 = tmp_path / f"r2-{seed}"
        save_dataset(synth.generate(radius2_spec(seed)), d5)
        split = dict(estimation=[(0, 1)], validation=(1, 2))
        c5.append(_cli_select("select-polyreg", d5, split, tmp_path / f"r5-{seed}", [])
                  == ARTIFACTS[f"c5-{seed}"])
    same["5"] = all(c5)
    elapsed = time.perf_counter() - start
    record(8, all(same.values()),
           "bit-identical reports, models and maps under --jobs 4: "
           + ", ".join(f"{k} {'yes' if v else 'NO'}" for k, v in same.items())
           + f"; {elapsed:.1f} s")
