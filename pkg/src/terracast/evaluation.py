"""Map prediction, misclassification rates and validation-driven selection."""
from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence, Union

import numpy as np

from . import mlp, polyreg
from .features import (EmptySampleError, EnvEncoder, NeighborhoodSpec,
                       build_training_set, eligible_mask, feature_matrix,
                       frequency_map, frontier_pixels)
from .grid import MISSING, Dataset, LandCoverGrid

Model = Union[polyreg.PolyregParams, mlp.MlpWeights]

# reference whole-map overall errors (percent) on two real landscapes; context only
STUDY_OVERALL_ERROR = {
    ("garrotxes", "polyreg"): 27.2, ("garrotxes", "mlp"): 25.7, ("garrotxes", "gis"): 27.2,
    ("alta_alpujarra", "polyreg"): 9.0, ("alta_alpujarra", "mlp"): 11.28,
    ("alta_alpujarra", "gis"): 21.1,
}

# class id -> RGB; ids beyond the table cycle through it, missing cells are black
PALETTE = np.array([
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40), (148, 103, 189),
    (140, 86, 75), (227, 119, 194), (127, 127, 127), (188, 189, 34), (23, 190, 207),
], dtype=np.uint8)


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

def load_model(path: str | os.PathLike) -> Model:
    with open(path) as fh:
        magic = fh.readline().split()[:1]
    if magic == [polyreg.MAGIC]:
        return polyreg.load(path)
    if magic == [mlp.MAGIC]:
        return mlp.load(path)
    raise ValueError(f"{path}: unrecognized model file")


def save_model(model: Model, path: str | os.PathLike) -> None:
    if isinstance(model, polyreg.PolyregParams):
        polyreg.save(model, path)
    else:
        mlp.save(model, path)


def _model_width(model: Model) -> int:
    return model.q


def predict_map(model: Model, d: Dataset, from_date: int, spec: NeighborhoodSpec | None = None,
                frontier_only: bool = False, frontier_order: int = 4) -> LandCoverGrid:
    """Predict the cover of date ``from_date + 1`` from date ``from_date``.

    With ``frontier_only`` the non-frontier pixels keep their ``from_date``
    class. Missing pixels stay missing.
    """
    spec = spec or model.spec
    if spec is None:
        raise ValueError("no neighborhood spec given and none stored in the model")
    encoder = model.encoder
    mask = eligible_mask(d)
    if encoder is None:
        r, c = np.nonzero(mask)
        encoder = EnvEncoder.fit(d.env_layers, r, c)
    width = 2 * d.class_count + encoder.width
    if width != _model_width(model):
        raise ValueError(f"model expects {_model_width(model)} features, dataset gives {width}")
    source = d.covers[from_date]
    out = np.where(mask, source.cells, MISSING)
    todo = mask & frontier_pixels(source, frontier_order) if frontier_only else mask
    rows, cols = np.nonzero(todo)
    if rows.size:
        X = feature_matrix(d, from_date + 1, rows, cols, spec, encoder,
                           freq=frequency_map(source, d.class_count, spec))
        pred = polyreg.predict(model, X) if isinstance(model, polyreg.PolyregParams) \
            else mlp.predict(model, X)
        out[rows, cols] = pred
    return LandCoverGrid(out, date_label=f"pred{from_date + 1}", nodata_value=source.nodata_value)


# ---------------------------------------------------------------------------
# Misclassification
# ---------------------------------------------------------------------------

@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, cols: predicted class

    @property
    def evaluated_pixels(self) -> int:
        return int(self.counts.sum())


class Misclassification(NamedTuple):
    confusion: ConfusionMatrix
    per_class_error: np.ndarray  # NaN where the class is absent from the true map
    overall_error: float

    @property
    def defined(self) -> np.ndarray:
        return ~np.isnan(self.per_class_error)


def misclassification(true_map: LandCoverGrid, pred_map: LandCoverGrid,
                      mask: np.ndarray | None = None,
                      class_count: int | None = None) -> Misclassification:
    """Per-class error over pixels truly of that class, and the overall error."""
    t = true_map.cells if isinstance(true_map, LandCoverGrid) else np.asarray(true_map)
    p = pred_map.cells if isinstance(pred_map, LandCoverGrid) else np.asarray(pred_map)
    if t.shape != p.shape:
        raise ValueError(f"map shapes differ: {t.shape} vs {p.shape}")
    sel = (t != MISSING) & (p != MISSING)
    if mask is not None:
        sel &= np.asarray(mask, dtype=bool)
    if not sel.any():
        raise ValueError("no pixels to evaluate")
    K = class_count or int(max(t[sel].max(), p[sel].max()))
    counts = np.zeros((K, K), dtype=np.int64)
    np.add.at(counts, (t[sel] - 1, p[sel] - 1), 1)
    support = counts.sum(axis=1)
    wrong = support - np.diag(counts)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(support > 0, wrong / np.maximum(support, 1), np.nan)
    overall = 1.0 - np.trace(counts) / counts.sum()
    return Misclassification(ConfusionMatrix(counts), per_class, float(overall))


def class_frequencies(cover: LandCoverGrid, class_count: int) -> np.ndarray:
    cells = cover.cells[cover.cells != MISSING]
    return np.bincount(cells - 1, minlength=class_count)[:class_count] / max(cells.size, 1)


def format_error_table(result: Misclassification, class_names: Sequence[str],
                       frequencies: np.ndarray | None = None) -> str:
    lines = [f"{'class':<20} {'freq':>7} {'error':>8}"]
    rare = False
    for k, name in enumerate(class_names):
        freq = "" if frequencies is None else f"{100 * frequencies[k]:6.1f}%"
        err = "undef" if np.isnan(result.per_class_error[k]) \
            else f"{100 * result.per_class_error[k]:7.2f}%"
        mark = ""
        if frequencies is not None and frequencies[k] < 0.05:
            mark, rare = " *", True
        lines.append(f"{name:<20} {freq:>7} {err:>8}{mark}")
    lines.append(f"{'overall':<20} {'':>7} {100 * result.overall_error:7.2f}%")
    if rare:
        lines.append("* class covers under 5% of the evaluated area")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Selection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HyperGrid:
    neighborhood_sizes: tuple[int, ...] = (1, 2, 3, 4, 5, 7, 9)
    eps_values: tuple[float, ...] = (0.001, 0.01, 0.1, 1.0, 10.0)
    q2_values: tuple[int, ...] = (8, 30)

    def __post_init__(self):
        if not (self.neighborhood_sizes and self.eps_values and self.q2_values):
            raise ValueError("hyperparameter lists must be non-empty")


@dataclass
class SelectionReport:
    method: str
    best: dict | None
    table: list[dict]
    model: Model | None = None
    flags: list[str] = field(default_factory=list)

    @property
    def best_error(self) -> float:
        return self.best["error"] if self.best else float("nan")


def _evaluation_mask(d: Dataset, source: int, mode: str, order: int) -> np.ndarray:
    mask = eligible_mask(d)
    if mode == "frontier":
        mask &= frontier_pixels(d.covers[source], order)
    elif mode != "all":
        raise ValueError("evaluation mask must be 'all' or 'frontier'")
    return mask


def _overlap_flags(estimation, validation, test) -> list[str]:
    flags = []
    if tuple(validation) in [tuple(t) for t in estimation]:
        flags.append("validation transition overlaps the estimation transitions")
    if test is not None and (tuple(test) == tuple(validation)
                             or tuple(test) in [tuple(t) for t in estimation]):
        flags.append("test transition overlaps the training/validation transitions; "
                     "its error is biased")
    return flags


def _score(model, d, validation, frontier_only, frontier_order, eval_mask) -> float:
    pred = predict_map(model, d, validation[0], frontier_only=frontier_only,
                       frontier_order=frontier_order)
    return misclassification(d.covers[validation[1]], pred, eval_mask, d.class_count).overall_error


def _polyreg_candidate(args):
    d, est, val, s, eps, opts, eval_mask = args
    row = {"size": s, "eps": eps, "error": float("nan"), "status": "ok",
           "iterations": 0, "converged": False}
    try:
        samples = build_training_set(d, est, NeighborhoodSpec(s, "counts"),
                                     frontier_only=opts["frontier_only"],
                                     frontier_order=opts["frontier_order"],
                                     max_samples=opts["max_samples"], seed=opts["seed"])
        params, rep = polyreg.fit(samples, eps, tol=opts["tol"], max_iter=opts["max_iter"])
        row.update(iterations=rep.iterations, converged=rep.converged)
        row["error"] = _score(params, d, val, opts["frontier_only"], opts["frontier_order"],
                              eval_mask)
    except (polyreg.FitError, EmptySampleError, np.linalg.LinAlgError) as exc:
        row["status"] = f"failed: {exc}"
        params = None
    return row, params


def _mlp_candidate(args):
    d, est, val, s, q2, cfg, opts, eval_mask = args
    row = {"size": s, "q2": q2, "error": float("nan"), "status": "ok", "restart": -1,
           "restart_errors": []}
    try:
        samples = build_training_set(d, est, NeighborhoodSpec(s, "exp_distance"),
                                     frontier_only=opts["frontier_only"],
                                     frontier_order=opts["frontier_order"],
                                     max_samples=opts["max_samples"], seed=opts["seed"])
        outcomes = mlp.train_all(samples, replace(cfg, q2=q2))
    except (mlp.TrainError, EmptySampleError) as exc:
        row["status"] = f"failed: {exc}"
        return row, None
    best_model, errors = None, []
    for r, (w, _) in enumerate(outcomes):
        if w is None:
            errors.append(float("nan"))
            continue
        err = _score(w, d, val, opts["frontier_only"], opts["frontier_order"], eval_mask)
        errors.append(err)
        if best_model is None or err < row["error"]:
            row["error"], row["restart"], best_model = err, r, w
    row["restart_errors"] = errors
    if best_model is None:
        row["status"] = "failed: all restarts diverged"
    return row, best_model


def _run(fn, jobs_args, jobs: int):
    if jobs <= 1 or len(jobs_args) <= 1:
        return [fn(a) for a in jobs_args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, jobs_args))


def _pick(table, models, second_key):
    ok = [n for n, row in enumerate(table) if row["status"] == "ok"]
    if not ok:
        return None, None
    best = min(ok, key=lambda n: (table[n]["error"], table[n]["size"], table[n][second_key]))
    return table[best], models[best]


def select_polyreg(d: Dataset, estimation_transitions, validation_transition,
                   grid: HyperGrid = HyperGrid(), *, frontier_only: bool = False,
                   frontier_order: int = 4, evaluation: str = "all",
                   max_samples: int | None = None, seed: int = 0, tol: float = 1e-8,
                   max_iter: int = 100, jobs: int = 1, test_transition=None) -> SelectionReport:
    """Fit every (size, eps) candidate on the estimation transitions and keep
    the one with the lowest validation overall error (ties: smaller size, then
    smaller eps)."""
    if d.dates < 3:
        raise ValueError("selection needs at least 3 dates")
    est = [tuple(t) for t in estimation_transitions]
    val = tuple(validation_transition)
    eval_mask = _evaluation_mask(d, val[0], evaluation, frontier_order)
    opts = dict(frontier_only=frontier_only, frontier_order=frontier_order,
                max_samples=max_samples, seed=seed, tol=tol, max_iter=max_iter)
    args = [(d, est, val, s, float(e), opts, eval_mask)
            for s in grid.neighborhood_sizes for e in grid.eps_values]
    results = _run(_polyreg_candidate, args, jobs)
    table = [r for r, _ in results]
    best, model = _pick(table, [m for _, m in results], "eps")
    return SelectionReport("polyreg", best, table, model,
                           _overlap_flags(est, val, test_transition))


def select_mlp(d: Dataset, estimation_transitions, validation_transition,
               grid: HyperGrid = HyperGrid(), cfg: mlp.TrainConfig = mlp.TrainConfig(), *,
               frontier_only: bool = False, frontier_order: int = 4, evaluation: str = "all",
               max_samples: int | None = None, seed: int = 0, jobs: int = 1,
               test_transition=None) -> SelectionReport:
    """Train every (size, q2) candidate with ``cfg.restarts`` restarts and keep
    the single network with the lowest validation overall error."""
    if d.dates < 3:
        raise ValueError("selection needs at least 3 dates")
    est = [tuple(t) for t in estimation_transitions]
    val = tuple(validation_transition)
    eval_mask = _evaluation_mask(d, val[0], evaluation, frontier_order)
    opts = dict(frontier_only=frontier_only, frontier_order=frontier_order,
                max_samples=max_samples, seed=seed)
    args = [(d, est, val, s, q2, cfg, opts, eval_mask)
            for s in grid.neighborhood_sizes for q2 in grid.q2_values]
    results = _run(_mlp_candidate, args, jobs)
    table = [r for r, _ in results]
    best, model = _pick(table, [m for _, m in results], "q2")
    return SelectionReport("mlp", best, table, model,
                           _overlap_flags(est, val, test_transition))


def write_selection_csv(report: SelectionReport, path: str | os.PathLike) -> None:
    second = "eps" if report.method == "polyreg" else "q2"
    extra = ["iterations", "converged"] if report.method == "polyreg" else ["restart", "restart_errors"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["size", second, "error", "status"] + extra)
        for row in report.table:
            values = [row["size"], row[second], repr(row["error"]), row["status"]]
            for key in extra:
                v = row[key]
                values.append(";".join(repr(e) for e in v) if isinstance(v, list) else v)
            writer.writerow(values)


def format_selection_summary(report: SelectionReport) -> str:
    lines = [f"method: {report.method}", f"candidates: {len(report.table)}"]
    failed = sum(row["status"] != "ok" for row in report.table)
    lines.append(f"failed candidates: {failed}")
    if report.best is None:
        lines.append("no candidate succeeded")
    else:
        second = "eps" if report.method == "polyreg" else "q2"
        lines.append(f"selected: size={report.best['size']} {second}={report.best[second]}")
        lines.append(f"validation overall error: {report.best['error']:.4f}")
    lines += [f"warning: {flag}" for flag in report.flags]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def render_ppm(cover: LandCoverGrid, path: str | os.PathLike, scale: int = 1) -> None:
    """Write a binary (P6) pixmap with one fixed color per class."""
    cells = cover.cells
    rgb = np.zeros(cells.shape + (3,), dtype=np.uint8)
    valid = cells != MISSING
    rgb[valid] = PALETTE[(cells[valid] - 1) % len(PALETTE)]
    if scale > 1:
        rgb = rgb.repeat(scale, axis=0).repeat(scale, axis=1)
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())
