"""``terracast`` command-line front end.

Every subcommand takes its settings from three places, highest priority first:
command-line flags, a ``key = value`` file given with ``--config``, and the
built-in defaults. Config keys are the long flag names without the leading
dashes (``max-iter`` or ``max_iter``). Each run writes ``run.log`` into its
output directory with the resolved settings (usable again as ``--config``),
package versions and timings.

Exit status: 0 on success, 1 on a usage error, 2 on a data or model error.
"""
from __future__ import annotations

import argparse
import os
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import _accel, evaluation, features, grid, mlp, polyreg, synth

PROG = "terracast"


class UsageError(Exception):
    pass


class DataError(Exception):
    """Input or model problem; ``module`` names where it came from."""

    def __init__(self, module: str, message: str):
        super().__init__(message)
        self.module = module


# ---------------------------------------------------------------------------
# Value parsers
# ---------------------------------------------------------------------------

def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in str(text).replace(" ", "").split(",") if v)


def _transition(text: str) -> tuple[int, int]:
    a, sep, b = str(text).strip().partition(":")
    if not sep:
        raise ValueError(f"transition must look like 'from:to', got {text!r}")
    return int(a), int(b)


def _transitions(text: str) -> tuple[tuple[int, int], ...]:
    return tuple(_transition(t) for t in str(text).replace(" ", "").split(",") if t)


def _show(value, parse=None) -> str:
    if parse is _transition:
        return f"{value[0]}:{value[1]}"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(f"{a}:{b}" for a, b in value)
        return ",".join(str(v) for v in value)
    return str(value)


# ---------------------------------------------------------------------------
# Subcommand option tables: name -> (parser, default, help)
# ---------------------------------------------------------------------------

REQUIRED = object()

_SAMPLING = {
    "frontier-only": (_bool, False, "train on frontier pixels only; others keep their class"),
    "frontier-order": (int, 4, "Chebyshev order used for the frontier mask"),
    "max-samples": (int, 0, "subsample the training set to this size (0 keeps all)"),
    "seed": (int, 0, "seed for subsampling and network initialization"),
}

_MLP_TRAINING = {
    "restarts": (int, 5, "independent random restarts"),
    "max-epochs": (int, 2000, "iteration cap per restart"),
    "patience": (int, 20, "stop after this many iterations without validation improvement"),
    "learning-rate": (float, 0.05, "step size for --optimizer gd"),
    "validation-fraction": (float, 0.25, "share of samples held out for early stopping"),
    "optimizer": (str, "cg", "cg (conjugate gradients) or gd (gradient descent)"),
}

_SELECTION = {
    "data": (str, REQUIRED, "dataset directory or manifest"),
    "estimation": (_transitions, REQUIRED, "estimation transitions, e.g. 0:1,1:2"),
    "validation": (_transition, REQUIRED, "validation transition, e.g. 2:3"),
    "test": (_transition, None, "optional test transition to report"),
    "sizes": (_ints, evaluation.HyperGrid().neighborhood_sizes, "neighborhood sizes to try"),
    "evaluation": (str, "all", "validation pixels: all or frontier"),
    "jobs": (int, 1, "parallel worker processes"),
    **_SAMPLING,
}

COMMANDS = {
    "gen": ("generate a synthetic dataset with a known transition law", {
        "spec": (str, None, "generator spec file (key = value)"),
        "rows": (int, None, "grid rows"),
        "cols": (int, None, "grid columns"),
        "K": (int, None, "number of classes"),
        "dates": (int, None, "number of dates"),
        "dynamics": (str, None, "linear_logit or xor_gate"),
        "effective-radius": (int, None, "neighborhood radius of the true law"),
        "env-layer-count": (int, None, "environmental layers"),
        "noise": (float, None, "label flip probability"),
        "seed": (int, None, "generator seed"),
    }),
    "features": ("write the predictor table for some transitions as CSV", {
        "data": (str, REQUIRED, "dataset directory or manifest"),
        "transitions": (_transitions, REQUIRED, "transitions, e.g. 0:1,1:2"),
        "size": (int, 1, "neighborhood size"),
        "weighting": (str, "counts", "counts or exp_distance"),
        **_SAMPLING,
    }),
    "train-polyreg": ("fit one penalized multinomial logit", {
        "data": (str, REQUIRED, "dataset directory or manifest"),
        "estimation": (_transitions, REQUIRED, "estimation transitions, e.g. 0:1"),
        "size": (int, 1, "neighborhood size"),
        "eps": (float, 0.1, "penalization parameter"),
        "tol": (float, 1e-8, "gradient sup-norm tolerance"),
        "max-iter": (int, 100, "Newton-Raphson iteration cap"),
        **_SAMPLING,
    }),
    "train-mlp": ("train one perceptron with restarts and early stopping", {
        "data": (str, REQUIRED, "dataset directory or manifest"),
        "estimation": (_transitions, REQUIRED, "estimation transitions, e.g. 0:1"),
        "size": (int, 1, "neighborhood size"),
        "q2": (int, 8, "hidden units"),
        "jobs": (int, 1, "parallel worker processes for restarts"),
        **_MLP_TRAINING,
        **_SAMPLING,
    }),
    "select-polyreg": ("choose neighborhood size and eps on a validation transition", {
        **_SELECTION,
        "eps": (_floats, evaluation.HyperGrid().eps_values, "penalization values to try"),
        "tol": (float, 1e-8, "gradient sup-norm tolerance"),
        "max-iter": (int, 100, "Newton-Raphson iteration cap"),
    }),
    "select-mlp": ("choose neighborhood size and hidden units on a validation transition", {
        **_SELECTION,
        "q2": (_ints, evaluation.HyperGrid().q2_values, "hidden-unit counts to try"),
        **_MLP_TRAINING,
    }),
    "predict": ("predict the next map with a saved model", {
        "data": (str, REQUIRED, "dataset directory or manifest"),
        "model": (str, REQUIRED, "model file"),
        "from-date": (int, REQUIRED, "index of the source date"),
        "frontier-only": (_bool, False, "predict frontier pixels only"),
        "frontier-order": (int, 4, "Chebyshev order used for the frontier mask"),
    }),
    "evaluate": ("compare a predicted map with the true map", {
        "true": (str, REQUIRED, "true land-cover grid"),
        "pred": (str, REQUIRED, "predicted land-cover grid"),
        "classes": (int, 0, "number of classes (0: infer from the maps)"),
        "mask": (str, None, "optional grid; only nonzero cells are evaluated"),
    }),
    "render": ("draw a land-cover grid as a binary PPM image", {
        "grid": (str, REQUIRED, "land-cover grid"),
        "scale": (int, 1, "pixel replication factor"),
    }),
}

# output directory is optional only where nothing has to be written
_OUT_OPTIONAL = {"evaluate"}
_INPUT_PATHS = ("data", "model", "true", "pred", "mask", "grid", "spec")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        sub = self.prog.partition(" ")[2]
        raise UsageError(f"{sub}: {message}" if sub else message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog=PROG, description="Land-cover transition prediction pipeline.")
    parser.add_argument("--version", action="version", version=f"{PROG} {_version()}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name, (help_text, options) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key = value settings file (flags take precedence)")
        if name in ("select-polyreg", "select-mlp"):
            p.add_argument("--grid", help="key = value file with sizes/eps/q2 lists")
        p.add_argument("--out", help="output directory" + (" (optional)" if name in _OUT_OPTIONAL else ""))
        for opt, (parse, default, text) in options.items():
            shown = "" if default is None or default is REQUIRED \
                else f" [default: {_show(default, parse)}]"
            req = " (required)" if default is REQUIRED else ""
            extra = dict(nargs="?", const="true") if parse is _bool else {}
            p.add_argument(f"--{opt}", dest=opt, default=None, metavar="VALUE",
                           help=text + req + shown, **extra)
    return parser


def _version() -> str:
    from . import __version__
    return __version__


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge flags, config/grid files and defaults into typed settings."""
    options = COMMANDS[command][1]
    raw: dict[str, str] = {}
    files = [args.config]
    if command.startswith("select-"):
        files.append(args.grid)
    for path in files:
        if path is None:
            continue
        if not Path(path).is_file():
            raise DataError("cli", f"config file not found: {path}")
        for key, value in grid.read_keyvalue(path):
            key = key.replace("_", "-")
            if key == "command":
                if value != command:
                    raise UsageError(f"{path}: written for '{value}', not '{command}'")
                continue
            if key == "out":
                raw.setdefault("out", value)
                continue
            if key not in options:
                raise UsageError(f"{path}: unknown setting '{key}' for {command}")
            raw[key] = value
    settings = {}
    for opt, (parse, default, _) in options.items():
        flag = getattr(args, opt, None)
        text = flag if flag is not None else raw.get(opt)
        if text is None:
            if default is REQUIRED:
                raise UsageError(f"{command}: --{opt} is required")
            settings[opt] = default
            continue
        try:
            settings[opt] = parse(text)
        except ValueError as exc:
            raise UsageError(f"{command}: bad value for --{opt}: {exc}") from None
    out = args.out if args.out is not None else raw.get("out")
    if out is None and command not in _OUT_OPTIONAL:
        raise UsageError(f"{command}: --out is required")
    settings["out"] = out
    for key in _INPUT_PATHS:
        path = settings.get(key)
        if key in options and path is not None and not Path(path).exists():
            raise DataError("cli", f"input not found: {path}")
    if settings.get("jobs", 1) < 1:
        raise UsageError(f"{command}: --jobs must be >= 1")
    return settings


# ---------------------------------------------------------------------------
# Run log
# ---------------------------------------------------------------------------

class RunLog:
    def __init__(self, command: str, settings: dict, argv):
        self.command, self.settings, self.argv = command, settings, list(argv)
        self.start = time.perf_counter()
        self.timings: list[tuple[str, float]] = []
        self.notes: list[str] = []

    def time(self, label: str):
        log = self

        class _Timer:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                log.timings.append((label, time.perf_counter() - self.t0))

        return _Timer()

    def text(self, status: int) -> str:
        import scipy

        lines = [f"# {PROG} run log", f"# argv: {' '.join(self.argv)}",
                 f"# exit status: {status}", "",
                 "# settings (reusable with --config)", f"command = {self.command}"]
        options = COMMANDS[self.command][1]
        for key, value in self.settings.items():
            if value is not None and key != "out":
                lines.append(f"{key} = {_show(value, options[key][0])}")
        lines += ["", "# versions",
                  f"# {PROG} {_version()}", f"# python {platform.python_version()}",
                  f"# numpy {np.__version__}", f"# scipy {scipy.__version__}",
                  f"# kernel backend {_accel.backend()}"]
        if _accel.HAVE_NUMBA:
            import numba
            lines.append(f"# numba {numba.__version__}")
        lines += ["", "# timings (seconds)"]
        lines += [f"# {label}: {sec:.3f}" for label, sec in self.timings]
        lines.append(f"# total: {time.perf_counter() - self.start:.3f}")
        lines += [f"# {note}" for note in self.notes]
        return "\n".join(lines) + "\n"

    def write(self, status: int) -> None:
        out = self.settings.get("out")
        if out is not None and Path(out).is_dir():
            (Path(out) / "run.log").write_text(self.text(status))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _load(path) -> grid.Dataset:
    d = grid.load_dataset(path)
    problems = grid.validate_dataset(d)
    if problems:
        raise DataError("grid", "; ".join(str(v) for v in problems))
    return d


def _max_samples(s):
    return s["max-samples"] or None


def _train_config(s, q2: int) -> mlp.TrainConfig:
    return mlp.TrainConfig(q2=q2, restarts=s["restarts"], max_epochs=s["max-epochs"],
                           patience=s["patience"], learning_rate=s["learning-rate"],
                           validation_fraction=s["validation-fraction"], seed=s["seed"],
                           optimizer=s["optimizer"])


def cmd_gen(s, log, out: Path) -> None:
    base = synth.GeneratorSpec.read(s["spec"]) if s["spec"] else synth.GeneratorSpec()
    overrides = {k.replace("-", "_"): v for k, v in s.items()
                 if k not in ("spec", "out") and v is not None}
    spec = replace(base, **overrides)
    with log.time("generate"):
        d = synth.generate(spec)
    grid.save_dataset(d, out)
    (out / "generator.cfg").write_text(spec.to_text())
    bayes = [synth.bayes_error(spec, d, t) for t in range(d.dates - 1)]
    (out / "bayes.txt").write_text("".join(f"{t}:{t + 1} {e!r}\n" for t, e in enumerate(bayes)))
    print(f"wrote {d.dates} dates of {spec.rows}x{spec.cols} to {out}")


def cmd_features(s, log, out: Path) -> None:
    d = _load(s["data"])
    spec = features.NeighborhoodSpec(s["size"], s["weighting"])
    with log.time("features"):
        samples = features.build_training_set(
            d, s["transitions"], spec, frontier_only=s["frontier-only"],
            frontier_order=s["frontier-order"], max_samples=_max_samples(s), seed=s["seed"])
    samples.to_csv(out / "features.csv")
    print(f"wrote {len(samples)} samples to {out / 'features.csv'}")


def cmd_train_polyreg(s, log, out: Path) -> None:
    d = _load(s["data"])
    spec = features.NeighborhoodSpec(s["size"], "counts")
    samples = features.build_training_set(
        d, s["estimation"], spec, frontier_only=s["frontier-only"],
        frontier_order=s["frontier-order"], max_samples=_max_samples(s), seed=s["seed"])
    with log.time("fit"):
        params, rep = polyreg.fit(samples, s["eps"], tol=s["tol"], max_iter=s["max-iter"])
    polyreg.save(params, out / "model.polyreg")
    lines = [f"converged = {rep.converged}", f"iterations = {rep.iterations}",
             f"final_objective = {rep.final_objective!r}", f"gradient_norm = {rep.gradient_norm!r}",
             f"step_halvings = {rep.step_halvings}", f"message = {rep.message}"]
    (out / "fit.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))


def cmd_train_mlp(s, log, out: Path) -> None:
    d = _load(s["data"])
    spec = features.NeighborhoodSpec(s["size"], "exp_distance")
    samples = features.build_training_set(
        d, s["estimation"], spec, frontier_only=s["frontier-only"],
        frontier_order=s["frontier-order"], max_samples=_max_samples(s), seed=s["seed"])
    with log.time("train"):
        w, rep = mlp.train(samples, _train_config(s, s["q2"]), jobs=s["jobs"])
    mlp.save(w, out / "model.mlp")
    lines = ["restart,seed,failed,best_epoch,best_val_loss,epochs_run"]
    lines += [f"{r},{x.seed},{x.failed},{x.best_epoch},{x.best_val_loss!r},{x.epochs_run}"
              for r, x in enumerate(rep.restarts)]
    (out / "restarts.csv").write_text("\n".join(lines) + "\n")
    print(f"best restart {rep.best_restart}, validation loss {rep.best_val_loss:.6g}")


def _select(s, log, out: Path, method: str) -> None:
    d = _load(s["data"])
    common = dict(frontier_only=s["frontier-only"], frontier_order=s["frontier-order"],
                  evaluation=s["evaluation"], max_samples=_max_samples(s), seed=s["seed"],
                  jobs=s["jobs"], test_transition=s["test"])
    with log.time("selection"):
        if method == "polyreg":
            hg = evaluation.HyperGrid(neighborhood_sizes=s["sizes"], eps_values=s["eps"])
            report = evaluation.select_polyreg(d, s["estimation"], s["validation"], hg,
                                               tol=s["tol"], max_iter=s["max-iter"], **common)
        else:
            hg = evaluation.HyperGrid(neighborhood_sizes=s["sizes"], q2_values=s["q2"])
            report = evaluation.select_mlp(d, s["estimation"], s["validation"], hg,
                                           _train_config(s, hg.q2_values[0]), **common)
    evaluation.write_selection_csv(report, out / "selection.csv")
    summary = evaluation.format_selection_summary(report)
    if report.model is None:
        (out / "summary.txt").write_text(summary)
        raise DataError("evaluation", "every candidate failed; see selection.csv")
    suffix = "polyreg" if method == "polyreg" else "mlp"
    evaluation.save_model(report.model, out / f"model.{suffix}")
    if s["test"] is not None:
        src, dst = s["test"]
        if not (0 <= src and dst == src + 1 and dst < d.dates):
            raise UsageError(f"test transition {src}:{dst} is not a transition of the dataset")
        pred = evaluation.predict_map(report.model, d, src, frontier_only=s["frontier-only"],
                                      frontier_order=s["frontier-order"])
        grid.write_grid(pred, out / f"pred_{dst}.asc")
        res = evaluation.misclassification(d.covers[dst], pred, class_count=d.class_count)
        summary += f"test overall error: {res.overall_error:.4f}\n"
        summary += evaluation.format_error_table(
            res, d.class_names or [str(k) for k in range(1, d.class_count + 1)],
            evaluation.class_frequencies(d.covers[dst], d.class_count))
    (out / "summary.txt").write_text(summary)
    print(summary, end="")


def cmd_select_polyreg(s, log, out):
    _select(s, log, out, "polyreg")


def cmd_select_mlp(s, log, out):
    _select(s, log, out, "mlp")


def cmd_predict(s, log, out: Path) -> None:
    d = _load(s["data"])
    model = evaluation.load_model(s["model"])
    t = s["from-date"]
    if not 0 <= t < d.dates:
        raise UsageError(f"--from-date must lie in 0..{d.dates - 1}")
    with log.time("predict"):
        pred = evaluation.predict_map(model, d, t, frontier_only=s["frontier-only"],
                                      frontier_order=s["frontier-order"])
    grid.write_grid(pred, out / f"pred_{t + 1}.asc")
    print(f"wrote {out / f'pred_{t + 1}.asc'}")


def cmd_evaluate(s, log, out: Path | None) -> None:
    K = s["classes"] or None
    true_map = grid.read_grid(s["true"], class_count=K)
    pred_map = grid.read_grid(s["pred"], class_count=K)
    mask = None
    if s["mask"]:
        mask = grid.read_grid(s["mask"]).cells != grid.MISSING
    res = evaluation.misclassification(true_map, pred_map, mask, K)
    k = res.per_class_error.size
    text = evaluation.format_error_table(res, [str(c) for c in range(1, k + 1)],
                                         evaluation.class_frequencies(true_map, k))
    text += f"overall error {res.overall_error:.4f}\n"
    if out is not None:
        (out / "evaluation.txt").write_text(text)
    print(text, end="")


def cmd_render(s, log, out: Path) -> None:
    g = grid.read_grid(s["grid"])
    if s["scale"] < 1:
        raise UsageError("--scale must be >= 1")
    target = out / (Path(s["grid"]).stem + ".ppm")
    evaluation.render_ppm(g, target, s["scale"])
    print(f"wrote {target}")


HANDLERS = {
    "gen": cmd_gen, "features": cmd_features, "train-polyreg": cmd_train_polyreg,
    "train-mlp": cmd_train_mlp, "select-polyreg": cmd_select_polyreg,
    "select-mlp": cmd_select_mlp, "predict": cmd_predict, "evaluate": cmd_evaluate,
    "render": cmd_render,
}

# exception module -> short prefix for messages
_DATA_ERRORS = (grid.GridFormatError, features.EmptySampleError, polyreg.FitError,
                mlp.TrainError, ValueError, OSError, np.linalg.LinAlgError)


def _module_of(exc: BaseException) -> str:
    if isinstance(exc, OSError):
        return "io"
    tb = exc.__traceback__
    name = "cli"
    while tb is not None:
        mod = tb.tb_frame.f_globals.get("__name__", "")
        if mod.startswith("terracast."):
            name = mod.split(".", 1)[1].lstrip("_")
        tb = tb.tb_next
    return name


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    log = None
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help / --version
            return int(exc.code or 0)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        settings = resolve(args.command, args)
        out = settings["out"]
        if out is not None:
            out = Path(out)
            out.mkdir(parents=True, exist_ok=True)
        log = RunLog(args.command, settings, [PROG] + argv)
        HANDLERS[args.command](settings, log, out)
    except UsageError as exc:
        print(f"{PROG}: usage error: {exc}", file=sys.stderr)
        status = 1
    except DataError as exc:
        print(f"{PROG}: {exc.module}: {exc}", file=sys.stderr)
        status = 2
    except _DATA_ERRORS as exc:
        print(f"{PROG}: {_module_of(exc)}: {exc}", file=sys.stderr)
        status = 2
    else:
        status = 0
    if log is not None:
        log.write(status)
    return status


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
