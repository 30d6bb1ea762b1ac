"""Land-cover transition prediction from neighborhood and environmental features.

Two predictors share one feature pipeline: a penalized multinomial logit
fitted by Newton-Raphson (:mod:`terracast.polyreg`) and a one-hidden-layer
perceptron (:mod:`terracast.mlp`). Hyperparameters are chosen by error on a
held-out transition (:mod:`terracast.evaluation`), and :mod:`terracast.synth`
generates landscapes whose true transition law is known.
"""
from .grid import (Dataset, EnvLayer, GridFormatError, LandCoverGrid, load_dataset,
                   read_grid, save_dataset, validate_dataset, write_grid)
from .features import NeighborhoodSpec, build_training_set
from .evaluation import (HyperGrid, misclassification, predict_map, select_mlp,
                         select_polyreg)
from .synth import GeneratorSpec, bayes_error, generate

__version__ = "0.1.0"

__all__ = [
    "Dataset", "EnvLayer", "GridFormatError", "LandCoverGrid", "load_dataset", "read_grid",
    "save_dataset", "validate_dataset", "write_grid", "NeighborhoodSpec", "build_training_set",
    "HyperGrid", "misclassification", "predict_map", "select_mlp", "select_polyreg",
    "GeneratorSpec", "bayes_error", "generate", "__version__",
]
