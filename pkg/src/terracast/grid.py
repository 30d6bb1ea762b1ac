"""Raster data model and plain-text grid I/O.

Land-cover maps hold class ids ``1..K`` in an integer array, with ``0``
standing for a missing cell. Numeric environmental layers hold floats with
``NaN`` for missing cells; categorical ones hold ``1..category_count`` with
``0`` for missing.

File format (one raster per file)::

    ncols <int>
    nrows <int>
    nodata <value>
    <nrows lines of ncols space-separated values, top row first>

A dataset directory is described by a ``key = value`` manifest listing the
class count, class names, cover files in date order and environmental layers.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Union

import numpy as np

MISSING = 0
DEFAULT_NODATA = -9999
MANIFEST_NAME = "manifest.txt"


class GridFormatError(ValueError):
    """Raised when a grid or manifest file cannot be parsed."""


@dataclass(eq=False)
class LandCoverGrid:
    cells: np.ndarray
    date_label: str = ""
    nodata_value: float = DEFAULT_NODATA

    def __post_init__(self):
        self.cells = np.ascontiguousarray(self.cells, dtype=np.int64)
        if self.cells.ndim != 2 or self.cells.size == 0:
            raise ValueError("land-cover grid must be a non-empty 2-D array")
        self.cells.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells.shape

    @property
    def rows(self) -> int:
        return self.cells.shape[0]

    @property
    def cols(self) -> int:
        return self.cells.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return self.cells != MISSING

    def __eq__(self, other):
        if not isinstance(other, LandCoverGrid):
            return NotImplemented
        return (self.date_label == other.date_label
                and self.nodata_value == other.nodata_value
                and np.array_equal(self.cells, other.cells))


@dataclass(eq=False)
class EnvLayer:
    name: str
    kind: str
    cells: np.ndarray
    category_count: int = 0
    nodata_value: float = DEFAULT_NODATA

    def __post_init__(self):
        if self.kind not in ("numeric", "categorical"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        dtype = np.float64 if self.kind == "numeric" else np.int64
        self.cells = np.ascontiguousarray(self.cells, dtype=dtype)
        if self.cells.ndim != 2 or self.cells.size == 0:
            raise ValueError("environmental layer must be a non-empty 2-D array")
        if self.kind == "categorical" and self.category_count <= 0:
            self.category_count = int(self.cells.max(initial=0))
        self.cells.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells.shape

    @property
    def valid(self) -> np.ndarray:
        if self.kind == "numeric":
            return ~np.isnan(self.cells)
        return self.cells != MISSING

    def __eq__(self, other):
        if not isinstance(other, EnvLayer):
            return NotImplemented
        return (self.name == other.name and self.kind == other.kind
                and self.category_count == other.category_count
                and self.nodata_value == other.nodata_value
                and np.array_equal(self.cells, other.cells, equal_nan=True))


@dataclass(eq=False)
class Dataset:
    class_count: int
    covers: list[LandCoverGrid]
    env_layers: list[EnvLayer] = field(default_factory=list)
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.class_names:
            self.class_names = [f"class{k}" for k in range(1, self.class_count + 1)]

    @property
    def shape(self) -> tuple[int, int]:
        return self.covers[0].shape

    @property
    def dates(self) -> int:
        return len(self.covers)

    def valid_mask(self) -> np.ndarray:
        """Cells that hold data in every cover."""
        mask = np.ones(self.shape, dtype=bool)
        for cover in self.covers:
            mask &= cover.valid
        return mask

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.class_count == other.class_count
                and self.class_names == other.class_names
                and len(self.covers) == len(other.covers)
                and all(a == b for a, b in zip(self.covers, other.covers))
                and len(self.env_layers) == len(other.env_layers)
                and all(a == b for a, b in zip(self.env_layers, other.env_layers)))


Grid = Union[LandCoverGrid, EnvLayer]


# ---------------------------------------------------------------------------
# Grid files
# ---------------------------------------------------------------------------

def _format_number(value: float) -> str:
    value = float(value)
    if value.is_integer() and abs(value) < 1e16:
        return str(int(value))
    return repr(value)


def _format_real(value: float) -> str:
    # repr is the shortest string that round-trips a float64 exactly
    return repr(float(value))


def format_grid(grid: Grid) -> str:
    """Canonical text serialization of a grid."""
    rows, cols = grid.shape
    nodata = _format_number(grid.nodata_value)
    lines = [f"ncols {cols}", f"nrows {rows}", f"nodata {nodata}"]
    numeric = isinstance(grid, EnvLayer) and grid.kind == "numeric"
    for row in grid.cells:
        if numeric:
            fields = [nodata if math.isnan(v) else _format_real(v) for v in row]
        else:
            fields = [nodata if v == MISSING else str(int(v)) for v in row]
        lines.append(" ".join(fields))
    return "\n".join(lines) + "\n"


def write_grid(grid: Grid, path: str | os.PathLike) -> None:
    Path(path).write_text(format_grid(grid))


def _parse_header(lines: list[str], path) -> tuple[int, int, float]:
    if len(lines) < 3:
        raise GridFormatError(f"{path}: truncated header")
    values = {}
    for expected, line in zip(("ncols", "nrows", "nodata"), lines[:3]):
        parts = line.split()
        if len(parts) != 2 or parts[0].lower() != expected:
            raise GridFormatError(f"{path}: expected '{expected} <value>', got {line!r}")
        values[expected] = parts[1]
    try:
        ncols, nrows = int(values["ncols"]), int(values["nrows"])
        nodata = float(values["nodata"])
    except ValueError as exc:
        raise GridFormatError(f"{path}: malformed header value ({exc})") from None
    if ncols <= 0 or nrows <= 0:
        raise GridFormatError(f"{path}: non-positive dimensions {nrows}x{ncols}")
    return ncols, nrows, nodata


def read_grid(path: str | os.PathLike, kind: str = "landcover", *,
              class_count: int | None = None, category_count: int | None = None,
              name: str | None = None, date_label: str = "") -> Grid:
    """Read a grid file.

    ``kind`` is one of ``landcover``, ``numeric`` or ``categorical``. For
    land-cover grids ``class_count`` bounds the admissible class ids; for
    categorical layers ``category_count`` bounds the categories (inferred as the
    maximum value when omitted).
    """
    if kind not in ("landcover", "numeric", "categorical"):
        raise ValueError(f"unknown grid kind {kind!r}")
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    ncols, nrows, nodata = _parse_header(lines, path)
    body = lines[3:]
    if len(body) != nrows:
        raise GridFormatError(f"{path}: expected {nrows} data rows, found {len(body)}")

    integer = kind != "numeric"
    cells = np.empty((nrows, ncols), dtype=np.int64 if integer else np.float64)
    for i, line in enumerate(body):
        fields = line.split()
        if len(fields) != ncols:
            raise GridFormatError(
                f"{path}: row {i} has {len(fields)} values, expected {ncols}")
        for j, token in enumerate(fields):
            try:
                value = float(token)
            except ValueError:
                raise GridFormatError(f"{path}: bad value {token!r} at ({i}, {j})") from None
            if value == nodata:
                cells[i, j] = MISSING if integer else np.nan
                continue
            if integer:
                if not value.is_integer():
                    raise GridFormatError(
                        f"{path}: non-integer value {token!r} at ({i}, {j}) in {kind} grid")
                upper = class_count if kind == "landcover" else category_count
                if value < 1 or (upper is not None and value > upper):
                    raise GridFormatError(
                        f"{path}: value {token} at ({i}, {j}) out of range 1..{upper}")
            cells[i, j] = value

    if kind == "landcover":
        return LandCoverGrid(cells, date_label=date_label, nodata_value=nodata)
    return EnvLayer(name or path.stem, kind, cells,
                    category_count=category_count or 0, nodata_value=nodata)


# ---------------------------------------------------------------------------
# key = value text (manifests, configs, generator specs)
# ---------------------------------------------------------------------------

def parse_keyvalue(text: str) -> list[tuple[str, str]]:
    """Parse ``key = value`` lines; ``#`` starts a comment, keys may repeat."""
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise GridFormatError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def read_keyvalue(path: str | os.PathLike) -> list[tuple[str, str]]:
    return parse_keyvalue(Path(path).read_text())


def format_keyvalue(pairs) -> str:
    return "".join(f"{k} = {v}\n" for k, v in pairs)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

def save_dataset(d: Dataset, directory: str | os.PathLike) -> Path:
    """Write every raster plus a manifest into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pairs = [("classes", str(d.class_count)),
             ("class_names", ", ".join(d.class_names))]
    for t, cover in enumerate(d.covers):
        fname = f"cover_{t}.asc"
        write_grid(cover, directory / fname)
        pairs.append(("cover", f"{cover.date_label or t} {fname}"))
    for layer in d.env_layers:
        fname = f"env_{layer.name}.asc"
        write_grid(layer, directory / fname)
        if layer.kind == "numeric":
            pairs.append(("env_numeric", f"{layer.name} {fname}"))
        else:
            pairs.append(("env_categorical", f"{layer.name} {layer.category_count} {fname}"))
    manifest = directory / MANIFEST_NAME
    manifest.write_text(format_keyvalue(pairs))
    return manifest


def load_dataset(path: str | os.PathLike) -> Dataset:
    """Load a dataset from a manifest file or a directory containing one."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    base = path.parent
    class_count = None
    class_names: list[str] = []
    covers, layers = [], []
    for key, value in read_keyvalue(path):
        parts = value.split()
        if key == "classes":
            class_count = int(value)
        elif key == "class_names":
            class_names = [s.strip() for s in value.split(",") if s.strip()]
        elif key == "cover":
            if len(parts) != 2:
                raise GridFormatError(f"{path}: cover needs '<date> <file>', got {value!r}")
            if class_count is None:
                raise GridFormatError(f"{path}: 'classes' must precede 'cover'")
            covers.append(read_grid(base / parts[1], "landcover",
                                    class_count=class_count, date_label=parts[0]))
        elif key == "env_numeric":
            if len(parts) != 2:
                raise GridFormatError(f"{path}: env_numeric needs '<name> <file>'")
            layers.append(read_grid(base / parts[1], "numeric", name=parts[0]))
        elif key == "env_categorical":
            if len(parts) != 3:
                raise GridFormatError(
                    f"{path}: env_categorical needs '<name> <count> <file>'")
            layers.append(read_grid(base / parts[2], "categorical", name=parts[0],
                                    category_count=int(parts[1])))
        else:
            raise GridFormatError(f"{path}: unknown manifest key {key!r}")
    if class_count is None:
        raise GridFormatError(f"{path}: missing 'classes'")
    return Dataset(class_count, covers, layers, class_names)


class Violation(NamedTuple):
    code: str
    target: str
    detail: str

    def __str__(self):
        return f"{self.code}: {self.target}: {self.detail}"


def _date_key(label: str):
    try:
        return float(label)
    except ValueError:
        return None


def validate_dataset(d: Dataset) -> list[Violation]:
    """Check the dataset invariants; an empty list means the dataset is sound."""
    out: list[Violation] = []
    if d.class_count < 2:
        out.append(Violation("class-count", "dataset", f"K={d.class_count} < 2"))
    if len(d.class_names) != d.class_count:
        out.append(Violation("class-names", "dataset",
                             f"{len(d.class_names)} names for {d.class_count} classes"))
    if len(d.covers) < 2:
        out.append(Violation("too-few-covers", "dataset", f"{len(d.covers)} cover(s)"))
        if not d.covers:
            return out

    ref = d.covers[0].shape
    for t, cover in enumerate(d.covers):
        if cover.shape != ref:
            out.append(Violation("dimension-mismatch", f"cover[{t}]",
                                 f"shape {cover.shape} != {ref}"))
            continue
        bad = np.argwhere((cover.cells != MISSING)
                          & ((cover.cells < 1) | (cover.cells > d.class_count)))
        for i, j in bad:
            out.append(Violation("class-range", f"cover[{t}]",
                                 f"cell ({i}, {j}) = {cover.cells[i, j]}"))
    for layer in d.env_layers:
        if layer.shape != ref:
            out.append(Violation("dimension-mismatch", f"env[{layer.name}]",
                                 f"shape {layer.shape} != {ref}"))
            continue
        if layer.kind == "categorical":
            bad = np.argwhere((layer.cells != MISSING)
                              & ((layer.cells < 1) | (layer.cells > layer.category_count)))
            for i, j in bad:
                out.append(Violation("category-range", f"env[{layer.name}]",
                                     f"cell ({i}, {j}) = {layer.cells[i, j]}"))

    labels = [c.date_label for c in d.covers]
    keys = [_date_key(lab) for lab in labels]
    if len(set(labels)) != len(labels):
        out.append(Violation("date-order", "dataset", f"duplicate date labels {labels}"))
    elif all(k is not None for k in keys) and any(b <= a for a, b in zip(keys, keys[1:])):
        out.append(Violation("date-order", "dataset", f"dates not increasing {labels}"))

    same = [c for c in d.covers if c.shape == ref]
    if same:
        missing = np.stack([c.cells == MISSING for c in same])
        inconsistent = missing.any(axis=0) & ~missing.all(axis=0)
        for i, j in np.argwhere(inconsistent):
            out.append(Violation("nodata-consistency", f"cell ({i}, {j})",
                                 "missing in some covers but not all"))
    return out
