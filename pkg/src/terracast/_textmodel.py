"""Shared pieces of the plain-text model files."""
from __future__ import annotations

import numpy as np

from .features import EnvEncoder, NeighborhoodSpec


class ModelFormatError(ValueError):
    pass


def fmt_reals(values) -> str:
    return " ".join("%.17g" % v for v in np.ravel(values))


def context_lines(spec: NeighborhoodSpec | None, encoder: EnvEncoder | None) -> list[str]:
    lines = []
    if spec is not None:
        lines.append(f"neighborhood {spec.size} {spec.weighting}")
    if encoder is not None:
        lines.append("env_kinds " + " ".join(encoder.kinds))
        lines.append("env_categories " + " ".join(str(c) for c in encoder.category_counts))
        lines.append("env_mean " + fmt_reals(encoder.mean))
        lines.append("env_scale " + fmt_reals(encoder.scale))
    return lines


def parse_records(text: str, magic: str) -> dict[str, list[list[str]]]:
    """Split ``key v1 v2 ...`` lines into a dict of value lists (keys may repeat)."""
    lines = text.splitlines()
    if not lines or lines[0].split()[:1] != [magic]:
        raise ModelFormatError(f"not a {magic} file")
    records: dict[str, list[list[str]]] = {}
    for line in lines[1:]:
        parts = line.split()
        if parts:
            records.setdefault(parts[0], []).append(parts[1:])
    return records


def one(records, key, n=None) -> list[str]:
    try:
        (values,) = records[key]
    except (KeyError, ValueError):
        raise ModelFormatError(f"expected exactly one '{key}' line") from None
    if n is not None and len(values) != n:
        raise ModelFormatError(f"'{key}' has {len(values)} values, expected {n}")
    return values


def reals(values) -> np.ndarray:
    return np.array([float(v) for v in values], dtype=np.float64)


def parse_context(records) -> tuple[NeighborhoodSpec | None, EnvEncoder | None]:
    spec = None
    if "neighborhood" in records:
        size, weighting = one(records, "neighborhood", 2)
        spec = NeighborhoodSpec(int(size), weighting)
    encoder = None
    if "env_kinds" in records:
        kinds = one(records, "env_kinds")
        counts = [int(c) for c in one(records, "env_categories", len(kinds))]
        encoder = EnvEncoder(kinds, counts, reals(one(records, "env_mean")),
                             reals(one(records, "env_scale")))
    return spec, encoder
