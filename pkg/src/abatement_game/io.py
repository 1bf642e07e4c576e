"""CSV/JSON serialization shared by the workflows."""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

FLOAT_FMT = "%.17g"


def write_csv(path, header: list[str], columns) -> Path:
    """Write equal-length columns with round-trip float precision."""
    path = Path(path)
    cols = [np.asarray(c).ravel() for c in columns]
    if len({c.size for c in cols}) > 1:
        raise ValueError("columns must have equal length")
    data = np.column_stack(cols) if cols else np.empty((0, 0))
    tmp = path.with_suffix(path.suffix + ".tmp")
    np.savetxt(tmp, data, delimiter=",", header=",".join(header), comments="", fmt=FLOAT_FMT)
    os.replace(tmp, path)
    return path


def read_csv(path):
    """Return (header, 2-d array)."""
    with open(path) as f:
        header = f.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, data


def write_surface_csv(path, surface) -> Path:
    """Long format r,x,value over the grid of a ValueSurface."""
    R, X = surface.grid.mesh()
    return write_csv(path, ["r", "x", "value"], [R, X, surface.values])


def write_curve_csv(path, curve, name: str) -> Path:
    return write_csv(path, ["r", name, "flag"],
                     [curve.r_nodes, curve.values, curve.flags.astype(int)])


def _default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_json(path, obj) -> Path:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True, default=_default)
        f.write("\n")
    os.replace(tmp, path)
    return path
