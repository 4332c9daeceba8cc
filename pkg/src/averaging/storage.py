"""Line-oriented text files for measurements, poses and result tables.

Measurement file:
    ESSENTIAL 1 <n>
    <i> <j> <e00> <e01> ... <e22> <weight>        one line per pair, 0 <= i < j < n

Pose file:
    POSES 1 <n>
    <view> <r00> ... <r22> <cx> <cy> <cz>          one line per posed view

Reals are written with repr precision so a write-read cycle is exact.
Blank lines and lines starting with '#' are ignored.
"""
import math
import os
import tempfile
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from averaging.cover import ViewingGraph
from averaging.errors import FormatError
from averaging.geom import ORTHOGONALITY_TOL, CameraPose

FORMAT_VERSION = 1
PathLike = Union[str, Path]


def atomic_write(path: PathLike, text: str) -> None:
    """Write through a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=str(path.parent))
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x: float) -> str:
    return repr(float(x))


def _records(path: PathLike, kind: str) -> Tuple[int, Iterator[Tuple[int, List[str]]]]:
    with open(path) as f:
        lines = [(no, line.split()) for no, line in enumerate(f, 1)]
    lines = [(no, toks) for no, toks in lines if toks and not toks[0].startswith("#")]
    if not lines:
        raise FormatError(f"{path}: empty file")
    no, header = lines[0]
    if len(header) != 3 or header[0] != kind:
        raise FormatError(f"{path}:{no}: expected header '{kind} {FORMAT_VERSION} <n>'")
    if header[1] != str(FORMAT_VERSION):
        raise FormatError(f"{path}:{no}: unsupported format version {header[1]}")
    try:
        n = int(header[2])
    except ValueError:
        raise FormatError(f"{path}:{no}: view count is not an integer")
    if n < 1:
        raise FormatError(f"{path}:{no}: view count must be positive")
    return n, iter(lines[1:])


def _reals(path: PathLike, no: int, tokens: Sequence[str]) -> np.ndarray:
    try:
        values = np.array([float(t) for t in tokens])
    except ValueError:
        raise FormatError(f"{path}:{no}: malformed number")
    if not np.all(np.isfinite(values)):
        raise FormatError(f"{path}:{no}: non-finite value")
    return values


def _index(path: PathLike, no: int, token: str, n: int) -> int:
    try:
        value = int(token)
    except ValueError:
        raise FormatError(f"{path}:{no}: view index {token!r} is not an integer")
    if not 0 <= value < n:
        raise FormatError(f"{path}:{no}: view index {value} out of range for n={n}")
    return value


def write_measurements(path: PathLike, graph: ViewingGraph) -> None:
    lines = [f"ESSENTIAL {FORMAT_VERSION} {graph.n}"]
    for (i, j), (weight, M) in sorted(graph.edges.items()):
        lines.append(" ".join([str(i), str(j), *map(_fmt, M.ravel()), _fmt(weight)]))
    atomic_write(path, "\n".join(lines) + "\n")


def read_measurements(path: PathLike) -> ViewingGraph:
    n, records = _records(path, "ESSENTIAL")
    if n < 2:
        raise FormatError(f"{path}: a measurement file needs at least two views, found n={n}")
    graph = ViewingGraph(n)
    for no, toks in records:
        if len(toks) != 12:
            raise FormatError(f"{path}:{no}: expected 12 fields, found {len(toks)}")
        i, j = _index(path, no, toks[0], n), _index(path, no, toks[1], n)
        if i >= j:
            raise FormatError(f"{path}:{no}: pair ({i}, {j}) must have i < j")
        if graph.has_edge(i, j):
            raise FormatError(f"{path}:{no}: duplicate pair ({i}, {j})")
        values = _reals(path, no, toks[2:])
        if values[9] < 0:
            raise FormatError(f"{path}:{no}: negative weight")
        graph.add_edge(i, j, values[:9].reshape(3, 3), values[9])
    return graph


def write_poses(path: PathLike, poses: Sequence[Optional[CameraPose]]) -> None:
    lines = [f"POSES {FORMAT_VERSION} {len(poses)}"]
    for view, pose in enumerate(poses):
        if pose is not None:
            lines.append(" ".join([str(view), *map(_fmt, pose.rotation.ravel()), *map(_fmt, pose.center)]))
    atomic_write(path, "\n".join(lines) + "\n")


def read_poses(path: PathLike, tol: float = ORTHOGONALITY_TOL) -> List[Optional[CameraPose]]:
    n, records = _records(path, "POSES")
    poses: List[Optional[CameraPose]] = [None] * n
    for no, toks in records:
        if len(toks) != 13:
            raise FormatError(f"{path}:{no}: expected 13 fields, found {len(toks)}")
        view = _index(path, no, toks[0], n)
        if poses[view] is not None:
            raise FormatError(f"{path}:{no}: duplicate view {view}")
        values = _reals(path, no, toks[1:])
        try:
            poses[view] = CameraPose(values[:9], values[9:]).validate(tol)
        except ValueError:
            raise FormatError(f"{path}:{no}: rotation of view {view} is not in SO(3) (tol {tol:g})")
    return poses


def write_table(df: pd.DataFrame, path: PathLike) -> None:
    """CSV export for traces and reports."""
    atomic_write(path, df.to_csv(index=False, float_format=None))


def format_float(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6e}"
