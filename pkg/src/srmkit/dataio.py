"""Run-matrix storage (SRMB binary format), dataset manifests and temporal
preprocessing.

A run matrix is the t x v recording of one run of one subject: rows are
timeframes, columns are voxels (or features). Matrices are stored in a small
self-describing little-endian binary format so that files round-trip
bit-exactly and can be read by row range without loading the whole file.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"SRMB"
VERSION = 1
HEADER_SIZE = 4 + 4 + 1 + 8 + 8  # magic, version, dtype code, rows, cols

_DTYPE_BY_CODE = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODE_BY_DTYPE = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


class FormatError(ValueError):
    """Raised when a file does not conform to the SRMB layout."""


def save_matrix(mat: np.ndarray, path) -> None:
    """Write a 2-D float32/float64 matrix to ``path`` in SRMB format.

    Values are stored row-major, little-endian, after a 29-byte header.
    Non-finite values are rejected so that every stored file is valid
    input for the solvers.
    """
    mat = np.asarray(mat)
    if mat.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got ndim={mat.ndim}")
    if mat.shape[0] < 1 or mat.shape[1] < 1:
        raise ValueError(f"matrix must be at least 1x1, got {mat.shape}")
    if mat.dtype not in _CODE_BY_DTYPE:
        raise ValueError(f"unsupported dtype {mat.dtype}; use float32 or float64")
    if not np.all(np.isfinite(mat)):
        raise ValueError("matrix contains non-finite values")
    code = _CODE_BY_DTYPE[mat.dtype]
    header = struct.pack("<4sIBQQ", MAGIC, VERSION, code, mat.shape[0], mat.shape[1])
    le = mat.astype(_DTYPE_BY_CODE[code], copy=False)
    with open(path, "wb") as f:
        f.write(header)
        np.ascontiguousarray(le).tofile(f)


def read_header(path) -> tuple[int, int, np.dtype]:
    """Return (rows, cols, dtype) from an SRMB file without reading data."""
    with open(path, "rb") as f:
        raw = f.read(HEADER_SIZE)
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: file shorter than header")
    magic, version, code, rows, cols = struct.unpack("<4sIBQQ", raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if code not in _DTYPE_BY_CODE:
        raise FormatError(f"{path}: unknown dtype code {code}")
    if rows < 1 or cols < 1:
        raise FormatError(f"{path}: invalid shape {rows}x{cols}")
    if rows * cols > 2**62 // 8:
        raise FormatError(f"{path}: rows*cols overflow ({rows}x{cols})")
    return rows, cols, _DTYPE_BY_CODE[code]


def load_matrix(path, row_range: tuple[int, int] | None = None) -> np.ndarray:
    """Load an SRMB matrix, optionally restricted to rows [start, stop).

    Region reads seek directly to the requested rows so a full file never
    needs to reside in memory.
    """
    rows, cols, dtype = read_header(path)
    expected = HEADER_SIZE + rows * cols * dtype.itemsize
    actual = Path(path).stat().st_size
    if actual != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {actual} (truncated or padded)")
    if row_range is None:
        start, stop = 0, rows
    else:
        start, stop = row_range
        if not (0 <= start < stop <= rows):
            raise ValueError(f"row range [{start}, {stop}) out of bounds for {rows} rows")
    count = (stop - start) * cols
    offset = HEADER_SIZE + start * cols * dtype.itemsize
    data = np.fromfile(path, dtype=dtype, count=count, offset=offset)
    if data.size != count:
        raise FormatError(f"{path}: short read")
    return data.reshape(stop - start, cols)


def preprocess_run(mat: np.ndarray) -> np.ndarray:
    """Detrend and standardize each voxel time-course.

    Per column: subtract the least-squares linear trend over time, then
    scale the residual to unit population variance (divisor t). Columns
    whose residual variance falls below 1e-12 are zeroed rather than
    rejected, since masked recordings routinely contain dead voxels.
    """
    mat = np.asarray(mat)
    t = mat.shape[0]
    if t < 3:
        raise ValueError(f"preprocessing needs at least 3 timeframes, got {t}")
    x = mat.astype(np.float64, copy=False)
    ramp = np.arange(t, dtype=np.float64) - (t - 1) / 2.0
    mean = x.mean(axis=0)
    slope = (ramp @ x) / (ramp @ ramp)
    resid = x - mean - np.outer(ramp, slope)
    var = np.mean(resid * resid, axis=0)
    live = var >= 1e-12
    out = np.zeros_like(resid)
    out[:, live] = resid[:, live] / np.sqrt(var[live])
    return out.astype(mat.dtype, copy=False)


@dataclass(frozen=True)
class DatasetManifest:
    """Index over the run files of a multi-subject dataset.

    ``runs[i][s]`` is the path of subject i, run s. Every subject has the
    same run count and voxel count; within a run all subjects share the
    timeframe count (required for a per-run shared response).
    """

    subjects: tuple[str, ...]
    runs: tuple[tuple[Path, ...], ...]
    v: int
    t_per_run: tuple[int, ...]

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def n_runs(self) -> int:
        return len(self.t_per_run)

    def load_run(self, subject: int, run: int) -> np.ndarray:
        try:
            return load_matrix(self.runs[subject][run])
        except Exception as exc:
            raise RuntimeError(f"failed loading subject {subject}, run {run}: {exc}") from exc

    def load_all(self) -> list[list[np.ndarray]]:
        """Load every run into memory, indexed [subject][run]."""
        return [[self.load_run(i, s) for s in range(self.n_runs)] for i in range(self.n_subjects)]

    def without_run(self, run: int) -> "DatasetManifest":
        """Manifest restricted to all runs but one (for cross-validation)."""
        keep = [s for s in range(self.n_runs) if s != run]
        if not keep:
            raise ValueError("cannot drop the only run")
        return DatasetManifest(
            subjects=self.subjects,
            runs=tuple(tuple(paths[s] for s in keep) for paths in self.runs),
            v=self.v,
            t_per_run=tuple(self.t_per_run[s] for s in keep),
        )


def load_manifest(path) -> DatasetManifest:
    """Read a manifest JSON document and validate shape consistency.

    Layout: ``{"subjects": [{"id": str, "runs": [path, ...]}, ...]}`` with
    run paths relative to the manifest file. Timeframe and voxel counts are
    taken from the SRMB headers.
    """
    path = Path(path)
    with open(path) as f:
        doc = json.load(f)
    subjects = doc.get("subjects")
    if not subjects:
        raise ValueError(f"{path}: manifest has no subjects")
    base = path.parent
    ids = []
    runs = []
    for entry in subjects:
        ids.append(str(entry["id"]))
        paths = tuple(base / p for p in entry["runs"])
        if not paths:
            raise ValueError(f"{path}: subject {entry['id']} has no runs")
        runs.append(paths)
    m = len(runs[0])
    if any(len(r) != m for r in runs):
        raise ValueError(f"{path}: subjects disagree on run count")
    v = None
    t_per_run = [None] * m
    for sid, paths in zip(ids, runs):
        for s, p in enumerate(paths):
            rows, cols, _ = read_header(p)
            if v is None:
                v = cols
            elif cols != v:
                raise ValueError(f"{path}: subject {sid} run {s} has {cols} voxels, expected {v}")
            if t_per_run[s] is None:
                t_per_run[s] = rows
            elif rows != t_per_run[s]:
                raise ValueError(
                    f"{path}: subject {sid} run {s} has {rows} timeframes, expected {t_per_run[s]}"
                )
    return DatasetManifest(
        subjects=tuple(ids), runs=tuple(runs), v=int(v), t_per_run=tuple(int(t) for t in t_per_run)
    )


def save_manifest(path, subject_runs: dict[str, list[str]]) -> None:
    """Write a manifest JSON file; run paths must be relative to it."""
    doc = {"subjects": [{"id": sid, "runs": list(rr)} for sid, rr in subject_runs.items()]}
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
