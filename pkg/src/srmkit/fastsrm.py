"""Compressed three-step fit: project runs onto an atlas, solve the shared
response in parcel space, then recover full-resolution components by
orthonormal regression.

Full-resolution runs are streamed from disk and never held together: the
process keeps the reduced data (small by construction), the atlas, at most
one t x v run per worker, and the k x v accumulators. Recovered components
default to disk-backed storage so peak memory stays independent of the
subject count.
"""

from __future__ import annotations

import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .atlas import Atlas, project_run
from .dataio import DatasetManifest, save_matrix
from .srm import SharedResponse, SrmModel, _accumulate_product, _procrustes_svd, detsrm_fit

TMPDIR_ENV = "SRMKIT_TMPDIR"


@dataclass
class FastSrmConfig:
    """Knobs of the compressed fit."""

    k: int
    n_iter: int = 10
    n_jobs: int = 1
    seed: int = 0
    temp_dir: str | Path | None = None  # spill directory; env SRMKIT_TMPDIR overrides tempdir
    keep_components: str = "ondisk"  # "ondisk" | "inmemory"
    # working precision of the retained reduced data; cross products and the
    # recovery SVD always run in float64
    dtype: np.dtype = field(default_factory=lambda: np.dtype(np.float64))

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.n_iter < 1:
            raise ValueError("n_iter must be at least 1")
        if self.n_jobs < 1:
            raise ValueError("n_jobs must be at least 1")
        if self.keep_components not in ("ondisk", "inmemory"):
            raise ValueError(f"unknown keep_components {self.keep_components!r}")
        self.dtype = np.dtype(self.dtype)
        if self.dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
            raise ValueError("dtype must be float32 or float64")

    def resolve_temp_dir(self) -> Path:
        if self.temp_dir is not None:
            base = Path(self.temp_dir)
        elif os.environ.get(TMPDIR_ENV):
            base = Path(os.environ[TMPDIR_ENV])
        else:
            base = Path(tempfile.gettempdir())
        try:
            base.mkdir(parents=True, exist_ok=True)
            return Path(tempfile.mkdtemp(prefix="srmkit-", dir=base))
        except OSError as exc:
            raise RuntimeError(f"spill directory {base} is not writable: {exc}") from exc


def reduce_dataset(
    manifest: DatasetManifest, atlas: Atlas, n_jobs: int = 1, dtype=np.float64
) -> list[list[np.ndarray]]:
    """Project every run into parcel space, indexed [subject][run].

    Runs are loaded one at a time per worker; only the t x c projections are
    retained.
    """
    n, m = manifest.n_subjects, manifest.n_runs
    reduced: list[list] = [[None] * m for _ in range(n)]

    def unit(idx):
        i, s = idx
        try:
            x = manifest.load_run(i, s)
            reduced[i][s] = project_run(x, atlas).astype(dtype, copy=False)
        except Exception as exc:
            raise RuntimeError(f"projection failed for subject {i}, run {s}: {exc}") from exc

    units = [(i, s) for i in range(n) for s in range(m)]
    if n_jobs <= 1:
        for u in units:
            unit(u)
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            list(pool.map(unit, units))
    return reduced


def recover_components(
    manifest: DatasetManifest,
    shared: SharedResponse | list[np.ndarray],
    n_jobs: int = 1,
    component_dir: Path | None = None,
) -> list[np.ndarray | Path]:
    """Recover full-resolution components from a (possibly ill-scaled) shared
    response by orthonormal regression.

    Per subject, runs are streamed from disk and the k x v cross products
    accumulated in run order; the Procrustes step of the accumulated matrix
    is scale-invariant, so any positive rescaling of ``shared`` yields the
    same components. When ``component_dir`` is given, each component is
    written there (atomic rename) and released before the next subject.
    """
    runs = list(shared.runs) if isinstance(shared, SharedResponse) else list(shared)
    if len(runs) != manifest.n_runs:
        raise ValueError(f"{len(runs)} shared runs for a {manifest.n_runs}-run dataset")
    for s, sh in enumerate(runs):
        if sh.shape[0] != manifest.t_per_run[s]:
            raise ValueError(f"run {s}: shared response has {sh.shape[0]} timeframes, "
                             f"data has {manifest.t_per_run[s]}")
    k = runs[0].shape[1]

    def recover_subject(i):
        # cross products always accumulate in float64 so the Procrustes step
        # meets the orthonormality tolerance whatever the data dtype
        acc = np.zeros((k, manifest.v), dtype=np.float64)
        scratch = np.empty((k, manifest.v), dtype=np.float64)
        for s in range(manifest.n_runs):
            try:
                x = manifest.load_run(i, s)
                _accumulate_product(runs[s].T, x, acc, scratch)
            except Exception as exc:
                raise RuntimeError(f"recovery failed for subject {i}, run {s}: {exc}") from exc
            del x
        w, _ = _procrustes_svd(acc)
        if component_dir is None:
            return w
        dest = component_dir / f"w_{i:03d}.srmb"
        tmp = component_dir / f"w_{i:03d}.srmb.tmp"
        save_matrix(w, tmp)
        os.replace(tmp, dest)
        return dest

    if n_jobs <= 1 or manifest.n_subjects == 1:
        return [recover_subject(i) for i in range(manifest.n_subjects)]
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(recover_subject, range(manifest.n_subjects)))


def fastsrm_fit(manifest: DatasetManifest, atlas: Atlas, cfg: FastSrmConfig) -> SrmModel:
    """Fit spatial components through the atlas-compressed pipeline.

    Step 1 projects every run onto the atlas (streaming). Step 2 runs the
    alternating fit on the reduced data. Step 3 recovers each subject's
    full-resolution components by orthonormal regression against the reduced
    shared response, streaming runs from disk once more.

    The returned model carries ``objective_trace`` (the reduced-space fit
    trace) and ``reduced_shared`` (the step-2 shared response, which is not
    correctly scaled for reconstruction; use :func:`fastsrm_transform`).
    """
    if atlas.v != manifest.v:
        raise ValueError(f"atlas has {atlas.v} voxels, dataset has {manifest.v}")
    if cfg.k >= atlas.c:
        raise ValueError(f"k={cfg.k} must be smaller than the parcel count c={atlas.c}")

    reduced = reduce_dataset(manifest, atlas, n_jobs=cfg.n_jobs, dtype=cfg.dtype)
    reduced_model, reduced_shared = detsrm_fit(
        reduced, cfg.k, n_iter=cfg.n_iter, seed=cfg.seed, n_jobs=1
    )
    del reduced

    component_dir = cfg.resolve_temp_dir() if cfg.keep_components == "ondisk" else None
    spatial = recover_components(
        manifest, reduced_shared, n_jobs=cfg.n_jobs, component_dir=component_dir
    )
    model = SrmModel(spatial, validate=False)
    if component_dir is not None:
        model.save(component_dir)  # descriptor only; components are already in place
    model.objective_trace = reduced_model.objective_trace
    model.reduced_shared = reduced_shared
    return model


def fastsrm_transform(model: SrmModel, runs, subjects=None) -> np.ndarray:
    """Shared response of one run: average each subject's data projected onto
    its own basis, loading disk-backed components on demand.

    ``runs[j]`` is the t x v matrix of subject ``subjects[j]`` (all fitted
    subjects by default). Restricting ``subjects`` yields the leave-one-out
    estimate used by cross-validated reconstruction.
    """
    if subjects is None:
        subjects = list(range(model.n))
    subjects = list(subjects)
    if len(runs) != len(subjects):
        raise ValueError(f"{len(runs)} runs for {len(subjects)} subjects")
    if not subjects:
        raise ValueError("need at least one subject")
    for i in subjects:
        if not 0 <= i < model.n:
            raise ValueError(f"unknown subject {i} (model has {model.n})")
    t = runs[0].shape[0]
    acc = np.zeros((t, model.k), dtype=np.float64)
    for x, i in zip(runs, subjects):
        if x.shape != (t, model.v):
            raise ValueError(f"subject {i}: run shape {x.shape}, expected ({t}, {model.v})")
        acc += x @ model.spatial_component(i).T
    return acc / len(subjects)
