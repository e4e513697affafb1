"""Cross-validated reconstruction scoring.

The protocol holds out one run and one subject at a time: components are
fitted on the remaining runs, the held-out run's shared response is
estimated from the remaining subjects, and the held-out subject's data are
reconstructed from it and scored per voxel. Folds over every (run, subject)
pair give one score map each, plus cross-fold averages.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import DatasetManifest
from .fastsrm import FastSrmConfig, fastsrm_fit
from .srm import detsrm_fit, probsrm_fit

DEGENERATE_SS = 1e-24
ROI_THRESHOLD = 0.05  # reference cut for "informative" voxels

ALGORITHMS = ("detsrm", "probsrm", "fastsrm")


def r2_score(pred, truth) -> float:
    """Coefficient of determination between two equal-length series.

    1 - sum((pred - truth)^2) / sum((truth - mean(truth))^2); a prediction
    equal to the truth scores 1, predicting the mean scores 0, and worse
    predictions go negative. A truth series with (numerically) zero variance
    scores 0 by convention.
    """
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if truth.size < 2:
        raise ValueError("need at least 2 samples")
    scores, _ = r2_map(pred[:, None], truth[:, None])
    return float(scores[0])


def r2_map(pred: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-column scores for t x v prediction/truth matrices.

    Returns (scores, degenerate): columns whose centered sum of squares falls
    below 1e-24 are flagged degenerate and score 0.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    ss_tot = np.sum((truth - truth.mean(axis=0)) ** 2, axis=0)
    ss_res = np.sum((pred - truth) ** 2, axis=0)
    degenerate = ss_tot < DEGENERATE_SS
    scores = np.zeros(truth.shape[1])
    live = ~degenerate
    scores[live] = 1.0 - ss_res[live] / ss_tot[live]
    return scores, degenerate


@dataclass
class R2Map:
    """Per-voxel scores of one (left-out run, left-out subject) fold."""

    scores: np.ndarray
    degenerate: np.ndarray
    left_out_run: int
    left_out_subject: int
    algorithm: str
    k: int


@dataclass
class CosmoothingResult:
    """All fold maps of one cross-validated evaluation."""

    folds: list[R2Map]
    algorithm: str
    k: int

    def mean_map(self) -> np.ndarray:
        """Voxelwise mean score across every fold."""
        return np.mean([f.scores for f in self.folds], axis=0)

    def run_mean_map(self, run: int) -> np.ndarray:
        """Voxelwise mean over the left-out subjects of one run."""
        maps = [f.scores for f in self.folds if f.left_out_run == run]
        if not maps:
            raise ValueError(f"no folds for run {run}")
        return np.mean(maps, axis=0)


def fold_seed(base_seed: int, run: int) -> int:
    """Deterministic per-fold fit seed, stable across processes."""
    return int(np.random.SeedSequence(entropy=[int(base_seed), int(run)]).generate_state(1)[0])


def _fit_spatial(manifest, algorithm, k, atlas, n_iter, seed, n_jobs, temp_dir):
    """Fit the requested algorithm on a (sub-)dataset and return per-subject
    component getters."""
    if algorithm == "fastsrm":
        if atlas is None:
            raise ValueError("fastsrm needs an atlas")
        cfg = FastSrmConfig(k=k, n_iter=n_iter, n_jobs=n_jobs, seed=seed, temp_dir=temp_dir)
        model = fastsrm_fit(manifest, atlas, cfg)
        return [model.spatial_component(i) for i in range(model.n)]
    data = manifest.load_all()
    if algorithm == "detsrm":
        model, _ = detsrm_fit(data, k, n_iter=n_iter, seed=seed, n_jobs=n_jobs)
    elif algorithm == "probsrm":
        model, _ = probsrm_fit(data, k, n_iter=n_iter, seed=seed, n_jobs=n_jobs)
    else:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    return [model.spatial_component(i) for i in range(model.n)]


def _score_left_out_run(manifest, spatial, run, algorithm, k, subjects=None):
    """Score reconstruction of each requested left-out subject for one run.

    All subjects' projections onto their own bases are computed once; each
    leave-one-out shared response is the ordered total minus the held-out
    subject's projection, so recomputing any single fold reproduces its map
    bit-for-bit.
    """
    n = manifest.n_subjects
    proj = []
    for z in range(n):
        x = manifest.load_run(z, run)
        proj.append(x @ spatial[z].T.astype(np.float64, copy=False))
        del x
    total = np.zeros_like(proj[0])
    for p in proj:
        total += p
    folds = []
    for i in subjects if subjects is not None else range(n):
        shared = (total - proj[i]) / (n - 1)
        pred = shared @ spatial[i]
        truth = manifest.load_run(i, run)
        scores, degenerate = r2_map(pred, truth)
        folds.append(
            R2Map(
                scores=scores,
                degenerate=degenerate,
                left_out_run=run,
                left_out_subject=i,
                algorithm=algorithm,
                k=k,
            )
        )
    return folds


def cosmoothing(
    manifest: DatasetManifest,
    algorithm: str,
    k: int,
    atlas=None,
    n_iter: int = 10,
    seed: int = 0,
    n_jobs: int = 1,
    temp_dir=None,
) -> CosmoothingResult:
    """Cross-validated reconstruction over every (left-out run, left-out
    subject) pair.

    Needs at least 2 runs (to fit without the held-out one) and 2 subjects
    (to estimate the held-out run's shared response). Fit seeds derive from
    ``seed`` and the left-out run index (the fit is the only stochastic
    step and is shared by all subjects of a run), so any fold can be
    recomputed in isolation. Folds are enumerated subject-major.
    """
    if manifest.n_runs < 2:
        raise ValueError("co-smoothing needs at least 2 runs")
    if manifest.n_subjects < 2:
        raise ValueError("co-smoothing needs at least 2 subjects")
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}; expected one of {ALGORITHMS}")
    folds = []
    for s in range(manifest.n_runs):
        try:
            training = manifest.without_run(s)
            spatial = _fit_spatial(
                training, algorithm, k, atlas, n_iter, fold_seed(seed, s), n_jobs, temp_dir
            )
            folds.extend(_score_left_out_run(manifest, spatial, s, algorithm, k))
        except Exception as exc:
            raise RuntimeError(f"fold with left-out run {s} failed: {exc}") from exc
    folds.sort(key=lambda f: (f.left_out_subject, f.left_out_run))
    return CosmoothingResult(folds=folds, algorithm=algorithm, k=k)


def cosmoothing_fold(
    manifest: DatasetManifest,
    algorithm: str,
    k: int,
    run: int,
    subject: int,
    atlas=None,
    n_iter: int = 10,
    seed: int = 0,
    n_jobs: int = 1,
    temp_dir=None,
) -> R2Map:
    """Recompute a single (run, subject) fold; identical arithmetic to the
    full sweep, so the map matches bit-for-bit."""
    training = manifest.without_run(run)
    spatial = _fit_spatial(
        training, algorithm, k, atlas, n_iter, fold_seed(seed, run), n_jobs, temp_dir
    )
    return _score_left_out_run(manifest, spatial, run, algorithm, k, subjects=[subject])[0]


def roi_mask(maps, threshold: float = ROI_THRESHOLD) -> np.ndarray:
    """Voxels scoring above ``threshold`` on every supplied mean map.

    Intersecting maps fitted at several component counts keeps only regions
    that are informative at all of them.
    """
    maps = [np.asarray(m) for m in maps]
    if not maps:
        raise ValueError("need at least one map")
    v = maps[0].shape[0]
    mask = np.ones(v, dtype=bool)
    for m in maps:
        if m.shape != (v,):
            raise ValueError("maps disagree on voxel count")
        mask &= m > threshold
    return mask


def mean_within(mask: np.ndarray, score_map: np.ndarray) -> float:
    """Mean score inside a voxel mask; NaN when the mask is empty."""
    if not np.any(mask):
        return float("nan")
    return float(np.mean(np.asarray(score_map)[mask]))
