"""Atlases: spatial compression of voxel-space runs into parcel space.

An atlas maps v voxels onto c parcels, either as a hard partition (each
voxel belongs to one parcel) or as a probabilistic c x v weight matrix.
Projecting a t x v run through an atlas yields a t x c reduced run.
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy import sparse

from .dataio import load_matrix, save_matrix

GRAM_RCOND = 1e-10  # relative singular-value cutoff for the parcel Gram pseudo-inverse


class Atlas:
    """Immutable compression operator over voxels.

    Use :meth:`partition` or :meth:`probabilistic` to construct. The
    projection operator (per-parcel averaging matrix, or the cached Gram
    pseudo-inverse) is precomputed once here so that projecting a run is a
    single pass over its values: this projection is the dominant cost of
    the compressed pipeline, so nothing per-call is recomputed.
    """

    def __init__(self, kind, c, v, labels=None, weights=None, _op=None):
        self.kind = kind
        self.c = int(c)
        self.v = int(v)
        self.labels = labels
        self.weights = weights
        self._op = _op

    @classmethod
    def partition(cls, labels) -> "Atlas":
        """Atlas from a length-v vector of parcel ids in 0..c-1."""
        labels = np.asarray(labels)
        if labels.ndim != 1:
            raise ValueError("partition labels must be a 1-D vector")
        if not np.issubdtype(labels.dtype, np.integer):
            as_int = labels.astype(np.int64)
            if not np.array_equal(as_int, labels):
                raise ValueError("partition labels must be integer-valued")
            labels = as_int
        labels = labels.astype(np.int64, copy=False)
        v = labels.size
        if labels.min() < 0:
            raise ValueError("parcel labels must be non-negative")
        c = int(labels.max()) + 1
        counts = np.bincount(labels, minlength=c)
        if np.any(counts == 0):
            missing = np.flatnonzero(counts == 0)
            raise ValueError(f"empty parcels: {missing.tolist()}")
        if c > v:
            raise ValueError(f"parcel count c={c} exceeds voxel count v={v}")
        # c x v sparse averaging operator; X @ op.T gives per-parcel means.
        op = sparse.csr_matrix(
            (1.0 / counts[labels], (labels, np.arange(v))), shape=(c, v), dtype=np.float64
        )
        return cls("partition", c, v, labels=labels, _op=op)

    @classmethod
    def probabilistic(cls, weights) -> "Atlas":
        """Atlas from a c x v weight matrix with no all-zero row."""
        a = np.asarray(weights, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError("probabilistic atlas must be a 2-D matrix")
        c, v = a.shape
        if c > v:
            raise ValueError(f"parcel count c={c} exceeds voxel count v={v}")
        if not np.all(np.isfinite(a)):
            raise ValueError("atlas weights contain non-finite values")
        row_norms = np.linalg.norm(a, axis=1)
        if np.any(row_norms == 0):
            raise ValueError("probabilistic atlas has an all-zero row")
        gram = a @ a.T
        u, d, vt = np.linalg.svd(gram)
        rank = int(np.sum(d > GRAM_RCOND * d[0]))
        if rank < c:
            warnings.warn(
                f"atlas Gram matrix is rank deficient ({rank} < {c}); "
                "projection uses its pseudo-inverse",
                RuntimeWarning,
                stacklevel=2,
            )
        inv_d = np.where(d > GRAM_RCOND * d[0], 1.0 / np.where(d > 0, d, 1.0), 0.0)
        gram_pinv = (vt.T * inv_d) @ u.T
        return cls("probabilistic", c, v, weights=a, _op=gram_pinv)


def project_run(x: np.ndarray, atlas: Atlas) -> np.ndarray:
    """Compress a t x v run to t x c parcel space.

    Partition atlases use direct per-parcel averaging (one pass, no c x c
    solve). Probabilistic atlases compute x A^T (A A^T)^+ with the cached
    pseudo-inverse.
    """
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != atlas.v:
        raise ValueError(f"run has shape {x.shape}, atlas expects {atlas.v} voxels")
    if atlas.kind == "partition":
        # (c x v sparse) @ (v x t) keeps the run itself as the only large operand.
        out = (atlas._op @ x.T).T
        return np.ascontiguousarray(out)
    return (x @ atlas.weights.T) @ atlas._op


def load_atlas(path, kind: str | None = None) -> Atlas:
    """Load an atlas from an SRMB file.

    A 1 x v integer-valued matrix is a partition (parcel labels); a c x v
    matrix is probabilistic. Pass ``kind`` ("partition" or "prob") to force
    the interpretation; otherwise it is inferred from the file shape.
    """
    mat = load_matrix(path)
    if kind not in (None, "partition", "prob"):
        raise ValueError(f"unknown atlas kind {kind!r}")
    rows, cols = mat.shape
    looks_partition = rows == 1 and np.array_equal(mat, np.round(mat))
    if kind == "partition" or (kind is None and looks_partition):
        if rows != 1:
            raise ValueError(f"{path}: partition atlas must be a 1 x v label vector")
        if not np.array_equal(mat, np.round(mat)):
            raise ValueError(f"{path}: partition labels must be integer-valued")
        labels = mat[0].astype(np.int64)
        atlas = Atlas.partition(labels)
    else:
        atlas = Atlas.probabilistic(mat)
    if atlas.c >= atlas.v:
        raise ValueError(f"{path}: atlas must compress (c={atlas.c} >= v={atlas.v})")
    return atlas


def save_atlas(atlas: Atlas, path) -> None:
    """Store an atlas as an SRMB file readable by :func:`load_atlas`."""
    if atlas.kind == "partition":
        save_matrix(atlas.labels.astype(np.float64)[None, :], path)
    else:
        save_matrix(atlas.weights, path)
