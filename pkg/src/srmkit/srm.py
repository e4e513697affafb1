"""Shared response solvers and their primitives.

The model: each subject's run X_i^(s) (t x v) is approximated by S^(s) W_i
where S^(s) (t x k) is a shared per-run time course and W_i (k x v) are
subject-specific spatial components with orthonormal rows. Two fits are
provided: an alternating least-squares fit with closed-form half steps
(``detsrm_fit``) and an expectation-maximization fit of the Gaussian
formulation where the shared response is integrated out (``probsrm_fit``).

Factors are identified only up to a k x k rotation; downstream code should
compare products S W_i or row spaces, never raw factors.
"""

from __future__ import annotations

import json
import shutil
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .dataio import load_matrix, save_matrix

ORTHONORMALITY_TOL = 1e-8
SIGMA_EIG_FLOOR = 1e-10


def _procrustes_svd(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal row-space solution U V of the SVD of m, plus singular values."""
    u, d, vt = np.linalg.svd(m, full_matrices=False)
    # Sign convention: the largest-magnitude entry of each left singular
    # vector is made non-negative (ties break to the lowest index), with the
    # matching right singular vector flipped. Pins the degenerate sign
    # freedom so repeated runs emit identical factors.
    k = u.shape[1]
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(k)])
    signs[signs == 0] = 1.0
    u = u * signs
    vt = vt * signs[:, None]
    return u @ vt, d


def procrustes_update(m: np.ndarray) -> np.ndarray:
    """Closest orthonormal-row matrix to the row space of ``m``.

    For m = S^T X this is the closed-form minimizer of ||X - S W||_F over
    matrices W with W W^T = I_k. Scale-invariant: any positive rescaling of
    ``m`` yields the same result.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    k, v = m.shape
    if k > v:
        raise ValueError(f"need k <= v, got {k} x {v}")
    if not np.all(np.isfinite(m)):
        raise ValueError("input contains non-finite values")
    w, _ = _procrustes_svd(m)
    return w


def update_shared(runs, spatial) -> np.ndarray:
    """Average of X_i W_i^T across subjects, for one run.

    This is the closed-form least-squares update of the shared response and
    doubles as the transform of new data through fitted components. The sum
    runs in subject order with a float64 accumulator, so the result does not
    depend on scheduling.
    """
    if len(runs) != len(spatial):
        raise ValueError(f"{len(runs)} runs but {len(spatial)} component matrices")
    if not runs:
        raise ValueError("need at least one subject")
    t = runs[0].shape[0]
    k = spatial[0].shape[0]
    acc = np.zeros((t, k), dtype=np.float64)
    for x, w in zip(runs, spatial):
        if x.shape[0] != t:
            raise ValueError("runs disagree on timeframe count")
        if x.shape[1] != w.shape[1] or w.shape[0] != k:
            raise ValueError(f"shape mismatch: run {x.shape} vs components {w.shape}")
        acc += x @ w.T.astype(np.float64, copy=False)
    return acc / len(runs)


def reconstruct(w_i: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Predicted t x v data of one subject: the product S W_i."""
    if s.shape[1] != w_i.shape[0]:
        raise ValueError(f"shared response {s.shape} does not match components {w_i.shape}")
    return s @ w_i


class SharedResponse:
    """Per-run t_s x k shared time courses."""

    def __init__(self, runs):
        runs = [np.asarray(r) for r in runs]
        if not runs:
            raise ValueError("need at least one run")
        k = runs[0].shape[1]
        for r in runs:
            if r.ndim != 2 or r.shape[1] != k:
                raise ValueError("runs disagree on component count")
            if not np.all(np.isfinite(r)):
                raise ValueError("shared response contains non-finite values")
        self.runs = runs
        self.k = k

    def concatenated(self) -> np.ndarray:
        return np.concatenate(self.runs, axis=0)

    def __len__(self) -> int:
        return len(self.runs)

    def __getitem__(self, s: int) -> np.ndarray:
        return self.runs[s]


class SrmModel:
    """Fitted spatial components, optionally with noise/covariance parameters.

    ``spatial[i]`` is either an in-memory k x v array or a Path to an SRMB
    file (disk-backed components are loaded on demand and never pinned).
    ``sigma_sq`` (per-subject noise variances) and ``sigma_s`` (k x k shared
    covariance) are present only on probabilistic fits.
    """

    def __init__(self, spatial, sigma_sq=None, sigma_s=None, validate=True):
        if not spatial:
            raise ValueError("need at least one subject")
        self.spatial = list(spatial)
        self.sigma_sq = None if sigma_sq is None else np.asarray(sigma_sq, dtype=np.float64)
        self.sigma_s = None if sigma_s is None else np.asarray(sigma_s, dtype=np.float64)
        first = self.spatial_component(0)
        self.k, self.v = first.shape
        if validate:
            for i in range(self.n):
                check_orthonormal(self.spatial_component(i))
        if self.sigma_sq is not None and (
            self.sigma_sq.shape != (self.n,) or np.any(self.sigma_sq <= 0)
        ):
            raise ValueError("sigma_sq must hold one positive value per subject")
        if self.sigma_s is not None:
            if self.sigma_s.shape != (self.k, self.k):
                raise ValueError("sigma_s must be k x k")
            if not np.allclose(self.sigma_s, self.sigma_s.T, atol=1e-10):
                raise ValueError("sigma_s must be symmetric")
            eigvals = np.linalg.eigvalsh(self.sigma_s)
            if eigvals[0] < -1e-10 * max(abs(eigvals[-1]), 1.0):
                raise ValueError("sigma_s must be positive semi-definite")

    @property
    def n(self) -> int:
        return len(self.spatial)

    def spatial_component(self, i: int) -> np.ndarray:
        w = self.spatial[i]
        if isinstance(w, (str, Path)):
            return load_matrix(w)
        return w

    def is_on_disk(self, i: int) -> bool:
        return isinstance(self.spatial[i], (str, Path))

    def save(self, directory) -> None:
        """Serialize as a directory: JSON descriptor plus one SRMB file per subject."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        names = []
        for i in range(self.n):
            name = f"w_{i:03d}.srmb"
            dest = directory / name
            if self.is_on_disk(i):
                src = Path(self.spatial[i])
                if src.resolve() != dest.resolve():
                    shutil.copyfile(src, dest)
            else:
                save_matrix(np.asarray(self.spatial[i], dtype=np.float64), dest)
            names.append(name)
        desc = {
            "format": "srmkit-model",
            "version": 1,
            "k": self.k,
            "n": self.n,
            "v": self.v,
            "dtype": "f64",
            "components": names,
            "sigma_sq": None if self.sigma_sq is None else self.sigma_sq.tolist(),
            "sigma_s": None,
        }
        if self.sigma_s is not None:
            save_matrix(self.sigma_s, directory / "sigma_s.srmb")
            desc["sigma_s"] = "sigma_s.srmb"
        with open(directory / "model.json", "w") as f:
            json.dump(desc, f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, directory, keep_on_disk: bool = True) -> "SrmModel":
        directory = Path(directory)
        with open(directory / "model.json") as f:
            desc = json.load(f)
        paths = [directory / name for name in desc["components"]]
        spatial = paths if keep_on_disk else [load_matrix(p) for p in paths]
        sigma_s = None
        if desc.get("sigma_s"):
            sigma_s = load_matrix(directory / desc["sigma_s"])
        model = cls(spatial, sigma_sq=desc.get("sigma_sq"), sigma_s=sigma_s, validate=not keep_on_disk)
        if (model.k, model.n, model.v) != (desc["k"], desc["n"], desc["v"]):
            raise ValueError(f"{directory}: descriptor does not match component files")
        return model


def check_orthonormal(w: np.ndarray, tol: float = ORTHONORMALITY_TOL) -> None:
    gram = w @ w.T
    dev = np.max(np.abs(gram - np.eye(w.shape[0])))
    if dev > tol:
        raise ValueError(f"rows are not orthonormal (max deviation {dev:.3g})")


# ---------------------------------------------------------------------------
# shared fit plumbing


def _validate_stack(data, k):
    """Check the [subject][run] layout and return (n, m, t_per_run, v)."""
    n = len(data)
    if n < 1:
        raise ValueError("need at least one subject")
    m = len(data[0])
    if m < 1:
        raise ValueError("need at least one run")
    if any(len(runs) != m for runs in data):
        raise ValueError("subjects disagree on run count")
    v = data[0][0].shape[1]
    t_per_run = [data[0][s].shape[0] for s in range(m)]
    for i, runs in enumerate(data):
        for s, x in enumerate(runs):
            if x.ndim != 2:
                raise ValueError(f"subject {i} run {s}: expected a matrix")
            if x.shape != (t_per_run[s], v):
                raise ValueError(
                    f"subject {i} run {s}: shape {x.shape}, expected ({t_per_run[s]}, {v})"
                )
            if not np.all(np.isfinite(x)):
                raise ValueError(f"subject {i} run {s}: non-finite values")
    total_t = sum(t_per_run)
    if k > min(v, total_t):
        raise ValueError(f"k={k} exceeds min(v={v}, total timeframes={total_t})")
    if k < 1:
        raise ValueError("k must be at least 1")
    return n, m, t_per_run, v


def init_spatial(n: int, k: int, v: int, seed) -> list[np.ndarray]:
    """Seeded starting components: per subject, the orthonormalized rows of a
    Gaussian k x v draw (Q factor with a fixed sign convention)."""
    rng = np.random.default_rng(seed)
    spatial = []
    for _ in range(n):
        g = rng.standard_normal((k, v))
        q, r = np.linalg.qr(g.T)
        signs = np.sign(np.diag(r))
        signs[signs == 0] = 1.0
        spatial.append((q * signs).T)
    return spatial


def _map_subjects(fn, n, n_jobs):
    """Apply fn(i) for i in range(n); results in subject order regardless of pool."""
    if n_jobs <= 1 or n == 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, range(n)))


def _accumulate_product(a, b, acc, scratch) -> None:
    """acc += a @ b without allocating the product, when dtypes permit."""
    try:
        np.matmul(a, b, out=scratch)
    except TypeError:
        scratch = np.matmul(a, b)
    acc += scratch


# ---------------------------------------------------------------------------
# alternating least-squares fit


def detsrm_fit(data, k: int, n_iter: int = 10, seed=0, n_jobs: int = 1):
    """Alternating minimization of sum_i ||X_i - S W_i||^2 with orthonormal W_i.

    Parameters
    ----------
    data : list of list of ndarray
        ``data[i][s]`` is the t_s x v matrix of subject i, run s. All
        subjects share v and, within a run, t_s.
    k : int
        Number of components; at most min(v, total timeframes).
    n_iter : int
        Fixed iteration count (no convergence tolerance); each iteration is
        one exact shared-response update followed by one exact per-subject
        component update, so the objective never increases.
    seed
        Seeds the component initialization.
    n_jobs : int
        Upper bound on concurrent per-subject updates. Has no effect on the
        result.

    Returns
    -------
    (SrmModel, SharedResponse)
        The model carries ``objective_trace``, the exact residual
        sum-of-squares after every full iteration.
    """
    if n_iter < 1:
        raise ValueError("n_iter must be at least 1")
    n, m, t_per_run, v = _validate_stack(data, k)
    spatial = init_spatial(n, k, v, seed)
    shared = None
    trace = []
    max_t = max(t_per_run)
    for _ in range(n_iter):
        shared = [update_shared([data[i][s] for i in range(n)], spatial) for s in range(m)]

        def update_subject(i):
            # scratch is per call, so worker threads never share it
            acc = np.zeros((k, v), dtype=np.float64)
            scratch = np.empty((k, v), dtype=np.float64)
            for s in range(m):
                _accumulate_product(shared[s].T, data[i][s], acc, scratch)
            w, _ = _procrustes_svd(acc)
            return w

        spatial = _map_subjects(update_subject, n, n_jobs)

        def subject_residual(i):
            buf = np.empty((max_t, v), dtype=np.float64)
            sq = 0.0
            for s in range(m):
                pred = np.matmul(shared[s], spatial[i], out=buf[: t_per_run[s]])
                np.subtract(data[i][s], pred, out=pred)
                flat = pred.ravel()
                sq += float(np.dot(flat, flat))
            return sq

        trace.append(float(sum(_map_subjects(subject_residual, n, n_jobs))))
    model = SrmModel(spatial, validate=False)
    model.objective_trace = trace
    return model, SharedResponse(shared)


# ---------------------------------------------------------------------------
# expectation-maximization fit


def shared_posterior(run_stack, spatial, sigma_sq, sigma_s):
    """Gaussian posterior of the shared response given one run of all subjects.

    Returns (mean, cov): the t x k posterior means and the k x k posterior
    covariance (identical across timepoints). Exploits the orthonormality of
    each W_i, which collapses the nv-dimensional conditioning to k x k
    solves: the posterior covariance is (Sigma^-1 + sum_i I/sigma_i^2)^-1.
    """
    k = spatial[0].shape[0]
    alpha = float(np.sum(1.0 / np.asarray(sigma_sq)))
    b = np.eye(k) + alpha * sigma_s
    cov = np.linalg.solve(b, sigma_s)
    cov = (cov + cov.T) / 2.0
    t = run_stack[0].shape[0]
    q = np.zeros((t, k), dtype=np.float64)
    for x, w, s2 in zip(run_stack, spatial, sigma_sq):
        q += (x @ w.T.astype(np.float64, copy=False)) / s2
    return q @ cov, cov


def probsrm_fit(data, k: int, n_iter: int = 10, seed=0, n_jobs: int = 1):
    """EM fit of the Gaussian shared response model.

    The shared response S[tau] ~ N(0, Sigma) is integrated out; each subject
    has its own isotropic noise variance sigma_i^2 and orthonormal W_i. Data
    are centered per time-course before fitting (the model has no intercept).

    The E-step computes the exact posterior of S given all subjects; the
    M-step solves the expected complete-data problem in closed form (a
    Procrustes step per subject, then stationary updates of Sigma and each
    sigma_i^2), so the observed-data log-likelihood never decreases. The
    guarantee holds while the model stays non-degenerate: on noiseless or
    rank-deficient data the likelihood itself diverges, the covariance
    eigenvalue floor engages (reported via RuntimeWarning) and the recorded
    trace is no longer meaningful.

    Returns (SrmModel, SharedResponse) where the shared response holds the
    posterior means under the final parameters. The model carries
    ``loglik_trace`` with n_iter + 1 entries: the initial parameters and
    every update thereafter.
    """
    if n_iter < 1:
        raise ValueError("n_iter must be at least 1")
    n, m, t_per_run, v = _validate_stack(data, k)
    total_t = sum(t_per_run)

    # Enforce centered time-courses on a private copy (float64 for the EM math).
    centered = [
        [np.asarray(x, dtype=np.float64) - np.asarray(x, dtype=np.float64).mean(axis=0) for x in runs]
        for runs in data
    ]
    ssq = np.array(
        [sum(float(np.dot(x.ravel(), x.ravel())) for x in runs) for runs in centered]
    )

    spatial = init_spatial(n, k, v, seed)
    sigma_s = np.eye(k)
    sigma_sq = np.ones(n)
    trace = []
    post_means = None

    def e_step():
        """Posterior moments and the observed-data log-likelihood at the
        current parameters, via the k x k collapsed form."""
        alpha = float(np.sum(1.0 / sigma_sq))
        b = np.eye(k) + alpha * sigma_s
        cov = np.linalg.solve(b, sigma_s)
        cov = (cov + cov.T) / 2.0
        means = []
        quad = float(np.sum(ssq / sigma_sq))
        for s in range(m):
            q = np.zeros((t_per_run[s], k), dtype=np.float64)
            for i in range(n):
                q += (centered[i][s] @ spatial[i].T) / sigma_sq[i]
            mu = q @ cov
            quad -= float(np.sum(mu * q))
            means.append(mu)
        sign, logdet_b = np.linalg.slogdet(b)
        if sign <= 0:
            raise FloatingPointError("shared covariance update lost positive definiteness")
        logdet = v * float(np.sum(np.log(sigma_sq))) + logdet_b
        ll = -0.5 * (total_t * (n * v * np.log(2.0 * np.pi) + logdet) + quad)
        return means, cov, ll

    for _ in range(n_iter):
        post_means, post_cov, ll = e_step()
        trace.append(float(ll))

        msq = sum(float(np.sum(mu * mu)) for mu in post_means)
        second_moment = total_t * post_cov + sum(mu.T @ mu for mu in post_means)

        def update_subject(i):
            acc = np.zeros((k, v), dtype=np.float64)
            scratch = np.empty((k, v), dtype=np.float64)
            for s in range(m):
                _accumulate_product(post_means[s].T, centered[i][s], acc, scratch)
            w, d = _procrustes_svd(acc)
            resid = ssq[i] - 2.0 * float(np.sum(d)) + total_t * float(np.trace(post_cov)) + msq
            return w, max(resid / (total_t * v), 1e-30)

        updated = _map_subjects(update_subject, n, n_jobs)
        spatial = [w for w, _ in updated]
        sigma_sq = np.array([s2 for _, s2 in updated])

        sigma_s = second_moment / total_t
        sigma_s = (sigma_s + sigma_s.T) / 2.0
        eigvals, eigvecs = np.linalg.eigh(sigma_s)
        if eigvals[0] < SIGMA_EIG_FLOOR:
            warnings.warn(
                f"shared covariance eigenvalue {eigvals[0]:.3g} floored at {SIGMA_EIG_FLOOR}",
                RuntimeWarning,
                stacklevel=2,
            )
            eigvals = np.maximum(eigvals, SIGMA_EIG_FLOOR)
            sigma_s = (eigvecs * eigvals) @ eigvecs.T
            sigma_s = (sigma_s + sigma_s.T) / 2.0

    post_means, _, ll = e_step()
    trace.append(float(ll))
    model = SrmModel(spatial, sigma_sq=sigma_sq, sigma_s=sigma_s, validate=False)
    model.loglik_trace = trace
    return model, SharedResponse(post_means)
