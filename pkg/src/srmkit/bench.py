"""Wall-time and peak-memory instrumentation for comparing the fits.

Memory is self-measured: a background thread polls the process resident set
at 10 Hz while the workload runs and keeps the maximum. Numbers from this
harness are therefore comparable to each other, but not to figures from
external profilers.
"""

from __future__ import annotations

import gc
import os
import threading
import time
import warnings

from .dataio import DatasetManifest
from .fastsrm import FastSrmConfig, fastsrm_fit
from .srm import detsrm_fit, probsrm_fit

_PAGE_SIZE = os.sysconf("SC_PAGE_SIZE") if hasattr(os, "sysconf") else 4096


def _open_rss_reader():
    """Cheapest available RSS probe: a persistent /proc handle, else psutil."""
    try:
        handle = open("/proc/self/statm", "rb")

        def read():
            handle.seek(0)
            return int(handle.read().split()[1]) * _PAGE_SIZE

        return read, handle.close
    except OSError:
        pass
    try:
        import psutil

        proc = psutil.Process()
        return (lambda: proc.memory_info().rss), (lambda: None)
    except Exception:
        return None, None


class PeakRssSampler:
    """Context manager recording the peak resident set size while active.

    Polls at ``interval`` seconds (default 0.1 s, i.e. 10 Hz); each poll is
    one /proc read, and sleep syscalls themselves are not free on every
    kernel, so the default rate keeps total overhead well under 2% of the
    measured workload.
    """

    def __init__(self, interval: float = 0.1):
        self.interval = interval
        self.peak_bytes: int | None = None
        self._stop = False
        self._thread = None
        self._read = None
        self._close = None

    def _run(self):
        peak = self._read()
        while not self._stop:
            time.sleep(self.interval)
            rss = self._read()
            if rss > peak:
                peak = rss
        self.peak_bytes = max(peak, self._read())

    def __enter__(self):
        self._read, self._close = _open_rss_reader()
        if self._read is None:
            warnings.warn("memory sampling unsupported on this platform", RuntimeWarning)
            return self
        self._stop = False
        self._thread = threading.Thread(target=self._run, name="srmkit-rss-sampler", daemon=True)
        self._thread.start()
        return self

    def __exit__(self, *exc):
        if self._thread is not None:
            self._stop = True
            self._thread.join()
            self._thread = None
        if self._close is not None:
            self._close()
            self._read = self._close = None
        return False


def run_bench(
    manifest: DatasetManifest,
    algorithm: str,
    k: int,
    atlas=None,
    atlas_id: str | None = None,
    n_iter: int = 10,
    seed: int = 0,
    temp_dir=None,
) -> dict:
    """Time one fit end to end (including its data loading) and report it.

    Fits run single-threaded (n_jobs=1) so that timings compare algorithms,
    not scheduling. Returns a JSON-ready report; ``peak_mem_bytes`` is
    omitted (with a warning) where sampling is unsupported.
    """
    gc.collect()
    sampler = PeakRssSampler()
    start = time.perf_counter()
    with sampler:
        if algorithm == "fastsrm":
            if atlas is None:
                raise ValueError("fastsrm needs an atlas")
            cfg = FastSrmConfig(k=k, n_iter=n_iter, seed=seed, temp_dir=temp_dir)
            model = fastsrm_fit(manifest, atlas, cfg)
            trace = model.objective_trace
        elif algorithm in ("detsrm", "probsrm"):
            data = manifest.load_all()
            fit = detsrm_fit if algorithm == "detsrm" else probsrm_fit
            model, _ = fit(data, k, n_iter=n_iter, seed=seed)
            trace = model.objective_trace if algorithm == "detsrm" else model.loglik_trace
            del data
        else:
            raise ValueError(f"unknown algorithm {algorithm!r}")
    wall = time.perf_counter() - start
    del model
    gc.collect()
    report = {
        "algorithm": algorithm,
        "k": int(k),
        "atlas": atlas_id,
        "wall_time_s": float(wall),
        "n": manifest.n_subjects,
        "m": manifest.n_runs,
        "t": list(manifest.t_per_run),
        "v": manifest.v,
        "n_iter": int(n_iter),
        "seed": int(seed),
        "trace": [float(x) for x in trace],
    }
    if sampler.peak_bytes is not None:
        report["peak_mem_bytes"] = int(sampler.peak_bytes)
    return report
