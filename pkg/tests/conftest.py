import numpy as np
import pytest

from srmkit import generate


@pytest.fixture
def make_dataset(tmp_path):
    """Factory for small planted datasets written under the test's tmp dir."""

    counter = {"i": 0}

    def _make(n=3, m=2, t_list=(40, 50), v=60, k=4, sigma=0.0, seed=11, **kw):
        counter["i"] += 1
        out = tmp_path / f"ds{counter['i']:02d}"
        return generate(n, m, list(t_list), v, k, sigma, seed=seed, out_dir=out, **kw)

    return _make


def random_orthonormal_rows(k, v, seed=0):
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((v, k)))
    return (q * np.sign(np.diag(r))).T
