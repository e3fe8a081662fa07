import os
import subprocess
import sys

import numpy as np
import pytest

from ddgs import _backend
from ddgs.volume import hu_to_density, make_phantom


def _default_with(env_value):
    env = dict(os.environ, DDGS_BACKEND=env_value)
    return subprocess.run([sys.executable, "-c", "from ddgs import _backend; print(_backend.DEFAULT_BACKEND)"],
                          env=env, capture_output=True, text=True)


def test_env_forces_python():
    out = _default_with("python")
    assert out.returncode == 0 and out.stdout.strip() == "python"


def test_env_rejects_unknown():
    out = _default_with("fortran")
    assert out.returncode != 0 and "DDGS_BACKEND" in out.stderr


@pytest.mark.skipif("cython" not in _backend.BACKENDS, reason="extension not built")
def test_siddon_kernels_agree():
    spec = {"dims": [9, 7, 5], "spacing_mm": [1.0, 1.5, 2.0], "background_hu": -1000,
            "primitives": [{"type": "sphere", "center": [4, 3, 2], "radius": 3, "hu": 800}]}
    v = hu_to_density(make_phantom(spec))
    mu = np.ascontiguousarray(v.density * v.mu_scale)
    rng = np.random.default_rng(0)
    src = rng.uniform(-20, 30, (200, 3))
    dst = rng.uniform(-20, 30, (200, 3))
    a = _backend.BACKENDS["python"].siddon_batch(mu, np.asarray(v.origin, float), np.asarray(v.spacing, float), src, dst)
    b = _backend.BACKENDS["cython"].siddon_batch(mu, np.asarray(v.origin, float), np.asarray(v.spacing, float), src, dst)
    assert np.allclose(a, b, rtol=1e-12, atol=1e-12)
