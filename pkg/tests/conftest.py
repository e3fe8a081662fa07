import numpy as np
import pytest

from ddgs import _backend
from ddgs.geometry import CameraView, Intrinsics, orbit_pose, perturb_pose
from ddgs.gsmodel import DIRECTIONAL, ISOTROPIC, GaussianSet, RadiosityModel, logit
from ddgs.splat import render, render_backward
from ddgs.volume import AttenuationVolume


def random_scene(seed, n=10, size=32, k=8, L=1):
    """Both sets populated, Gaussians in a 30 mm cube seen from 200 mm."""
    rng = np.random.default_rng(seed)

    def mk(m, kind):
        return GaussianSet(rng.uniform(-15, 15, (m, 3)), rng.normal(size=(m, 4)),
                           rng.uniform(np.log(2), np.log(6), (m, 3)), logit(rng.uniform(0.05, 0.6, m)),
                           rng.normal(0, 1, (m, k)), kind)

    iso = mk(n // 2, ISOTROPIC)
    dir_ = mk(n - n // 2, DIRECTIONAL)
    kl = L * (L + 2)
    model = RadiosityModel(rng.normal(0, 0.5, k), rng.normal(0, 0.5, (kl, k)), L)
    view = CameraView(orbit_pose(rng.uniform(-90, 90), 200.0), Intrinsics(120.0, size, size))
    weights = rng.normal(size=(size, size))
    return iso, dir_, model, view, weights


def _objective(iso, dir_, model, view, w, backend=None):
    return float(np.sum(render(iso, dir_, model, view, backend)[0].pixels * w))


def fd_violation(seed, backend, h=1e-4):
    """Largest violation of |fd - analytic| ≤ max(1e-4 |fd|, 1e-7) over every parameter."""
    iso, dir_, model, view, w = random_scene(seed)
    _, inter = render(iso, dir_, model, view, backend)
    g = render_backward(inter, w, want_pose_grad=True)
    pairs = [(getattr(s, p), gg[p]) for s, gg in ((iso, g.iso), (dir_, g.dir)) for p in GaussianSet.PARAMS]
    pairs += [(model.b_iso, g.b_iso), (model.B_dir, g.B_dir)]
    worst = 0.0
    for arr, an in pairs:
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            lp = _objective(iso, dir_, model, view, w, backend)
            arr[idx] = old - h
            lm = _objective(iso, dir_, model, view, w, backend)
            arr[idx] = old
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(fd - an[idx]) / max(1e-4 * abs(fd), 1e-7))
    for i in range(6):
        e = np.zeros(6)
        # rotations act at ~200 mm, so scale their step to move points about as far as h
        e[i] = h / 100.0 if i < 3 else h
        lp = _objective(iso, dir_, model, view.with_pose(perturb_pose(view.pose, e)), w, backend)
        lm = _objective(iso, dir_, model, view.with_pose(perturb_pose(view.pose, -e)), w, backend)
        fd = (lp - lm) / (2 * e[i])
        worst = max(worst, abs(fd - g.pose[i]) / max(1e-4 * abs(fd), 1e-7))
    return worst


def uniform_volume(dims=(4, 4, 4), spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), density=0.5, mu_scale=1.0):
    d = np.full(dims[::-1], density)
    return AttenuationVolume(dims=dims, spacing=spacing, origin=origin, density=d, mu_scale=mu_scale)


@pytest.fixture(params=sorted(_backend.BACKENDS))
def backend(request):
    return request.param


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
