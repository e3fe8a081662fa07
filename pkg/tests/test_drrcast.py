import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import uniform_volume
from ddgs import _backend
from ddgs.drrcast import (
    AnisoPerturbSpec, TargetError, load_target_set, render_targets, save_target_set, siddon_integral, siddon_rays,
)
from ddgs.geometry import Intrinsics, orbit_views
from ddgs.volume import AttenuationVolume, make_phantom, hu_to_density

pt = st.lists(st.floats(-8, 8), min_size=3, max_size=3).map(np.asarray)


def _random_volume(seed, dims=(5, 4, 6), spacing=(1.0, 0.7, 1.3), origin=(-2.0, -1.0, -3.0)):
    rng = np.random.default_rng(seed)
    return AttenuationVolume(dims=dims, spacing=spacing, origin=origin, density=rng.random(dims[::-1]), mu_scale=0.3)


def _march(v, src, dst, step):
    """Midpoint-rule quadrature of the piecewise-constant field along the clipped segment."""
    lo, hi = v.bounds
    d = dst - src
    with np.errstate(divide="ignore"):
        a0, a1 = (lo - src) / d, (hi - src) / d
    amin = max(0.0, np.max(np.minimum(a0, a1)))
    amax = min(1.0, np.min(np.maximum(a0, a1)))
    if amin >= amax:
        return 0.0
    length = np.linalg.norm(d) * (amax - amin)
    n = int(np.ceil(length / step))
    t = amin + (np.arange(n) + 0.5) / n * (amax - amin)
    p = src + t[:, None] * d
    idx = np.floor((p - lo) / np.asarray(v.spacing)).astype(int)
    idx = np.clip(idx, 0, np.asarray(v.dims) - 1)
    return float(np.sum(v.mu[idx[:, 2], idx[:, 1], idx[:, 0]]) * length / n)


def test_miss_is_zero(backend):
    v = uniform_volume()
    assert siddon_integral(v, [10, 10, 10], [20, 30, 10], backend) == 0.0
    assert siddon_integral(v, [-5, 1, 1], [-1, 1, 1], backend) == 0.0


def test_axis_aligned_uniform(backend):
    d, mu, s, n = 0.37, 0.02, 1.5, 7
    v = uniform_volume((n, 3, 3), (s, s, s), (0, 0, 0), density=d, mu_scale=mu)
    got = siddon_integral(v, [-10.0, s, s], [n * s + 10.0, s, s], backend)
    assert abs(got - d * mu * n * s) < 1e-12


def test_oblique_slab_matches_ray_marching(backend):
    v = uniform_volume((6, 6, 2), (1.0, 1.0, 1.0), (0, 0, 0), density=0.8, mu_scale=0.5)
    src, dst = np.array([-1.0, 2.2, -2.0]), np.array([4.0, 2.2, 3.0])  # 45° in the x-z plane
    ref = _march(v, src, dst, 1e-3)
    assert siddon_integral(v, src, dst, backend) == pytest.approx(ref, rel=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_random_volume_matches_ray_marching(seed, backend):
    v = _random_volume(seed)
    rng = np.random.default_rng(100 + seed)
    src, dst = rng.uniform(-10, 10, 3), rng.uniform(-10, 10, 3)
    ref = _march(v, src, dst, 1e-4)
    assert siddon_integral(v, src, dst, backend) == pytest.approx(ref, rel=1e-3, abs=1e-5)


def test_same_endpoints():
    with pytest.raises(TargetError):
        siddon_integral(uniform_volume(), [1, 1, 1], [1, 1, 1])


@settings(max_examples=60, deadline=None)
@given(pt, pt, st.floats(0.0, 1.0))
def test_additive_over_split(src, dst, t):
    if np.linalg.norm(dst - src) < 1e-3:
        return
    v = _random_volume(1)
    m = src + t * (dst - src)
    whole = siddon_integral(v, src, dst)
    parts = sum(siddon_integral(v, a, b) for a, b in ((src, m), (m, dst)) if not np.array_equal(a, b))
    assert abs(whole - parts) < 1e-10


@settings(max_examples=40, deadline=None)
@given(pt, pt)
def test_refinement_invariance(src, dst):
    if np.linalg.norm(dst - src) < 1e-3:
        return
    coarse = _random_volume(2, dims=(4, 3, 5), spacing=(1.0, 1.0, 1.0), origin=(-1.5, -1.0, -2.0))
    fine = AttenuationVolume(dims=(8, 3, 5), spacing=(0.5, 1.0, 1.0), origin=(-1.75, -1.0, -2.0),
                             density=np.repeat(coarse.density, 2, axis=2), mu_scale=coarse.mu_scale)
    assert abs(siddon_integral(coarse, src, dst) - siddon_integral(fine, src, dst)) < 1e-10


def test_backends_agree_on_siddon():
    if len(_backend.BACKENDS) < 2:
        pytest.skip("compiled kernels not built")
    v = _random_volume(3)
    rng = np.random.default_rng(0)
    src, dst = rng.uniform(-10, 10, (200, 3)), rng.uniform(-10, 10, (200, 3))
    assert np.allclose(siddon_rays(v, src, dst, "cython"), siddon_rays(v, src, dst, "python"), rtol=1e-12, atol=1e-14)


def _sphere_volume():
    spec = {"dims": [24, 24, 24], "spacing_mm": 2.0, "background_hu": -1000,
            "primitives": [{"type": "sphere", "center": [11.5, 11.5, 11.5], "radius": 8, "hu": 800}]}
    return hu_to_density(make_phantom(spec))


VIEWS = orbit_views([0.0, 90.0], 300.0, Intrinsics(60.0, 24, 24))


def test_empty_volume_gives_blank_targets():
    v = uniform_volume((4, 4, 4), density=0.0)
    ts = render_targets(v, VIEWS)
    assert all(np.all(img.pixels == 0) for img in ts.images)
    assert ts.normalization == {"offset": 0.0, "scale": 1.0}


def test_empty_view_list():
    with pytest.raises(TargetError):
        render_targets(uniform_volume(), [])


def test_symmetric_phantom_views_match():
    ts = render_targets(_sphere_volume(), VIEWS)
    a, b = ts.images[0].pixels, ts.images[1].pixels
    assert np.allclose(a, b, rtol=0, atol=1e-12)
    assert max(img.pixels.max() for img in ts.images) == pytest.approx(1.0, abs=1e-15)


def test_anisotropic_views_differ_within_bounds():
    plain = render_targets(_sphere_volume(), VIEWS)
    ts = render_targets(_sphere_volume(), VIEWS, AnisoPerturbSpec(0.1))
    a, b = ts.images[0].pixels, ts.images[1].pixels
    assert np.abs(a - b).max() > 1e-3
    lit = (plain.images[0].pixels > 1e-3) & (a < 1) & (b < 1)
    ratio = a[lit] / b[lit]
    assert ratio.max() <= 1.1 / 0.9 + 1e-12 and ratio.min() >= 0.9 / 1.1 - 1e-12
    # the modulation is the predicted gain evaluated along each pixel ray
    gain = AnisoPerturbSpec(0.1).gain(VIEWS[0].pixel_rays())
    assert np.allclose(a, np.clip(plain.images[0].pixels * gain, 0, 1))


def test_perturb_spec_validation():
    with pytest.raises(TargetError):
        AnisoPerturbSpec(0.2)
    with pytest.raises(TargetError):
        AnisoPerturbSpec(0.05, (0.0, 0.0, 0.0))
    assert np.linalg.norm(AnisoPerturbSpec(0.05).axis) == pytest.approx(1.0)


def test_target_set_round_trip(tmp_path):
    ts = render_targets(_sphere_volume(), VIEWS, AnisoPerturbSpec(0.1))
    save_target_set(ts, tmp_path / "t", {"seed": 3})
    back = load_target_set(tmp_path / "t")
    assert len(back) == 2 and back.meta["seed"] == 3 and back.meta["perturb"]["epsilon"] == 0.1
    assert back.normalization == ts.normalization
    for a, b in zip(ts.images, back.images):
        assert np.array_equal(a.pixels.astype(np.float32), b.pixels.astype(np.float32))
    assert len(list((tmp_path / "t").glob("*.png"))) == 2
