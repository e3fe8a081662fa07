"""Differentiable tile rasterizer for the two Gaussian sets.

Both sets are merged into a single render list (isotropic first), projected,
binned into 16x16 tiles and composited front to back::

    C(p) = sum_j c_j sigma_j prod_{l<j} (1 - sigma_l)
    sigma_j = min(0.99, alpha_j exp(-1/2 (p - m_j)^T S_j^-1 (p - m_j)))

Compositing stops once transmittance would fall below 1e-4. Gradients are
exact for the truncation decisions taken by the forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _backend
from .geometry import EPS_LOWPASS, Z_NEAR, CameraView, perspective_jacobian, quat_to_rotmat, quat_to_rotmat_vjp, skew
from .gsmodel import DIRECTIONAL, ISOTROPIC, GaussianSet, RadiosityModel, sh_basis, sigmoid

TILE_SIZE = 16
FOOTPRINT_SIGMAS = 3.0


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class RenderedImage:
    """Monochrome radiograph, ``pixels[row, col]`` in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.size == 0:
            raise RenderError("image must be a non-empty 2D array")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class RenderIntermediates:
    view: CameraView
    model: RadiosityModel
    sets: tuple[GaussianSet, GaussianSet]
    backend: str
    visible: np.ndarray  # merged indices of Gaussians in front of z_near
    x_cam: np.ndarray
    rotmats: np.ndarray
    scales: np.ndarray
    cov_cam: np.ndarray
    jac: np.ndarray
    conics: np.ndarray
    means2d: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    is_dir: np.ndarray
    dir_unit: np.ndarray  # only for visible directional Gaussians
    dir_norm: np.ndarray
    sh: np.ndarray
    sh_grad: np.ndarray
    tile_ranges: np.ndarray
    point_list: np.ndarray
    raw_image: np.ndarray
    final_t: np.ndarray
    n_contrib: np.ndarray
    radii: np.ndarray = field(default=None)


@dataclass
class RenderGradients:
    iso: dict
    dir: dict
    b_iso: np.ndarray
    B_dir: np.ndarray
    pose: np.ndarray | None
    screen_grad_iso: np.ndarray
    screen_grad_dir: np.ndarray
    visible_iso: np.ndarray
    visible_dir: np.ndarray


def _zero_grads(gs: GaussianSet) -> dict:
    return {p: np.zeros_like(getattr(gs, p)) for p in GaussianSet.PARAMS}


def _bin_tiles(means2d, cov2d, depth, order_key, width, height):
    tiles_x = (width + TILE_SIZE - 1) // TILE_SIZE
    tiles_y = (height + TILE_SIZE - 1) // TILE_SIZE
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    lam = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)
    radii = np.ceil(FOOTPRINT_SIGMAS * np.sqrt(lam))
    mx, my = means2d[:, 0], means2d[:, 1]
    x_lo = np.maximum(np.floor((mx - radii) / TILE_SIZE), 0)
    x_hi = np.minimum(np.floor((mx + radii) / TILE_SIZE), tiles_x - 1)
    y_lo = np.maximum(np.floor((my - radii) / TILE_SIZE), 0)
    y_hi = np.minimum(np.floor((my + radii) / TILE_SIZE), tiles_y - 1)
    wx = np.maximum(x_hi - x_lo + 1, 0).astype(np.int64)
    wy = np.maximum(y_hi - y_lo + 1, 0).astype(np.int64)
    counts = wx * wy
    total = int(counts.sum())
    gid = np.repeat(np.arange(len(counts), dtype=np.int64), counts)
    first = np.repeat(np.cumsum(counts) - counts, counts)
    off = np.arange(total, dtype=np.int64) - first
    tx = x_lo.astype(np.int64)[gid] + off % wx[gid]
    ty = y_lo.astype(np.int64)[gid] + off // wx[gid]
    tile = ty * tiles_x + tx
    order = np.lexsort((order_key[gid], depth[gid], tile))
    point_list = np.ascontiguousarray(gid[order])
    sorted_tiles = tile[order]
    n_tiles = tiles_x * tiles_y
    bounds = np.searchsorted(sorted_tiles, np.arange(n_tiles + 1))
    tile_ranges = np.ascontiguousarray(np.stack([bounds[:-1], bounds[1:]], axis=1).astype(np.int64))
    return tile_ranges, point_list, radii


def render(iso: GaussianSet, dir: GaussianSet, model: RadiosityModel, view: CameraView,
           backend: str | None = None) -> tuple[RenderedImage, RenderIntermediates]:
    """Jointly rasterize both sets; returns the image and backward-pass state."""
    for gs in (iso, dir):
        if len(gs) and gs.k != model.k:
            raise RenderError(f"feature dimension {gs.k} does not match model k={model.k}")
    width, height = view.width, view.height
    if width < 1 or height < 1:
        raise RenderError("zero-sized image")

    n_iso = len(iso)
    positions = np.concatenate([iso.positions, dir.positions])
    rotations = np.concatenate([iso.rotations, dir.rotations])
    log_scales = np.concatenate([iso.log_scales, dir.log_scales])
    opacity_logits = np.concatenate([iso.opacity_logits, dir.opacity_logits])
    features = np.concatenate([iso.features.reshape(-1, model.k), dir.features.reshape(-1, model.k)])

    w = view.pose.matrix
    x_cam_all = positions @ w.T + view.pose.translation
    visible = np.flatnonzero(x_cam_all[:, 2] > Z_NEAR)
    x_cam = x_cam_all[visible]
    is_dir = visible >= n_iso

    focal = view.intrinsics.focal_px
    cx, cy = view.intrinsics.principal
    z = x_cam[:, 2]
    means2d = np.ascontiguousarray(np.stack([cx + focal * x_cam[:, 0] / z, cy + focal * x_cam[:, 1] / z], axis=1))

    rotmats = quat_to_rotmat(rotations[visible])
    scales = np.exp(log_scales[visible])
    m = rotmats * scales[:, None, :]
    cov3d = m @ np.swapaxes(m, 1, 2)
    cov_cam = w @ cov3d @ w.T
    jac = perspective_jacobian(x_cam, focal)
    cov2d = jac @ cov_cam @ np.swapaxes(jac, 1, 2)
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, 1, 2))
    cov2d[:, 0, 0] += EPS_LOWPASS
    cov2d[:, 1, 1] += EPS_LOWPASS
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conics = np.ascontiguousarray(np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1))

    opacities = np.ascontiguousarray(sigmoid(opacity_logits[visible]))
    feats = features[visible]
    colors = np.empty(len(visible))
    # row-wise reductions rather than BLAS products keep each color independent
    # of its row position, so input order cannot change the rounding
    colors[~is_dir] = sigmoid(np.sum(feats[~is_dir] * model.b_iso, axis=1))
    dvec = positions[visible[is_dir]] - view.pose.camera_center
    dnorm = np.linalg.norm(dvec, axis=1)
    dunit = dvec / dnorm[:, None]
    sh, sh_grad = sh_basis(dunit, model.L, with_grad=True)
    coeff = np.sum(feats[is_dir][:, None, :] * model.B_dir[None, :, :], axis=2)
    logits_dir = np.sum(sh * coeff, axis=1)
    colors[is_dir] = sigmoid(logits_dir)
    colors = np.ascontiguousarray(colors)

    tile_ranges, point_list, radii = _bin_tiles(means2d, cov2d, z, visible, width, height)
    name = backend or _backend.DEFAULT_BACKEND
    kern = _backend.get(name)
    raw, final_t, n_contrib = kern.rasterize_forward(
        tile_ranges, point_list, means2d, conics, opacities, colors, width, height, TILE_SIZE
    )
    inter = RenderIntermediates(
        view=view, model=model, sets=(iso, dir), backend=name, visible=visible, x_cam=x_cam,
        rotmats=rotmats, scales=scales, cov_cam=cov_cam, jac=jac, conics=conics, means2d=means2d,
        opacities=opacities, colors=colors, is_dir=is_dir, dir_unit=dunit, dir_norm=dnorm, sh=sh,
        sh_grad=sh_grad, tile_ranges=tile_ranges, point_list=point_list, raw_image=raw,
        final_t=final_t, n_contrib=n_contrib, radii=radii,
    )
    return RenderedImage(np.clip(raw, 0.0, 1.0)), inter


def render_set_solo(gs: GaussianSet, model: RadiosityModel, view: CameraView, backend: str | None = None) -> RenderedImage:
    """Diagnostic render of one set alone (not a valid simulation output)."""
    empty = GaussianSet.empty(model.k, DIRECTIONAL if gs.kind == ISOTROPIC else ISOTROPIC)
    if gs.kind == ISOTROPIC:
        return render(gs, empty, model, view, backend)[0]
    return render(empty, gs, model, view, backend)[0]


def render_backward(inter: RenderIntermediates, dl_dpixels, want_pose_grad: bool = False) -> RenderGradients:
    view = inter.view
    dl = np.ascontiguousarray(dl_dpixels, dtype=np.float64)
    if dl.shape != inter.raw_image.shape:
        raise RenderError(f"gradient shape {dl.shape} does not match image {inter.raw_image.shape}")
    if not np.all(np.isfinite(dl)):
        raise RenderError("non-finite pixel gradient")
    dl = np.where((inter.raw_image >= 0.0) & (inter.raw_image <= 1.0), dl, 0.0)

    kern = _backend.get(inter.backend)
    g_means2d, g_conics, g_opac, g_colors = kern.rasterize_backward(
        inter.tile_ranges, inter.point_list, inter.means2d, inter.conics, inter.opacities,
        inter.colors, inter.final_t, inter.n_contrib, dl, view.width, view.height, TILE_SIZE,
    )

    iso, dir = inter.sets
    model = inter.model
    n_iso = len(iso)
    vis = inter.visible
    is_dir = inter.is_dir
    focal = view.intrinsics.focal_px
    w = view.pose.matrix
    x, y, z = inter.x_cam[:, 0], inter.x_cam[:, 1], inter.x_cam[:, 2]

    # conic -> 2D covariance -> camera covariance and Jacobian
    q = np.empty((len(vis), 2, 2))
    q[:, 0, 0], q[:, 0, 1], q[:, 1, 0], q[:, 1, 1] = (
        inter.conics[:, 0], inter.conics[:, 1], inter.conics[:, 1], inter.conics[:, 2])
    gq = np.empty_like(q)
    gq[:, 0, 0], gq[:, 0, 1], gq[:, 1, 0], gq[:, 1, 1] = (
        g_conics[:, 0], g_conics[:, 1], g_conics[:, 1], g_conics[:, 2])
    g_cov2d = -q @ gq @ q
    jac = inter.jac
    g_cov_cam = np.swapaxes(jac, 1, 2) @ g_cov2d @ jac
    g_jac = 2.0 * g_cov2d @ jac @ inter.cov_cam

    # camera-frame positions: through the projected mean and the Jacobian
    gu, gv = g_means2d[:, 0], g_means2d[:, 1]
    g_xc = np.empty((len(vis), 3))
    z2 = z * z
    g_xc[:, 0] = gu * focal / z - g_jac[:, 0, 2] * focal / z2
    g_xc[:, 1] = gv * focal / z - g_jac[:, 1, 2] * focal / z2
    g_xc[:, 2] = (-(gu * x + gv * y) * focal / z2
                  - (g_jac[:, 0, 0] + g_jac[:, 1, 1]) * focal / z2
                  + 2.0 * focal * (g_jac[:, 0, 2] * x + g_jac[:, 1, 2] * y) / (z2 * z))
    g_pos = g_xc @ w

    # covariance -> scale and rotation
    g_cov3d = w.T @ g_cov_cam @ w
    rot = inter.rotmats
    s = inter.scales
    mmat = rot * s[:, None, :]
    g_m = 2.0 * g_cov3d @ mmat
    g_scale = np.einsum("nri,nri->ni", g_m, rot)
    g_logs = g_scale * s
    g_rotmat = g_m * s[:, None, :]
    all_rot = np.concatenate([iso.rotations, dir.rotations])[vis]
    g_quat = quat_to_rotmat_vjp(all_rot, g_rotmat)

    g_logit_op = g_opac * inter.opacities * (1.0 - inter.opacities)

    # radiosity
    c = inter.colors
    g_lc = g_colors * c * (1.0 - c)
    feats = np.concatenate([iso.features.reshape(-1, model.k), dir.features.reshape(-1, model.k)])[vis]
    g_feat = np.empty((len(vis), model.k))
    iso_mask = ~is_dir
    g_feat[iso_mask] = g_lc[iso_mask, None] * model.b_iso[None, :]
    g_b = g_lc[iso_mask] @ feats[iso_mask]
    gl_dir = g_lc[is_dir]
    g_feat[is_dir] = gl_dir[:, None] * (inter.sh @ model.B_dir)
    g_B = (gl_dir[:, None] * inter.sh).T @ feats[is_dir]
    g_sh = gl_dir[:, None] * (feats[is_dir] @ model.B_dir.T)
    g_unit = np.einsum("nk,nkj->nj", g_sh, inter.sh_grad)
    u = inter.dir_unit
    g_dvec = (g_unit - u * np.sum(g_unit * u, axis=1, keepdims=True)) / inter.dir_norm[:, None]
    g_pos[is_dir] += g_dvec

    out = {}
    for name, gs, sel, offset in (("iso", iso, iso_mask, 0), ("dir", dir, is_dir, n_iso)):
        grads = _zero_grads(gs)
        idx = vis[sel] - offset
        grads["positions"][idx] = g_pos[sel]
        grads["rotations"][idx] = g_quat[sel]
        grads["log_scales"][idx] = g_logs[sel]
        grads["opacity_logits"][idx] = g_logit_op[sel]
        grads["features"][idx] = g_feat[sel]
        screen = np.zeros(len(gs))
        screen[idx] = np.hypot(g_means2d[sel, 0] * 0.5 * view.width, g_means2d[sel, 1] * 0.5 * view.height)
        seen = np.zeros(len(gs), dtype=bool)
        seen[idx] = True
        out[name] = (grads, screen, seen)

    pose_grad = None
    if want_pose_grad:
        g_v = g_xc.sum(axis=0) + w @ g_dvec.sum(axis=0)
        g_w = np.cross(inter.x_cam, g_xc).sum(axis=0)
        anti = inter.cov_cam @ g_cov_cam - g_cov_cam @ inter.cov_cam
        gens = np.stack([skew(e) for e in np.eye(3)])
        g_w += np.einsum("kij,nji->k", gens, anti)
        pose_grad = np.concatenate([g_w, g_v])

    return RenderGradients(
        iso=out["iso"][0], dir=out["dir"][0], b_iso=g_b, B_dir=g_B, pose=pose_grad,
        screen_grad_iso=out["iso"][1], screen_grad_dir=out["dir"][1],
        visible_iso=out["iso"][2], visible_dir=out["dir"][2],
    )
