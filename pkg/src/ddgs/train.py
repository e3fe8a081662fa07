"""Fitting both Gaussian sets to a target image set.

The loss is ``(1 - lam) * mean|pred - target| + lam * (1 - ssim)`` so that it is
non-negative and zero only at a perfect match. Every gradient is analytic.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .drrcast import TargetImageSet
from .gsmodel import Checkpoint, GaussianSet, RadiosityModel, save_checkpoint
from .splat import RenderedImage, render, render_backward

log = logging.getLogger(__name__)

SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # 11-tap window
SSIM_PAD = 5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

EVAL_ITERATIONS = (500, 2000, 7000, 15000, 30000)


class TrainError(ValueError):
    pass


def _pixels(img) -> np.ndarray:
    return img.pixels if isinstance(img, RenderedImage) else np.asarray(img, dtype=np.float64)


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise TrainError(f"image dimensions differ: {a.shape} vs {b.shape}")
    if min(a.shape) < 2 * SSIM_PAD + 1:
        raise TrainError("images must be at least 11 pixels on each side")


def _blur(x: np.ndarray, mode: str = "reflect") -> np.ndarray:
    return gaussian_filter(x, sigma=SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode=mode)


def ssim(a, b, with_grad: bool = False):
    """Mean SSIM on unit dynamic range, border of 5 pixels excluded.

    With ``with_grad`` also returns the gradient with respect to ``a``.
    """
    x, y = _pixels(a), _pixels(b)
    _check_pair(x, y)
    mx, my = _blur(x), _blur(y)
    cxx, cyy, cxy = _blur(x * x), _blur(y * y), _blur(x * y)
    vx, vy, vxy = cxx - mx * mx, cyy - my * my, cxy - mx * my
    n1 = 2.0 * mx * my + SSIM_C1
    n2 = 2.0 * vxy + SSIM_C2
    d1 = mx * mx + my * my + SSIM_C1
    d2 = vx + vy + SSIM_C2
    s = (n1 * n2) / (d1 * d2)
    crop = (slice(SSIM_PAD, -SSIM_PAD), slice(SSIM_PAD, -SSIM_PAD))
    value = float(s[crop].mean())
    if not with_grad:
        return value

    w = np.zeros_like(s)
    w[crop] = 1.0 / s[crop].size
    df_dm = 2.0 * my * n2 / (d1 * d2) - s * 2.0 * mx / d1
    df_dv = -s / d2
    df_dc = 2.0 * n1 / (d1 * d2)
    ds_dm = df_dm - 2.0 * mx * df_dv - my * df_dc
    # the weight map vanishes within the filter radius of the border, so the
    # adjoint of the reflect-mode blur is a zero-padded blur
    grad = (_blur(w * ds_dm, "constant")
            + 2.0 * x * _blur(w * df_dv, "constant")
            + y * _blur(w * df_dc, "constant"))
    return value, grad


def loss(pred, target, lam: float):
    """Return ``(value, dL/dpred)``."""
    if not 0.0 <= lam <= 1.0:
        raise TrainError("lambda must lie in [0, 1]")
    p, t = _pixels(pred), _pixels(target)
    _check_pair(p, t)
    diff = p - t
    l1 = float(np.abs(diff).mean())
    s, gs = ssim(p, t, with_grad=True)
    value = (1.0 - lam) * l1 + lam * (1.0 - s)
    grad = (1.0 - lam) * np.sign(diff) / diff.size - lam * gs
    return value, grad


# -- optimizer -------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15

    def remap(self, group: str, source: np.ndarray) -> None:
        """Carry moments to a resized group; rows with ``source < 0`` start at zero."""
        if group not in self.m:
            return
        for buf in (self.m, self.v):
            old = buf[group]
            new = np.zeros((len(source),) + old.shape[1:])
            keep = source >= 0
            new[keep] = old[source[keep]]
            buf[group] = new


def adam_step(params: dict, grads: dict, state: AdamState, lr) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update over named groups.

    ``lr`` is a float or a dict of per-group rates. Groups whose name ends in
    ``rotations`` are renormalized to unit quaternions afterwards.
    """
    for name, g in grads.items():
        if name not in params:
            raise TrainError(f"gradient for unknown group {name!r}")
        if np.shape(g) != np.shape(params[name]):
            raise TrainError(f"{name}: gradient shape {np.shape(g)} != parameter shape {np.shape(params[name])}")
        if not np.all(np.isfinite(g)):
            raise TrainError(f"non-finite gradient in group {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    out = dict(params)
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None or m.shape != p.shape:
            m = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        rate = lr[name] if isinstance(lr, dict) else lr
        new = p - rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if name.endswith("rotations") and new.size:
            new = new / np.linalg.norm(new, axis=-1, keepdims=True)
        out[name] = new
    return out, state


# -- configuration ---------------------------------------------------------------


@dataclass
class TrainConfig:
    lam: float = 0.2
    iterations: int = 30000
    lr_basis: float = 1.25e-4
    lr_features: float = 2.5e-3
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    position_lr_scale: float = 0.0  # mm; 0 = scene extent
    densify_interval: int = 100
    densify_from: int = 500
    densify_until: int = 15000
    densify_grad_threshold: float = 2e-4
    prune_opacity_threshold: float = 0.005
    dense_percent: float = 0.01
    max_gaussians: int = 0  # 0 = unlimited
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise TrainError("lambda must lie in [0, 1]")
        if self.iterations < 0:
            raise TrainError("iterations must be ≥ 0")
        for f in fields(self):
            if f.name.startswith("lr_") and not getattr(self, f.name) > 0:
                raise TrainError(f"{f.name} must be > 0")
        if self.densify_interval < 1:
            raise TrainError("densify_interval must be ≥ 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        unknown = set(d) - known
        if unknown:
            raise TrainError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def position_lr(self, it: int, extent: float = 1.0) -> float:
        """Log-linear decay from the initial to the final rate over the run, in units of the scene extent."""
        t = min(max(it / max(self.iterations, 1), 0.0), 1.0)
        lr = np.exp((1.0 - t) * np.log(self.lr_position) + t * np.log(self.lr_position_final))
        return float(lr) * (self.position_lr_scale or extent)


# -- densification ---------------------------------------------------------------


@dataclass
class GradStats:
    accum: np.ndarray
    count: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "GradStats":
        return cls(np.zeros(n), np.zeros(n))

    def add(self, screen_grad: np.ndarray, visible: np.ndarray) -> None:
        self.accum[visible] += screen_grad[visible]
        self.count[visible] += 1

    def mean(self) -> np.ndarray:
        return np.where(self.count > 0, self.accum / np.maximum(self.count, 1), 0.0)


def _densify_one(gs: GaussianSet, stats: GradStats, cfg: TrainConfig, extent: float, budget: int, rng):
    n = len(gs)
    grad = stats.mean()
    big = gs.scales().max(axis=1) > cfg.dense_percent * extent if n else np.zeros(0, bool)
    cand = np.flatnonzero(grad > cfg.densify_grad_threshold)
    if budget >= 0 and len(cand) > budget:
        order = np.lexsort((cand, -grad[cand]))
        cand = np.sort(cand[order[:budget]])
    clone = cand[~big[cand]]
    split = cand[big[cand]]

    parts = [gs]
    sources = [np.arange(n)]
    if len(clone):
        parts.append(gs.select(clone))
        sources.append(np.full(len(clone), -1))
    if len(split):
        children = gs.select(np.repeat(split, 2))
        cov = children.covariances()
        noise = rng.standard_normal((len(children), 3))
        children.positions = children.positions + np.einsum("nij,nj->ni", np.linalg.cholesky(cov), noise)
        children.log_scales = children.log_scales - np.log(1.6)
        parts.append(children)
        sources.append(np.full(len(children), -1))
    out = parts[0]
    for p in parts[1:]:
        out = out.concat(p)
    source = np.concatenate(sources)

    drop = np.zeros(len(out), dtype=bool)
    drop[split] = True
    drop |= out.opacities() < cfg.prune_opacity_threshold
    keep = np.flatnonzero(~drop)
    return out.select(keep), source[keep]


def densify_and_prune(iso: GaussianSet, dir: GaussianSet, stats: tuple[GradStats, GradStats],
                      cfg: TrainConfig, extent: float, rng=None):
    """Clone small / split large high-gradient Gaussians, then prune transparent ones.

    Each set is handled on its own. Returns ``(iso, dir, (src_iso, src_dir))``
    where ``src`` maps every output row to its input row, or -1 for new rows.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    budget = -1
    if cfg.max_gaussians > 0:
        budget = max(cfg.max_gaussians - len(iso) - len(dir), 0)
    # share the growth budget in proportion to candidate counts
    n_cand = [int(np.sum(s.mean() > cfg.densify_grad_threshold)) for s in stats]
    budgets = [-1, -1]
    if budget >= 0:
        total = max(sum(n_cand), 1)
        budgets[0] = min(n_cand[0], budget * n_cand[0] // total)
        budgets[1] = min(n_cand[1], budget - budgets[0])
    new_iso, src_iso = _densify_one(iso, stats[0], cfg, extent, budgets[0], rng)
    new_dir, src_dir = _densify_one(dir, stats[1], cfg, extent, budgets[1], rng)
    return new_iso, new_dir, (src_iso, src_dir)


# -- training loop ---------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log_rows: list
    loss_history: np.ndarray


def _group_params(iso: GaussianSet, dir: GaussianSet, model: RadiosityModel) -> dict:
    p = {f"iso.{n}": getattr(iso, n) for n in GaussianSet.PARAMS}
    p.update({f"dir.{n}": getattr(dir, n) for n in GaussianSet.PARAMS})
    p["b_iso"] = model.b_iso
    p["B_dir"] = model.B_dir
    return p


def _group_rates(cfg: TrainConfig, it: int, extent: float) -> dict:
    per = {
        "positions": cfg.position_lr(it, extent),
        "rotations": cfg.lr_rotation,
        "log_scales": cfg.lr_scale,
        "opacity_logits": cfg.lr_opacity,
        "features": cfg.lr_features,
    }
    rates = {f"{s}.{n}": r for s in ("iso", "dir") for n, r in per.items()}
    rates["b_iso"] = rates["B_dir"] = cfg.lr_basis
    return rates


def _unpack(params: dict, iso: GaussianSet, dir: GaussianSet, model: RadiosityModel):
    for s, gs in (("iso", iso), ("dir", dir)):
        for n in GaussianSet.PARAMS:
            setattr(gs, n, params[f"{s}.{n}"])
    model.b_iso = params["b_iso"]
    model.B_dir = params["B_dir"]


def mean_psnr(ckpt: Checkpoint, targets: TargetImageSet, backend: str | None = None) -> float:
    from .metrics import psnr

    vals = [psnr(render(ckpt.iso, ckpt.dir, ckpt.model, view, backend)[0], img)
            for view, img in zip(targets.views, targets.images)]
    return float(np.mean(vals))


LOG_COLUMNS = ("iteration", "loss", "psnr_holdout", "n_iso", "n_dir", "wall_ms")


def train(targets: TargetImageSet, init, cfg: TrainConfig, holdout: TargetImageSet | None = None,
          extent: float | None = None, backend: str | None = None, log_at=EVAL_ITERATIONS,
          callback=None, stop_after: int | None = None) -> TrainResult:
    """Optimize ``init = (iso, dir, model)`` against ``targets``.

    ``extent`` is the scene radius in mm. It scales the position learning rate
    and the clone/split size rule; defaults to the spread of the initial positions.
    ``stop_after`` ends the run early while keeping the schedules of the full run.
    """
    if len(targets) == 0:
        raise TrainError("no target views")
    iso, dir, model = (x.copy() for x in init)
    if extent is None:
        pts = np.concatenate([iso.positions, dir.positions])
        extent = float(np.linalg.norm(pts - pts.mean(axis=0), axis=1).max()) if len(pts) else 1.0
    rng = np.random.default_rng(cfg.seed)
    densify_rng = np.random.default_rng([cfg.seed, 1])
    state = AdamState()
    stats = (GradStats.zeros(len(iso)), GradStats.zeros(len(dir)))
    n_run = cfg.iterations if stop_after is None else max(0, min(stop_after, cfg.iterations))
    checkpoints = {i for i in log_at if 1 <= i <= n_run}
    if n_run >= 1:
        checkpoints.add(n_run)
    rows = []
    history = np.zeros(n_run)
    order: list = []
    t0 = time.perf_counter()

    for it in range(1, n_run + 1):
        if not order:
            order = list(rng.permutation(len(targets)))
        vi = int(order.pop(0))
        img, inter = render(iso, dir, model, targets.views[vi], backend)
        value, dl = loss(img, targets.images[vi], cfg.lam)
        if not np.isfinite(value):
            raise TrainError(f"non-finite loss at iteration {it}")
        history[it - 1] = value
        g = render_backward(inter, dl)
        stats[0].add(g.screen_grad_iso, g.visible_iso)
        stats[1].add(g.screen_grad_dir, g.visible_dir)

        grads = {f"iso.{n}": g.iso[n] for n in GaussianSet.PARAMS}
        grads.update({f"dir.{n}": g.dir[n] for n in GaussianSet.PARAMS})
        grads["b_iso"], grads["B_dir"] = g.b_iso, g.B_dir
        params, state = adam_step(_group_params(iso, dir, model), grads, state, _group_rates(cfg, it, extent))
        _unpack(params, iso, dir, model)

        if cfg.densify_from <= it < cfg.densify_until and it % cfg.densify_interval == 0:
            iso, dir, (src_iso, src_dir) = densify_and_prune(iso, dir, stats, cfg, extent, densify_rng)
            for n in GaussianSet.PARAMS:
                state.remap(f"iso.{n}", src_iso)
                state.remap(f"dir.{n}", src_dir)
            stats = (GradStats.zeros(len(iso)), GradStats.zeros(len(dir)))

        if it in checkpoints:
            ck = Checkpoint(iso, dir, model)
            ph = mean_psnr(ck, holdout, backend) if holdout is not None and len(holdout) else float("nan")
            row = {"iteration": it, "loss": value, "psnr_holdout": ph, "n_iso": len(iso), "n_dir": len(dir),
                   "wall_ms": 1e3 * (time.perf_counter() - t0)}
            rows.append(row)
            log.info("iter %d loss %.5f psnr %.2f n_iso %d n_dir %d", it, value, ph, len(iso), len(dir))
            if callback is not None:
                callback(it, ck.copy())

    meta = {"iterations": n_run, "seed": cfg.seed}
    return TrainResult(Checkpoint(iso, dir, model, meta), rows, history)


def write_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in LOG_COLUMNS})


def save_result(res: TrainResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(res.checkpoint, out / "checkpoint.ddgs")
    write_log(res.log_rows, out / "metrics.csv")
    np.savetxt(out / "loss_history.txt", res.loss_history, fmt="%.9g")
