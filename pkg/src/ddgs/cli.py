"""``ddgs`` command line: phantom -> targets -> train -> render / eval / register / bench.

Every command checks its inputs before writing anything and leaves a
``manifest.json`` (or ``<file>.manifest.json``) with the resolved settings.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .drrcast import AnisoPerturbSpec, load_target_set, raw_projection, render_targets, save_target_set
from .geometry import Intrinsics, Pose, even_angles, load_views, orbit_pose, orbit_views, random_angles
from .gsmodel import Checkpoint, RadiosityModel, load_checkpoint, save_checkpoint
from .imageio import write_image
from .metrics import evaluate, model_float_breakdown, write_eval_report
from .rads import random_init, rads_init
from .registration import RegistrationConfig, perturbation, perturbed, register, save_result
from .splat import render
from .train import TrainConfig, save_result as save_train_result, train
from .volume import default_phantom_spec, hu_to_density, load_volume, make_phantom, save_volume

log = logging.getLogger("ddgs")

DEFAULT_SOD = 400.0
DEFAULT_SIZE = 128
DEFAULT_FOCAL_RATIO = 2.5  # focal length in units of image width


class UsageError(Exception):
    pass


def _write_manifest(path: Path, command: str, args: argparse.Namespace, extra: dict | None = None) -> None:
    resolved = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    body = {"command": command, "version": __version__, "args": resolved, **(extra or {})}
    path.write_text(json.dumps(body, indent=2, sort_keys=True, default=str) + "\n")


def _need_file(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _load_json(path, what: str):
    p = _need_file(path, what)
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"{what} {p}: invalid JSON ({e})") from e


def _intrinsics(args) -> Intrinsics:
    focal = args.focal if args.focal else DEFAULT_FOCAL_RATIO * args.size
    return Intrinsics(focal, args.size, args.size)


# -- phantom ---------------------------------------------------------------------


def cmd_phantom(args) -> int:
    spec = default_phantom_spec(args.size, args.spacing) if args.spec in (None, "default") else _load_json(args.spec, "phantom spec")
    ct = make_phantom(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_volume(ct, out)
    _write_manifest(out.with_name(out.name + ".manifest.json"), "phantom", args, {"spec": spec})
    return 0


# -- targets ---------------------------------------------------------------------


def _target_views(args):
    intr = _intrinsics(args)
    train_angles = even_angles(args.views, tuple(args.range_deg))
    test_angles = random_angles(args.test_views, args.seed, tuple(args.range_deg)) if args.test_views else []
    return (orbit_views(train_angles, args.sod, intr), orbit_views(test_angles, args.sod, intr),
            list(map(float, train_angles)), list(map(float, test_angles)))


def cmd_targets(args) -> int:
    if args.views < 1:
        raise UsageError("--views must be ≥ 1")
    ct = load_volume(_need_file(args.volume, "volume"))
    perturb = AnisoPerturbSpec(args.aniso) if args.aniso else None
    v = hu_to_density(ct)
    tr, te, tr_ang, te_ang = _target_views(args)
    ts = render_targets(v, tr + te, perturb)
    out = Path(args.out)
    common = {"range_deg": list(args.range_deg), "seed": args.seed, "volume": str(Path(args.volume).resolve()),
              "sod_mm": args.sod}
    save_target_set(ts.subset(range(len(tr))), out, {**common, "angles_deg": tr_ang, "split": "train"})
    if te:
        save_target_set(ts.subset(range(len(tr), len(tr) + len(te))), out / "test",
                        {**common, "angles_deg": te_ang, "split": "test"})
    _write_manifest(out / "run_manifest.json", "targets", args)
    return 0


# -- train -----------------------------------------------------------------------

_LR_FLAGS = ("basis", "features", "position", "rotation", "scale", "opacity")


def _train_config(args) -> TrainConfig:
    base = _load_json(args.config, "config") if args.config else {}
    if args.iters is not None:
        base["iterations"] = args.iters
    if args.lam is not None:
        base["lam"] = args.lam
    if args.seed is not None:
        base["seed"] = args.seed
    if args.max_gaussians is not None:
        base["max_gaussians"] = args.max_gaussians
    for name in _LR_FLAGS:
        val = getattr(args, f"lr_{name}")
        if val is not None:
            base[f"lr_{name}"] = val
    return TrainConfig.from_dict(base)


def cmd_train(args) -> int:
    root = _need_file(args.targets, "targets directory")
    targets = load_target_set(root)
    holdout = load_target_set(root / "test") if (root / "test" / "manifest.json").is_file() else None
    vol_path = args.volume or targets.meta.get("volume")
    if not vol_path:
        raise UsageError("no volume recorded in the targets manifest; pass --volume")
    v = hu_to_density(load_volume(_need_file(vol_path, "volume")))
    cfg = _train_config(args)
    if args.init == "rads":
        iso, dir_ = rads_init(v, args.n1, args.n2, cfg.seed, k=args.k, directional=not args.no_dir)
    else:
        n_dir = 0 if args.no_dir else args.n2 // 2
        iso, dir_ = random_init(v, args.n1 + args.n2 - n_dir, n_dir, cfg.seed, k=args.k)
    model = RadiosityModel.init(args.k, args.L, cfg.seed)
    extent = 0.5 * v.diagonal
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(Checkpoint(iso, dir_, model, {"iterations": 0, "seed": cfg.seed}), out / "init.ddgs")
    res = train(targets, (iso, dir_, model), cfg, holdout=holdout, extent=extent)
    save_train_result(res, out)
    _write_manifest(out / "manifest.json", "train", args,
                    {"config": cfg.to_dict(), "extent_mm": extent, "floats": model_float_breakdown(res.checkpoint)})
    return 0


# -- render / eval ---------------------------------------------------------------


def cmd_render(args) -> int:
    ckpt = load_checkpoint(_need_file(args.checkpoint, "checkpoint"))
    views = load_views(_need_file(args.views, "views file"))
    if not views:
        raise UsageError("view list is empty")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, view in enumerate(views):
        img = render(ckpt.iso, ckpt.dir, ckpt.model, view)[0]
        write_image(img, out / f"render_{i:04d}.png", raw_path=out / f"render_{i:04d}.raw")
    _write_manifest(out / "manifest.json", "render", args, {"n_views": len(views)})
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(_need_file(args.checkpoint, "checkpoint"))
    ts = load_target_set(_need_file(args.targets, "targets directory"))
    rows = evaluate(ckpt, ts.views, ts.images)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_eval_report(rows, out, n_points=ckpt.n_total)
    _write_manifest(out.with_name(out.name + ".manifest.json"), "eval", args)
    print(f"mean PSNR {np.mean([r[0] for r in rows]):.3f} dB  mean SSIM {np.mean([r[1] for r in rows]):.4f}")
    return 0


# -- register --------------------------------------------------------------------


def _load_pose(path) -> Pose:
    d = _load_json(path, "pose file")
    d = d.get("pose", d)
    return Pose(d["rotation"], d["translation"])


def cmd_register(args) -> int:
    ckpt = load_checkpoint(_need_file(args.checkpoint, "checkpoint"))
    ts = load_target_set(_need_file(args.targets, "targets directory"))
    if not 0 <= args.view < len(ts):
        raise UsageError(f"--view must lie in [0, {len(ts) - 1}]")
    target, gt_view = ts.images[args.view], ts.views[args.view]
    sod = float(np.linalg.norm(gt_view.pose.translation))
    if args.init_pose == "isocenter":
        init = orbit_pose(0.0, sod)
    elif args.init_pose == "gt":
        init = gt_view.pose
    else:
        init = _load_pose(args.init_pose)
    if args.perturb is not None:
        rv, tv = perturbation(args.perturb[0], args.perturb[1], args.seed)
        init = perturbed(init, rv, tv)
    landmarks = None
    if args.landmarks:
        landmarks = np.loadtxt(_need_file(args.landmarks, "landmarks file"), ndmin=2)
        if landmarks.shape[0] == 0 or landmarks.shape[1] != 3:
            raise UsageError("landmarks must be an M x 3 table with M ≥ 1")
    cfg = RegistrationConfig(lr=args.lr, max_iters=args.max_iters, convergence_tol=args.tol, lam=args.lam)
    res = register(ckpt, target, init, gt_view.intrinsics, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_result(res, out, gt=gt_view.pose, landmarks=landmarks)
    _write_manifest(out.with_name(out.stem + ".manifest.json"), "register", args,
                    {"init_pose": init.to_dict(), "gt_pose": gt_view.pose.to_dict()})
    return 0


# -- bench -----------------------------------------------------------------------

BENCH_COLUMNS = ("renderer", "n_views", "mean_ms", "median_ms", "std_ms")


def bench_renderers(ckpt: Checkpoint, v, views, repeats: int = 1) -> dict:
    """Per-view wall times in ms for the splat and ray-casting renderers on the same views."""
    times = {"splat": [], "siddon": []}
    for view in views:
        for _ in range(repeats):
            t = time.perf_counter()
            render(ckpt.iso, ckpt.dir, ckpt.model, view)
            times["splat"].append(1e3 * (time.perf_counter() - t))
            t = time.perf_counter()
            raw_projection(v, view)
            times["siddon"].append(1e3 * (time.perf_counter() - t))
    return {k: np.asarray(x) for k, x in times.items()}


def write_bench(times: dict, n_views: int, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BENCH_COLUMNS)
        for name, t in times.items():
            w.writerow((name, n_views, f"{t.mean():.4f}", f"{np.median(t):.4f}", f"{t.std():.4f}"))


def cmd_bench(args) -> int:
    if args.views < 1:
        raise UsageError("--views must be ≥ 1")
    ckpt = load_checkpoint(_need_file(args.checkpoint, "checkpoint"))
    v = hu_to_density(load_volume(_need_file(args.volume, "volume")))
    views = orbit_views(random_angles(args.views, args.seed, tuple(args.range_deg)), args.sod, _intrinsics(args))
    times = bench_renderers(ckpt, v, views, args.repeats)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_bench(times, len(views), out)
    _write_manifest(out.with_name(out.name + ".manifest.json"), "bench", args)
    return 0


# -- parser ----------------------------------------------------------------------


def _geometry_flags(p) -> None:
    p.add_argument("--size", type=int, default=DEFAULT_SIZE, help="detector width and height in pixels")
    p.add_argument("--focal", type=float, default=None, help="focal length in pixels (default 2.5 x size)")
    p.add_argument("--sod", type=float, default=DEFAULT_SOD, help="source to isocenter distance, mm")
    p.add_argument("--range-deg", type=float, nargs=2, default=(-90.0, 90.0), metavar=("LO", "HI"))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ddgs", description="Gaussian splatting DRR simulator")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="build a synthetic CT volume")
    p.add_argument("--spec", default="default", help="JSON phantom description, or 'default'")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--spacing", type=float, default=1.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("targets", help="ray-cast target DRRs")
    p.add_argument("--volume", required=True)
    p.add_argument("--views", type=int, default=20, help="evenly spaced training views")
    p.add_argument("--test-views", type=int, default=0, help="seeded random held-out views")
    p.add_argument("--aniso", type=float, default=0.0, help="directional modulation amplitude (≤ 0.1)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _geometry_flags(p)
    p.set_defaults(func=cmd_targets)

    p = sub.add_parser("train", help="initialize and fit a model")
    p.add_argument("--targets", required=True)
    p.add_argument("--volume", default=None, help="defaults to the volume recorded with the targets")
    p.add_argument("--config", default=None, help="JSON training config")
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    for name in _LR_FLAGS:
        p.add_argument(f"--lr-{name}", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n1", type=int, default=500, help="interface points")
    p.add_argument("--n2", type=int, default=400, help="density-weighted points")
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--L", type=int, default=1)
    p.add_argument("--max-gaussians", type=int, default=None)
    p.add_argument("--init", choices=("rads", "random"), default="rads")
    p.add_argument("--no-dir", action="store_true", help="isotropic-only ablation")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render views from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--views", required=True, help="views JSON file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR / SSIM against a target set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--targets", required=True)
    p.add_argument("--out", required=True, help="CSV report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("register", help="recover the pose of one target view")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--targets", required=True)
    p.add_argument("--view", type=int, default=0)
    p.add_argument("--init-pose", default="isocenter", help="'isocenter', 'gt' or a pose JSON file")
    p.add_argument("--perturb", type=float, nargs=2, default=None, metavar=("DEG", "MM"),
                   help="seeded perturbation applied to the initial pose")
    p.add_argument("--landmarks", default=None, help="M x 3 text table of world points, mm")
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--lambda", dest="lam", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="result JSON path")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("bench", help="time splat vs ray-cast rendering")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--views", type=int, default=10)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="CSV path")
    _geometry_flags(p)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ValueError, KeyError, OSError) as e:
        print(f"ddgs {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
