"""2D/3D pose registration by gradient descent through the splat renderer.

The pose is updated by a tangent step ``(omega, v)`` re-centred at the current
estimate every iteration. Rotations act about a pivot (the isocenter, world
origin by default) rather than the camera origin so that rotation and
translation are close to decoupled.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraView, Intrinsics, Pose, rotation_angle_deg, rotvec_to_matrix
from .gsmodel import Checkpoint
from .splat import RenderedImage, render, render_backward
from .train import AdamState, adam_step, loss


class RegistrationError(RuntimeError):
    pass


@dataclass
class RegistrationConfig:
    lr: float = 0.05
    max_iters: int = 500
    convergence_tol: float = 1e-6
    lam: float = 0.2
    window: int = 10

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be ≥ 1")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")


@dataclass
class RegistrationResult:
    pose: Pose
    loss_trace: list = field(default_factory=list)
    iterations_used: int = 0
    wall_ms: float = 0.0
    best_loss: float = float("inf")


def pivot_step(pose: Pose, delta, pivot_world) -> Pose:
    """Rotate by ``delta[:3]`` about the pivot, then translate by ``delta[3:]`` (camera frame)."""
    delta = np.asarray(delta, dtype=np.float64).reshape(6)
    r_d = rotvec_to_matrix(delta[:3])
    p = pose.apply(np.asarray(pivot_world, dtype=np.float64))
    return Pose.from_matrix(r_d @ pose.matrix, r_d @ (pose.translation - p) + p + delta[3:])


def pivot_gradient(pose: Pose, g, pivot_world) -> np.ndarray:
    """Map a gradient w.r.t. the camera-origin tangent to the ``pivot_step`` tangent."""
    g = np.asarray(g, dtype=np.float64)
    p = pose.apply(np.asarray(pivot_world, dtype=np.float64))
    return np.concatenate([g[:3] - np.cross(p, g[3:]), g[3:]])


def register(ckpt: Checkpoint, target: RenderedImage, init_pose: Pose, intrinsics: Intrinsics,
             cfg: RegistrationConfig | None = None, pivot_world=(0.0, 0.0, 0.0),
             backend: str | None = None) -> RegistrationResult:
    cfg = cfg or RegistrationConfig()
    if (target.height, target.width) != (intrinsics.height, intrinsics.width):
        raise RegistrationError("target dimensions do not match the intrinsics")
    pivot_world = np.asarray(pivot_world, dtype=np.float64)
    t0 = time.perf_counter()
    pose = init_pose
    state = AdamState()
    trace: list[float] = []
    best_pose, best_loss = init_pose, float("inf")
    for _ in range(cfg.max_iters):
        img, inter = render(ckpt.iso, ckpt.dir, ckpt.model, CameraView(pose, intrinsics), backend)
        value, dl = loss(img, target, cfg.lam)
        if not np.isfinite(value):
            raise RegistrationError(f"non-finite loss after {len(trace)} iterations; trace {trace}")
        trace.append(value)
        if value < best_loss:
            best_pose, best_loss = pose, value
        g = pivot_gradient(pose, render_backward(inter, dl, want_pose_grad=True).pose, pivot_world)
        step, state = adam_step({"delta": np.zeros(6)}, {"delta": g}, state, cfg.lr)
        pose = pivot_step(pose, step["delta"], pivot_world)
        n = len(trace)
        if n > cfg.window and abs(trace[-1] - trace[-1 - cfg.window]) < cfg.convergence_tol:
            break
    return RegistrationResult(best_pose, trace, len(trace), 1e3 * (time.perf_counter() - t0), best_loss)


def pose_errors(est: Pose, gt: Pose) -> tuple[float, float]:
    return rotation_angle_deg(est, gt), float(np.linalg.norm(est.translation - gt.translation))


def target_registration_error(landmarks, est: Pose, gt: Pose) -> float:
    """Mean 3D distance between landmarks mapped into the camera frame by each pose."""
    pts = np.asarray(landmarks, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ValueError("no landmarks")
    return float(np.mean(np.linalg.norm(est.apply(pts) - gt.apply(pts), axis=1)))


def perturbation(rot_deg: float, trans_mm: float, seed: int):
    """Random axis rotation of ``rot_deg`` and random-direction translation of ``trans_mm``."""
    rng = np.random.default_rng(seed)
    axis = rng.standard_normal(3)
    direction = rng.standard_normal(3)
    return (np.radians(rot_deg) * axis / np.linalg.norm(axis), trans_mm * direction / np.linalg.norm(direction))


def perturbed(gt: Pose, rotvec, trans) -> Pose:
    """``R' = R_delta R``, ``t' = t + trans``: a rotation about the world origin when it is the isocenter."""
    return Pose.from_matrix(rotvec_to_matrix(rotvec) @ gt.matrix, gt.translation + np.asarray(trans))


def result_dict(res: RegistrationResult, gt: Pose | None = None, landmarks=None) -> dict:
    out = {
        "pose": res.pose.to_dict(),
        "iterations": res.iterations_used,
        "best_loss": res.best_loss,
        "loss_trace": res.loss_trace,
    }
    if gt is not None:
        rot, trans = pose_errors(res.pose, gt)
        out["rot_deg"], out["trans_mm"] = rot, trans
        if landmarks is not None:
            out["tre_mm"] = target_registration_error(landmarks, res.pose, gt)
    return out


def save_result(res: RegistrationResult, path, gt: Pose | None = None, landmarks=None) -> None:
    """Deterministic result file; the wall-clock time goes to a ``.timing.json`` sibling."""
    path = Path(path)
    path.write_text(json.dumps(result_dict(res, gt, landmarks), indent=2) + "\n")
    path.with_name(path.stem + ".timing.json").write_text(json.dumps({"wall_ms": res.wall_ms}) + "\n")
