"""Gaussian sets, shared radiosity bases and the checkpoint format.

Isotropic Gaussians use ``c = sigmoid(b_iso · f)``; directional ones use
``c = sigmoid(Y(d) · (B_dir @ f))`` with ``Y`` the real orthonormal spherical
harmonics of degrees 1..L (no constant term) evaluated at the world-frame
direction ``d`` from the source to the Gaussian center.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from math import factorial, pi, sqrt
from pathlib import Path

import numpy as np

from .geometry import angles_to_directions, quat_to_rotmat

ISOTROPIC = "isotropic"
DIRECTIONAL = "directional"
KINDS = (ISOTROPIC, DIRECTIONAL)

DEFAULT_L = 1
DEFAULT_K = 8
INIT_OPACITY = 0.1
BASIS_INIT_STD = 0.01


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def n_sh_terms(L: int) -> int:
    return L * (L + 2)


# -- spherical harmonics -------------------------------------------------------


def sh_basis(dirs: np.ndarray, L: int, with_grad: bool = False):
    """Real SH of degrees 1..L at unit vectors ``dirs`` (..., 3).

    Ordered by degree, then order m = -l..l. Evaluated as polynomials in
    (x, y, z); with ``with_grad`` also returns the (..., k_L, 3) partials
    with respect to those coordinates (treated as independent).
    """
    if L < 1:
        raise ValueError("SH degree L must be ≥ 1")
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    shape = x.shape

    # C_m + i S_m = (x + i y)^m
    cm = [np.ones(shape)]
    sm = [np.zeros(shape)]
    for m in range(1, L + 1):
        cm.append(x * cm[m - 1] - y * sm[m - 1])
        sm.append(x * sm[m - 1] + y * cm[m - 1])

    # Q[l][m] = P_l^m(z) / (1 - z^2)^(m/2), without the Condon-Shortley phase
    q = {}
    dq = {}
    for m in range(L + 1):
        dfact = float(np.prod(np.arange(2 * m - 1, 0, -2))) if m > 0 else 1.0
        q[m, m] = np.full(shape, dfact)
        dq[m, m] = np.zeros(shape)
        if m + 1 <= L:
            q[m + 1, m] = (2 * m + 1) * z * q[m, m]
            dq[m + 1, m] = (2 * m + 1) * q[m, m]
        for l in range(m + 2, L + 1):
            q[l, m] = ((2 * l - 1) * z * q[l - 1, m] - (l + m - 1) * q[l - 2, m]) / (l - m)
            dq[l, m] = ((2 * l - 1) * (q[l - 1, m] + z * dq[l - 1, m]) - (l + m - 1) * dq[l - 2, m]) / (l - m)

    out = np.empty(shape + (n_sh_terms(L),))
    grad = np.zeros(shape + (n_sh_terms(L), 3)) if with_grad else None
    col = 0
    for l in range(1, L + 1):
        for m in range(-l, l + 1):
            am = abs(m)
            kk = sqrt((2 * l + 1) / (4 * pi) * factorial(l - am) / factorial(l + am))
            if m != 0:
                kk *= sqrt(2.0)
            ql, dql = q[l, am], dq[l, am]
            if m > 0:
                trig = cm[am]
                if with_grad:
                    dtx, dty = am * cm[am - 1], -am * sm[am - 1]
            elif m < 0:
                trig = sm[am]
                if with_grad:
                    dtx, dty = am * sm[am - 1], am * cm[am - 1]
            else:
                trig = cm[0]
                if with_grad:
                    dtx = dty = np.zeros(shape)
            out[..., col] = kk * ql * trig
            if with_grad:
                grad[..., col, 0] = kk * ql * dtx
                grad[..., col, 1] = kk * ql * dty
                grad[..., col, 2] = kk * dql * trig
            col += 1
    if with_grad:
        return out, grad
    return out


def eval_sh_basis(theta, phi, L: int) -> np.ndarray:
    return sh_basis(angles_to_directions(theta, phi), L)


# -- parameters -----------------------------------------------------------------


@dataclass
class GaussianSet:
    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    features: np.ndarray
    kind: str = ISOTROPIC

    PARAMS = ("positions", "rotations", "log_scales", "opacity_logits", "features")

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = self.positions.shape[0]
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValueError("features must be (N, k)")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def k(self) -> int:
        return self.features.shape[1]

    @classmethod
    def empty(cls, k: int, kind: str = ISOTROPIC) -> "GaussianSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, k)), kind)

    @classmethod
    def create(cls, positions, log_scales, k: int, kind: str, opacity: float = INIT_OPACITY) -> "GaussianSet":
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = positions.shape[0]
        rot = np.zeros((n, 4))
        rot[:, 0] = 1.0
        log_scales = np.broadcast_to(np.asarray(log_scales, dtype=np.float64).reshape(-1, 1)
                                     if np.ndim(log_scales) == 1 else log_scales, (n, 3)).copy()
        return cls(positions, rot, log_scales, np.full(n, float(logit(opacity))), np.zeros((n, k)), kind)

    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def covariances(self) -> np.ndarray:
        return covariance_from(self.log_scales, self.rotations)

    def copy(self) -> "GaussianSet":
        return replace(self, **{p: getattr(self, p).copy() for p in self.PARAMS})

    def select(self, idx) -> "GaussianSet":
        return replace(self, **{p: getattr(self, p)[idx].copy() for p in self.PARAMS})

    def concat(self, other: "GaussianSet") -> "GaussianSet":
        if other.kind != self.kind:
            raise ValueError("cannot merge Gaussian sets of different kinds")
        return replace(self, **{p: np.concatenate([getattr(self, p), getattr(other, p)]) for p in self.PARAMS})


@dataclass
class RadiosityModel:
    b_iso: np.ndarray
    B_dir: np.ndarray
    L: int = DEFAULT_L

    def __post_init__(self):
        self.b_iso = np.asarray(self.b_iso, dtype=np.float64).reshape(-1)
        self.B_dir = np.asarray(self.B_dir, dtype=np.float64)
        self.L = int(self.L)
        if self.L < 1:
            raise ValueError("L must be ≥ 1")
        if self.B_dir.shape != (self.k_L, self.k):
            raise ValueError(f"B_dir must be ({self.k_L}, {self.k}), got {self.B_dir.shape}")
        if not (np.all(np.isfinite(self.b_iso)) and np.all(np.isfinite(self.B_dir))):
            raise ValueError("radiosity bases must be finite")

    @property
    def k(self) -> int:
        return self.b_iso.shape[0]

    @property
    def k_L(self) -> int:
        return n_sh_terms(self.L)

    @classmethod
    def init(cls, k: int = DEFAULT_K, L: int = DEFAULT_L, seed: int = 0, std: float = BASIS_INIT_STD):
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, std, k), rng.normal(0.0, std, (n_sh_terms(L), k)), L)

    def copy(self) -> "RadiosityModel":
        return RadiosityModel(self.b_iso.copy(), self.B_dir.copy(), self.L)


def radiosity_iso(f, model: RadiosityModel):
    return sigmoid(np.asarray(f, dtype=np.float64) @ model.b_iso)


def radiosity_dir_logit(f, theta, phi, model: RadiosityModel):
    y = eval_sh_basis(theta, phi, model.L)
    return np.sum(y * (np.asarray(f, dtype=np.float64) @ model.B_dir.T), axis=-1)


def radiosity_dir(f, theta, phi, model: RadiosityModel):
    return sigmoid(radiosity_dir_logit(f, theta, phi, model))


def covariance_from(log_scale, rotation) -> np.ndarray:
    """``R diag(exp(2 log_scale)) R^T`` for single or batched inputs."""
    r = quat_to_rotmat(rotation)
    s = np.exp(np.asarray(log_scale, dtype=np.float64))
    m = r * s[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


# -- checkpoints ----------------------------------------------------------------

_MAGIC = b"DDGSCKPT1\n"


@dataclass
class Checkpoint:
    iso: GaussianSet
    dir: GaussianSet
    model: RadiosityModel
    meta: dict = field(default_factory=dict)

    @property
    def n_total(self) -> int:
        return len(self.iso) + len(self.dir)

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.iso.copy(), self.dir.copy(), self.model.copy(), dict(self.meta))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Header line (JSON) followed by little-endian float32 blocks.

    Block order: for iso then dir, each of ``GaussianSet.PARAMS``.
    """
    m = ckpt.model
    header = {
        "L": m.L,
        "k": m.k,
        "N_iso": len(ckpt.iso),
        "N_dir": len(ckpt.dir),
        "b_iso": m.b_iso.tolist(),
        "B_dir": m.B_dir.tolist(),
        "blocks": [f"{s}.{p}" for s in ("iso", "dir") for p in GaussianSet.PARAMS],
        "dtype": "<f4",
        "meta": ckpt.meta,
    }
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for gs in (ckpt.iso, ckpt.dir):
            for p in GaussianSet.PARAMS:
                fh.write(np.ascontiguousarray(getattr(gs, p), dtype="<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise ValueError(f"{path}: not a DDGS checkpoint")
    end = data.index(b"\n", len(_MAGIC))
    header = json.loads(data[len(_MAGIC):end])
    model = RadiosityModel(header["b_iso"], header["B_dir"], header["L"])
    k = header["k"]
    offset = end + 1
    sets = []
    for kind, n in ((ISOTROPIC, header["N_iso"]), (DIRECTIONAL, header["N_dir"])):
        arrays = {}
        for p, width in zip(GaussianSet.PARAMS, (3, 4, 3, 1, k)):
            count = n * width
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).astype(np.float64)
            offset += 4 * count
            arrays[p] = arr.reshape(n, width) if width > 1 else arr
        sets.append(GaussianSet(kind=kind, **arrays))
    if offset != len(data):
        raise ValueError(f"{path}: trailing or missing bytes in checkpoint")
    return Checkpoint(sets[0], sets[1], model, header.get("meta", {}))
