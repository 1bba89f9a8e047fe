"""Dense voxel semantic radiance field.

Each grid node stores a density pre-activation (softplus), an RGB
pre-activation (sigmoid) and raw class logits. Points are evaluated by
trilinear interpolation of the *activated* node values and rays are
composited with the usual quadrature ``w_i = T_i (1 - exp(-sigma_i delta_i))``.
Semantics are composited as logits and passed through a softmax afterwards.
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import _kernels as K
from .scene import Dataset, Pose, CameraIntrinsics, pixel_rays

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ALRFIELD"
CHECKPOINT_VERSION = 1


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class VoxelField:
    resolution: tuple
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    params: np.ndarray          # (Nx, Ny, Nz, 4 + C) float64

    def __post_init__(self):
        self.resolution = tuple(int(n) for n in self.resolution)
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64)
        if len(self.resolution) != 3 or min(self.resolution) < 2:
            raise ValueError("resolution must be three integers >= 2")
        if np.any(self.bbox_min >= self.bbox_max):
            raise ValueError("bbox_min must be < bbox_max componentwise")
        if self.params.shape[:3] != self.resolution or self.params.shape[3] < 5:
            raise ValueError("params shape does not match resolution")

    @classmethod
    def create(cls, resolution, bbox_min, bbox_max, class_count: int,
               density_init: float = -2.0, color_init: float = 0.0) -> "VoxelField":
        res = tuple(int(n) for n in resolution)
        params = np.zeros(res + (4 + class_count,))
        params[..., 0] = density_init
        params[..., 1:4] = color_init
        return cls(res, bbox_min, bbox_max, params)

    @property
    def class_count(self) -> int:
        return self.params.shape[3] - 4

    @property
    def density(self) -> np.ndarray:
        return self.params[..., 0]

    @property
    def color(self) -> np.ndarray:
        return self.params[..., 1:4]

    @property
    def logits(self) -> np.ndarray:
        return self.params[..., 4:]

    @property
    def spacing(self) -> np.ndarray:
        return (self.bbox_max - self.bbox_min) / (np.asarray(self.resolution) - 1)

    def node_position(self, i: int, j: int, k: int) -> np.ndarray:
        return self.bbox_min + np.array([i, j, k]) * self.spacing

    def flat_params(self) -> np.ndarray:
        return self.params.reshape(-1, self.params.shape[3])

    def _kargs(self):
        return (np.asarray(self.resolution, dtype=np.int64), self.bbox_min, self.spacing)

    def copy(self) -> "VoxelField":
        return VoxelField(self.resolution, self.bbox_min.copy(), self.bbox_max.copy(),
                          self.params.copy())


def field_for_dataset(ds: Dataset, resolution=(64, 64, 64), pad: float = 0.1) -> VoxelField:
    """Fresh field covering the dataset bounding box plus a small margin."""
    return VoxelField.create(resolution, ds.bbox_min - pad, ds.bbox_max + pad, ds.class_count)


def trilinear_sample(f: VoxelField, point):
    """``(sigma, rgb, logits)`` at a point; outside the box: empty, grey, zeros."""
    pts = np.atleast_2d(np.asarray(point, dtype=np.float64))
    act, _ = K.activate(f.flat_params())
    q = K.sample_points(act, *f._kargs(), pts)
    if np.ndim(point) == 1:
        return float(q[0, 0]), q[0, 1:4], q[0, 4:]
    return q[:, 0], q[:, 1:4], q[:, 4:]


# --------------------------------------------------------------------------
# rendering


@dataclass
class RaySampleConfig:
    n_samples: int = 48
    near: float = 0.05
    far: float = 6.5
    stratified: bool = False

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")


def sample_depths(cfg: RaySampleConfig, n_rays: int, rng: np.random.Generator | None = None):
    """Per-ray sample distances and interval lengths.

    The ``[near, far]`` range is cut into ``n_samples`` equal bins; samples sit
    at bin midpoints, or uniformly inside each bin when stratified. The last
    interval is one bin wide.
    """
    N = cfg.n_samples
    width = (cfg.far - cfg.near) / N
    edges = cfg.near + width * np.arange(N)
    if cfg.stratified:
        if rng is None:
            raise ValueError("stratified sampling needs an rng")
        ts = edges[None, :] + width * rng.random((n_rays, N))
    else:
        ts = np.broadcast_to(edges + 0.5 * width, (n_rays, N)).copy()
    deltas = np.empty_like(ts)
    deltas[:, :-1] = np.diff(ts, axis=1)
    deltas[:, -1] = width
    return ts, deltas


@dataclass
class RayOutput:
    color: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    depth: float
    weights: np.ndarray
    opacity: float
    t: np.ndarray


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def render_rays(f: VoxelField, origins, directions, cfg: RaySampleConfig,
                ts=None, deltas=None, rng=None):
    """Batched compositing. Returns a dict of per-ray arrays (distances along
    the ray, not z-depth)."""
    ro = np.ascontiguousarray(np.atleast_2d(origins), dtype=np.float64)
    rd = np.ascontiguousarray(np.atleast_2d(directions), dtype=np.float64)
    R = rd.shape[0]
    ro = np.ascontiguousarray(np.broadcast_to(ro, rd.shape))
    if ts is None:
        ts, deltas = sample_depths(cfg, R, rng)
    C = f.class_count
    rgb = np.empty((R, 3))
    logits = np.empty((R, C))
    depth = np.empty(R)
    acc = np.empty(R)
    w = np.empty(ts.shape)
    act, _ = K.activate(f.flat_params())
    K.render_rays(act, *f._kargs(), ro, rd, ts, deltas, rgb, logits, depth, acc, w)
    return {"rgb": rgb, "logits": logits, "probs": softmax(logits), "depth": depth,
            "opacity": acc, "weights": w, "t": ts}


def render_ray(f: VoxelField, origin, direction, cfg: RaySampleConfig, rng=None) -> RayOutput:
    direction = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(direction) - 1.0) >= 1e-6:
        raise ValueError("direction must be a unit vector")
    out = render_rays(f, origin, direction, cfg, rng=rng)
    return RayOutput(out["rgb"][0], out["logits"][0], out["probs"][0], float(out["depth"][0]),
                     out["weights"][0], float(out["opacity"][0]), out["t"][0])


@dataclass
class Prediction:
    probs: np.ndarray     # (H, W, C)
    logits: np.ndarray    # (H, W, C)
    sem: np.ndarray       # (H, W)
    depth: np.ndarray     # (H, W) z-depth
    rgb: np.ndarray       # (H, W, 3)


def render_frame_pred(f: VoxelField, pose: Pose, intrinsics: CameraIntrinsics,
                      cfg: RaySampleConfig) -> Prediction:
    if cfg.stratified:
        cfg = RaySampleConfig(cfg.n_samples, cfg.near, cfg.far, False)
    H, W = intrinsics.height, intrinsics.width
    o, d, norm = pixel_rays(pose, intrinsics)
    out = render_rays(f, o, d, cfg)
    C = f.class_count
    probs = out["probs"].reshape(H, W, C)
    return Prediction(probs=probs,
                      logits=out["logits"].reshape(H, W, C),
                      sem=np.argmax(probs, axis=-1),
                      depth=(out["depth"] / norm).reshape(H, W),
                      rgb=out["rgb"].reshape(H, W, 3))


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    iterations: int = 3000
    rays_per_iter: int = 512
    learning_rate: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    semantic_weight: float = 0.04
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1 or self.rays_per_iter < 1:
            raise ValueError("iterations and rays_per_iter must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")


@dataclass
class TrainHistory:
    photo: list = dc_field(default_factory=list)
    sem: list = dc_field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "photo_loss", "sem_loss"])
            for i, (p, s) in enumerate(zip(self.photo, self.sem)):
                w.writerow([i, repr(p), repr(s)])


class _GradBuffers:
    def __init__(self, f: VoxelField):
        V = int(np.prod(f.resolution))
        Fc = f.params.shape[3]
        self.grad = np.zeros((V, Fc))
        self.stamp = np.full(V, -1, dtype=np.int64)
        self.touched = np.empty(V, dtype=np.int64)


def loss_and_grad(f: VoxelField, origins, directions, ts, deltas, gt_rgb, gt_sem,
                  semantic_weight: float = 0.04):
    """Total loss and dense gradient w.r.t. ``f.params`` for fixed samples."""
    buf = _GradBuffers(f)
    act, dact = K.activate(f.flat_params())
    photo, sem, n = K.loss_grad(
        act, dact, *f._kargs(),
        np.ascontiguousarray(origins, dtype=np.float64),
        np.ascontiguousarray(directions, dtype=np.float64),
        np.ascontiguousarray(ts, dtype=np.float64), np.ascontiguousarray(deltas, dtype=np.float64),
        np.ascontiguousarray(gt_rgb, dtype=np.float64), np.asarray(gt_sem, dtype=np.int64),
        float(semantic_weight), buf.grad, buf.stamp, buf.touched, 0, 0)
    return photo + semantic_weight * sem, buf.grad.reshape(f.params.shape)


def full_labels(ds: Dataset) -> list[np.ndarray]:
    return [fr.sem.astype(np.int64) for fr in ds.train_frames]


def train(f: VoxelField, ds: Dataset, labels: list[np.ndarray], cfg: TrainConfig,
          ray_cfg: RaySampleConfig) -> tuple[VoxelField, TrainHistory]:
    """Fit ``f`` in place on the training frames.

    ``labels`` holds one ``(H, W)`` integer map per training frame with -1
    marking unlabelled pixels. Photometric loss uses every sampled ray; the
    cross-entropy term only labelled ones.
    """
    if len(labels) != len(ds.train_frames):
        raise ValueError("need one label map per training frame")
    lab = np.stack([np.asarray(l, dtype=np.int64).reshape(-1) for l in labels])
    if not np.any(lab >= 0):
        raise ValueError("no labelled pixels")
    if lab.max() >= f.class_count:
        raise ValueError("label id out of range")

    n_frames = len(ds.train_frames)
    HW = lab.shape[1]
    rays_o, rays_d, rgbs = [], [], []
    for fr in ds.train_frames:
        o, d, _ = pixel_rays(fr.pose, fr.intrinsics)
        rays_o.append(o)
        rays_d.append(d)
        rgbs.append(fr.rgb.reshape(-1, 3).astype(np.float64))
    rays_o, rays_d, rgbs = np.stack(rays_o), np.stack(rays_d), np.stack(rgbs)

    rng = np.random.default_rng(cfg.seed)
    scfg = RaySampleConfig(ray_cfg.n_samples, ray_cfg.near, ray_cfg.far, True)
    buf = _GradBuffers(f)
    m = np.zeros_like(buf.grad)
    v = np.zeros_like(buf.grad)
    flat = f.flat_params()
    act, dact = K.activate(flat)
    kargs = f._kargs()
    n_rays = min(cfg.rays_per_iter, HW)
    hist = TrainHistory()
    for it in range(cfg.iterations):
        k = int(rng.integers(n_frames))
        pix = rng.choice(HW, size=n_rays, replace=False)
        ts, deltas = sample_depths(scfg, n_rays, rng)
        photo, sem, n_touched = K.loss_grad(
            act, dact, *kargs, rays_o[k, pix], rays_d[k, pix], ts, deltas,
            rgbs[k, pix], lab[k, pix], cfg.semantic_weight,
            buf.grad, buf.stamp, buf.touched, 0, it)
        if not (np.isfinite(photo) and np.isfinite(sem)):
            raise TrainingDiverged(f"non-finite loss at iteration {it}: "
                                   f"photo={photo}, sem={sem}")
        K.adam_step(flat, act, dact, buf.grad, m, v, buf.touched, n_touched, cfg.learning_rate,
                    cfg.beta1, cfg.beta2, cfg.eps, it + 1)
        hist.photo.append(float(photo))
        hist.sem.append(float(sem))
    if not np.all(np.isfinite(f.params)):
        raise TrainingDiverged("non-finite parameters after training")
    return f, hist


# --------------------------------------------------------------------------
# checkpoints

_HEADER = struct.Struct("<8sI3II6d")


def save_field(f: VoxelField, path) -> None:
    head = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, *f.resolution, f.class_count,
                        *f.bbox_min, *f.bbox_max)
    body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes()
                    for a in (f.density, f.color, f.logits))
    Path(path).write_bytes(head + body)


def load_field(path) -> VoxelField:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError("checkpoint truncated")
    magic, version, nx, ny, nz, C, *box = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError("not a field checkpoint")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unknown checkpoint version {version}")
    V = nx * ny * nz
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    if data.size != V * (4 + C):
        raise ValueError("checkpoint size does not match header")
    params = np.empty((nx, ny, nz, 4 + C))
    params[..., 0] = data[:V].reshape(nx, ny, nz)
    params[..., 1:4] = data[V:4 * V].reshape(nx, ny, nz, 3)
    params[..., 4:] = data[4 * V:].reshape(nx, ny, nz, C)
    return VoxelField((nx, ny, nz), box[:3], box[3:], params)
