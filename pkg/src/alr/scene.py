"""Procedural indoor scenes with exact ground truth.

A scene is a closed rectangular room (z-up, occupying ``[0, extent]``) holding
axis-aligned boxes and spheres that rest on the floor. Every surface carries a
semantic class id and a flat diffuse colour, so RGB, semantic and depth frames
can be rendered analytically by ray casting.

Camera convention is OpenCV-style: x right, y down, z forward, poses map
camera coordinates to world coordinates, and pixel ``(col, row)`` has its
centre at ``(u, v) = (col, row)``. Frame depth is z-depth along the optical
axis, as delivered by RGB-D sensors.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

FLOOR, WALL, CEILING = "floor", "wall", "ceiling"
_OBJECT_NAMES = ["table", "chair", "sofa", "bed", "shelf", "lamp", "plant", "tv",
                 "cabinet", "desk", "stool", "box", "vase", "bin", "pillow",
                 "monitor", "rug", "crate", "drum"]

_EPS = 1e-9


class PlacementError(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


def default_palette(n: int) -> np.ndarray:
    """Well separated colours, one per class (golden-ratio hue walk)."""
    cols = []
    for i in range(n):
        h = (0.08 + i * 0.618033988749895) % 1.0
        s = 0.55 + 0.35 * ((i * 7) % 3) / 2
        v = 0.55 + 0.4 * ((i * 5) % 4) / 3
        cols.append(colorsys.hsv_to_rgb(h, s, v))
    return np.asarray(cols, dtype=np.float64)


@dataclass
class SceneSpec:
    seed: int = 0
    room_extent: tuple = (4.0, 4.0, 2.6)
    n_objects: int = 6
    class_count: int = 8
    object_size_range: tuple = (0.5, 1.0)
    palette: np.ndarray | None = None
    texture: float = 0.3

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if self.n_objects < 0:
            raise ValueError("n_objects must be >= 0")
        ext = np.asarray(self.room_extent, dtype=np.float64)
        if ext.shape != (3,) or np.any(ext <= 0):
            raise ValueError("room_extent must be three positive lengths")
        lo, hi = self.object_size_range
        if not 0 < lo <= hi:
            raise ValueError("object_size_range must satisfy 0 < min <= max")
        if self.palette is None:
            self.palette = default_palette(self.class_count)
        self.palette = np.asarray(self.palette, dtype=np.float64)
        if self.palette.shape != (self.class_count, 3):
            raise ValueError("palette must hold one RGB triple per class")
        if np.any(self.palette < 0) or np.any(self.palette > 1):
            raise ValueError("palette colours must lie in [0, 1]")
        if not 0 <= self.texture < 1:
            raise ValueError("texture amplitude must lie in [0, 1)")


def shell_classes(class_count: int) -> dict:
    """Class ids used by the room shell; objects use the remaining ids."""
    if class_count == 2:
        return {FLOOR: 0, WALL: 0, CEILING: 0}
    if class_count == 3:
        return {FLOOR: 0, WALL: 1, CEILING: 1}
    return {FLOOR: 0, WALL: 1, CEILING: 2}


def class_names(class_count: int) -> list[str]:
    shell = shell_classes(class_count)
    n_shell = len(set(shell.values()))
    names = [FLOOR, WALL, CEILING][:n_shell]
    if n_shell == 1:
        names = ["shell"]
    elif n_shell == 2:
        names = [FLOOR, "wall_ceiling"]
    for i in range(class_count - n_shell):
        base = _OBJECT_NAMES[i % len(_OBJECT_NAMES)]
        names.append(base if i < len(_OBJECT_NAMES) else f"{base}{i // len(_OBJECT_NAMES)}")
    return names


@dataclass
class Scene:
    extent: np.ndarray                 # (3,) room size, room spans [0, extent]
    class_count: int
    shell_class: dict                  # floor/wall/ceiling -> class id
    shell_rgb: dict                    # floor/wall/ceiling -> (3,)
    box_lo: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    box_hi: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    box_class: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    box_rgb: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    sphere_center: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    sphere_radius: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sphere_class: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    sphere_rgb: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    texture: float = 0.0

    @property
    def n_primitives(self) -> int:
        return len(self.box_class) + len(self.sphere_class)

    def primitive_classes(self) -> set[int]:
        """Class ids present on any surface, shell included."""
        ids = set(int(c) for c in self.shell_class.values())
        ids.update(int(c) for c in self.box_class)
        ids.update(int(c) for c in self.sphere_class)
        return ids

    @property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return np.zeros(3), self.extent.copy()


def generate_scene(spec: SceneSpec, max_tries: int = 500) -> Scene:
    """Place ``spec.n_objects`` non-overlapping primitives on the floor.

    Object classes are dealt round-robin from a seeded shuffle, so every
    object class appears once ``n_objects`` reaches the number of object
    classes. Raises :class:`PlacementError` if an object cannot be placed
    within ``max_tries`` attempts.
    """
    rng = np.random.default_rng(spec.seed)
    ext = np.asarray(spec.room_extent, dtype=np.float64)
    C = spec.class_count
    shell = shell_classes(C)
    shell_rgb = {k: spec.palette[v].copy() for k, v in shell.items()}
    # distinguish wall/ceiling shading when they share a class
    if shell[WALL] == shell[CEILING]:
        shell_rgb[CEILING] = shell_rgb[CEILING] * 0.85
    obj_classes = sorted(set(range(C)) - set(shell.values()))
    order = list(rng.permutation(obj_classes))

    lo_s, hi_s = spec.object_size_range
    margin = 0.05
    placed_lo, placed_hi = [], []   # xy footprints
    boxes, spheres = [], []
    for k in range(spec.n_objects):
        cls = int(order[k % len(order)])
        rgb = spec.palette[cls] * rng.uniform(0.85, 1.0)
        is_sphere = rng.uniform() < 0.3
        for _ in range(max_tries):
            if is_sphere:
                r = 0.5 * rng.uniform(lo_s, hi_s)
                size = np.array([2 * r, 2 * r, 2 * r])
            else:
                size = rng.uniform(lo_s, hi_s, size=3)
            free = ext[:2] - size[:2] - 2 * margin
            if np.any(free <= 0) or size[2] >= ext[2]:
                continue
            xy0 = margin + rng.uniform(0, 1, size=2) * free
            xy1 = xy0 + size[:2]
            clash = any(np.all(xy0 < h + margin) and np.all(xy1 > l - margin)
                        for l, h in zip(placed_lo, placed_hi))
            if clash:
                continue
            placed_lo.append(xy0)
            placed_hi.append(xy1)
            if is_sphere:
                center = np.array([xy0[0] + r, xy0[1] + r, r])
                spheres.append((center, r, cls, rgb))
            else:
                boxes.append((np.array([xy0[0], xy0[1], 0.0]),
                              np.array([xy1[0], xy1[1], size[2]]), cls, rgb))
            break
        else:
            raise PlacementError(f"placement overflow: could not place object {k} "
                                 f"after {max_tries} tries")

    scene = Scene(extent=ext, class_count=C, shell_class=shell, shell_rgb=shell_rgb,
                  texture=spec.texture)
    if boxes:
        scene.box_lo = np.array([b[0] for b in boxes])
        scene.box_hi = np.array([b[1] for b in boxes])
        scene.box_class = np.array([b[2] for b in boxes], dtype=np.int64)
        scene.box_rgb = np.array([b[3] for b in boxes])
    if spheres:
        scene.sphere_center = np.array([s[0] for s in spheres])
        scene.sphere_radius = np.array([s[1] for s in spheres])
        scene.sphere_class = np.array([s[2] for s in spheres], dtype=np.int64)
        scene.sphere_rgb = np.array([s[3] for s in spheres])
    return scene


# --------------------------------------------------------------------------
# ray casting


@dataclass
class Hit:
    t: float
    class_id: int
    rgb: np.ndarray


def raycast_many(scene: Scene, origins, directions):
    """Vectorised nearest-hit query.

    Returns ``(t, class_id, rgb, hit)``; rays that miss get ``t = inf``,
    class -1 and black.
    """
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    o, d = np.broadcast_arrays(o, d)
    M = o.shape[0]
    t_best = np.full(M, np.inf)
    cls = np.full(M, -1, dtype=np.int64)
    rgb = np.zeros((M, 3))

    def take(t, c, col):
        better = t < t_best
        t_best[better] = t[better]
        cls[better] = c
        rgb[better] = col

    ext = scene.extent
    with np.errstate(divide="ignore", invalid="ignore"):
        # room shell: six bounded planes
        for axis in range(3):
            others = [a for a in range(3) if a != axis]
            for plane in (0.0, ext[axis]):
                t = (plane - o[:, axis]) / d[:, axis]
                t = np.where(d[:, axis] != 0, t, np.inf)
                p = o + t[:, None] * d
                inside = np.ones(M, dtype=bool)
                for a in others:
                    inside &= (p[:, a] >= -_EPS) & (p[:, a] <= ext[a] + _EPS)
                t = np.where(inside & (t > _EPS), t, np.inf)
                if axis == 2:
                    name = FLOOR if plane == 0.0 else CEILING
                else:
                    name = WALL
                take(t, scene.shell_class[name], scene.shell_rgb[name])

        for lo, hi, c, col in zip(scene.box_lo, scene.box_hi, scene.box_class, scene.box_rgb):
            t = _slab(o, d, lo, hi)
            take(t, int(c), col)

        for ctr, r, c, col in zip(scene.sphere_center, scene.sphere_radius,
                                  scene.sphere_class, scene.sphere_rgb):
            oc = o - ctr
            b = np.einsum("ij,ij->i", oc, d)
            cc = np.einsum("ij,ij->i", oc, oc) - r * r
            a = np.einsum("ij,ij->i", d, d)
            disc = b * b - a * cc
            sq = np.sqrt(np.maximum(disc, 0.0))
            t0 = (-b - sq) / a
            t1 = (-b + sq) / a
            t = np.where(t0 > _EPS, t0, np.where(t1 > _EPS, t1, np.inf))
            t = np.where(disc >= 0, t, np.inf)
            take(t, int(c), col)

    hit = np.isfinite(t_best)
    if scene.texture > 0 and hit.any():
        p = o[hit] + t_best[hit, None] * d[hit]
        rgb[hit] *= shade(p, scene.texture)[:, None]
    return t_best, cls, rgb, hit


def shade(points, amplitude: float) -> np.ndarray:
    """Smooth solid texture: brightness factor in ``[1 - amplitude, 1]``.

    A sum of three axis sinusoids keeps every planar face textured.
    """
    p = np.asarray(points, dtype=np.float64)
    s = (np.sin(2 * np.pi * 2.3 * p[..., 0] + 0.4)
         + np.sin(2 * np.pi * 1.7 * p[..., 1] + 1.3)
         + np.sin(2 * np.pi * 2.9 * p[..., 2] + 2.1)) / 3
    return 1.0 - amplitude * 0.5 * (1.0 + s)


def _slab(o, d, lo, hi):
    tmin = np.full(o.shape[0], -np.inf)
    tmax = np.full(o.shape[0], np.inf)
    for a in range(3):
        da = d[:, a]
        par = da == 0
        t1 = (lo[a] - o[:, a]) / da
        t2 = (hi[a] - o[:, a]) / da
        near = np.where(par, -np.inf, np.minimum(t1, t2))
        far = np.where(par, np.inf, np.maximum(t1, t2))
        outside = par & ((o[:, a] < lo[a]) | (o[:, a] > hi[a]))
        near = np.where(outside, np.inf, near)
        far = np.where(outside, -np.inf, far)
        tmin = np.maximum(tmin, near)
        tmax = np.minimum(tmax, far)
    t = np.where(tmin > _EPS, tmin, np.where(tmax > _EPS, tmax, np.inf))
    return np.where(tmin <= tmax, t, np.inf)


def raycast(scene: Scene, origin, direction) -> Hit | None:
    direction = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(direction) - 1.0) >= 1e-6:
        raise ValueError("direction must be a unit vector")
    t, c, col, hit = raycast_many(scene, origin, direction)
    if not hit[0]:
        return None
    return Hit(float(t[0]), int(c[0]), col[0])


# --------------------------------------------------------------------------
# cameras


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float = 70.0) -> "CameraIntrinsics":
        fx = (width / 2) / np.tan(np.radians(hfov_deg) / 2)
        return cls(width, height, float(fx), float(fx), width / 2, height / 2)


@dataclass
class Pose:
    """Camera-to-world rigid transform."""
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if (not np.allclose(self.R.T @ self.R, np.eye(3), atol=1e-6)
                or abs(np.linalg.det(self.R) - 1.0) > 1e-6):
            raise ValueError("rotation must be orthonormal with det +1")

    def to_list(self) -> list[float]:
        return np.hstack([self.R, self.t[:, None]]).ravel().tolist()

    @classmethod
    def from_list(cls, vals) -> "Pose":
        m = np.asarray(vals, dtype=np.float64).reshape(3, 4)
        return cls(m[:, :3], m[:, 3])

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), eye)


def orbit_trajectory(extent, n_poses: int = 100, radius: float = 1.2, height: float = 1.45,
                     target_height: float = 0.3, wobble: float = 0.3, jitter: float = 0.02,
                     seed: int = 0) -> list[Pose]:
    """Seeded loop around the room centre, looking inward and down.

    Radius and height oscillate by ``wobble`` metres so that the views share
    parallax in both directions; ``jitter`` adds per-pose noise.
    """
    rng = np.random.default_rng(seed)
    ext = np.asarray(extent, dtype=np.float64)
    c = np.array([ext[0] / 2, ext[1] / 2])
    poses = []
    for k in range(n_poses):
        a = 2 * np.pi * k / n_poses
        r = radius + wobble * np.sin(3 * a)
        h = height + wobble * np.sin(5 * a + 1.0)
        eye = np.array([c[0] + r * np.cos(a), c[1] + r * np.sin(a), h])
        eye += rng.uniform(-jitter, jitter, size=3)
        aim = c + 0.5 * wobble * np.array([np.cos(2 * a), np.sin(2 * a)])
        target = np.array([aim[0], aim[1], target_height]) + rng.uniform(-jitter, jitter, size=3)
        poses.append(look_at(eye, target))
    return poses


def pixel_rays(pose: Pose, K: CameraIntrinsics):
    """World-space unit ray directions for every pixel, plus per-pixel
    ``1/z`` scale (ray length per unit z-depth), both in raster order."""
    v, u = np.mgrid[0:K.height, 0:K.width].astype(np.float64)
    dc = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1).reshape(-1, 3)
    norm = np.linalg.norm(dc, axis=1)
    dirs = (dc / norm[:, None]) @ pose.R.T
    return np.broadcast_to(pose.t, dirs.shape).copy(), dirs, norm


# --------------------------------------------------------------------------
# frames and datasets


@dataclass
class Frame:
    rgb: np.ndarray            # (H, W, 3) float32
    sem: np.ndarray            # (H, W) uint16
    depth: np.ndarray | None   # (H, W) float32 z-depth, 0 = invalid
    pose: Pose
    intrinsics: CameraIntrinsics
    frame_id: int = 0


def render_frame(scene: Scene, pose: Pose, intrinsics: CameraIntrinsics, frame_id: int = 0) -> Frame:
    K = intrinsics
    o, d, norm = pixel_rays(pose, K)
    t, cls, rgb, hit = raycast_many(scene, o, d)
    depth = np.where(hit, t / norm, 0.0)
    return Frame(
        rgb=rgb.reshape(K.height, K.width, 3).astype(np.float32),
        sem=np.where(hit, cls, 0).reshape(K.height, K.width).astype(np.uint16),
        depth=depth.reshape(K.height, K.width).astype(np.float32),
        pose=pose, intrinsics=K, frame_id=frame_id)


@dataclass
class Dataset:
    train_frames: list
    test_frames: list
    class_names: list
    bbox_min: np.ndarray
    bbox_max: np.ndarray

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return self.train_frames[0].intrinsics


def split_indices(n: int, stride: int = 5) -> tuple[list[int], list[int]]:
    train = list(range(0, n, stride))
    test = [(i + j) // 2 for i, j in zip(train[:-1], train[1:])]
    return train, test


def make_dataset(scene: Scene, trajectory, intrinsics: CameraIntrinsics,
                 names: list[str] | None = None) -> Dataset:
    """Every 5th pose trains; the pose midway between two train poses tests."""
    train_idx, test_idx = split_indices(len(trajectory))
    if len(train_idx) < 3:
        raise ValueError("trajectory too short: need at least 3 training frames")
    lo, hi = scene.bbox
    return Dataset(
        train_frames=[render_frame(scene, trajectory[i], intrinsics, i) for i in train_idx],
        test_frames=[render_frame(scene, trajectory[i], intrinsics, i) for i in test_idx],
        class_names=list(names or class_names(scene.class_count)),
        bbox_min=lo, bbox_max=hi)


def _write_bin(path: Path, arr: np.ndarray, dtype: str):
    path.write_bytes(np.ascontiguousarray(arr, dtype=np.dtype(dtype)).tobytes())


def _read_bin(path: Path, dtype: str, count: int) -> np.ndarray:
    if not path.exists():
        raise DatasetFormatError(f"missing frame file {path.name}")
    arr = np.frombuffer(path.read_bytes(), dtype=np.dtype(dtype))
    if arr.size != count:
        raise DatasetFormatError(f"dimension mismatch in {path.name}: "
                                 f"expected {count} values, found {arr.size}")
    return arr.copy()


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    K = ds.intrinsics
    manifest = {
        "format_version": FORMAT_VERSION,
        "width": K.width, "height": K.height,
        "fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy,
        "class_names": list(ds.class_names),
        "bbox_min": [float(v) for v in ds.bbox_min],
        "bbox_max": [float(v) for v in ds.bbox_max],
    }
    for split, frames in (("train", ds.train_frames), ("test", ds.test_frames)):
        entries = []
        for f in frames:
            fid = f"{f.frame_id:05d}"
            files = {"rgb": f"rgb_{fid}.bin", "sem": f"sem_{fid}.bin"}
            _write_bin(path / files["rgb"], f.rgb, "<f4")
            _write_bin(path / files["sem"], f.sem, "<u2")
            if f.depth is not None:
                files["depth"] = f"depth_{fid}.bin"
                _write_bin(path / files["depth"], f.depth, "<f4")
            entries.append({"id": int(f.frame_id), "pose": f.pose.to_list(), "files": files})
        manifest[split] = entries
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_dataset(path) -> Dataset:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise DatasetFormatError(f"missing manifest: {mpath}")
    m = json.loads(mpath.read_text())
    if m.get("format_version") != FORMAT_VERSION:
        raise DatasetFormatError(f"unknown format version {m.get('format_version')!r}")
    W, H = int(m["width"]), int(m["height"])
    K = CameraIntrinsics(W, H, float(m["fx"]), float(m["fy"]), float(m["cx"]), float(m["cy"]))
    C = len(m["class_names"])

    def frames(entries):
        out = []
        for e in entries:
            files = e["files"]
            rgb = _read_bin(path / files["rgb"], "<f4", H * W * 3).reshape(H, W, 3)
            sem = _read_bin(path / files["sem"], "<u2", H * W).reshape(H, W)
            if sem.size and int(sem.max()) >= C:
                raise DatasetFormatError(f"class id out of range in {files['sem']}: "
                                         f"{int(sem.max())} >= {C}")
            depth = None
            if "depth" in files:
                depth = _read_bin(path / files["depth"], "<f4", H * W).reshape(H, W)
            if len(e["pose"]) != 12:
                raise DatasetFormatError("dimension mismatch: pose needs 12 values")
            out.append(Frame(rgb.astype(np.float32), sem.astype(np.uint16),
                             None if depth is None else depth.astype(np.float32),
                             Pose.from_list(e["pose"]), K, int(e["id"])))
        return out

    train, test = frames(m["train"]), frames(m["test"])
    if {f.frame_id for f in train} & {f.frame_id for f in test}:
        raise DatasetFormatError("train and test frame ids overlap")
    return Dataset(train, test, list(m["class_names"]),
                   np.asarray(m["bbox_min"], dtype=np.float64),
                   np.asarray(m["bbox_max"], dtype=np.float64))


def default_dataset(spec: SceneSpec | None = None, width: int = 80, height: int = 60,
                    n_poses: int = 100) -> Dataset:
    """The default desk-scale scene and orbit used across the project."""
    spec = spec or SceneSpec()
    scene = generate_scene(spec)
    traj = orbit_trajectory(scene.extent, n_poses=n_poses, seed=spec.seed)
    return make_dataset(scene, traj, CameraIntrinsics.from_fov(width, height))
