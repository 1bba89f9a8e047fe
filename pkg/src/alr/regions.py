"""Superpixel regions and their per-region statistics.

Frames are split into compact, colour-coherent regions with a small SLIC
implementation; each region then summarises the current model's
predictions by mean pixel entropy, mean composited logits and the mean
backprojected 3D point.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .scene import CameraIntrinsics, Pose

DEPTH_FLOOR = 1e-3


@dataclass
class Partition:
    frame_id: int
    labels: np.ndarray     # (H, W) region ids in [0, n_regions)

    @property
    def n_regions(self) -> int:
        return int(self.labels.max()) + 1

    def save(self, path) -> None:
        Path(path).write_bytes(np.ascontiguousarray(self.labels, dtype="<u2").tobytes())

    @classmethod
    def load(cls, path, frame_id: int, height: int, width: int) -> "Partition":
        lab = np.frombuffer(Path(path).read_bytes(), dtype="<u2")
        if lab.size != height * width:
            raise ValueError(f"{path}: expected {height * width} region ids, found {lab.size}")
        return cls(frame_id, lab.reshape(height, width).astype(np.int64))


@dataclass
class Region:
    frame_id: int
    region_id: int
    pixels: np.ndarray                 # (n, 2) row, col
    mean_entropy: float = np.nan
    feature: np.ndarray | None = None
    centroid3d: np.ndarray | None = None
    valid_depth_fraction: float = np.nan

    @property
    def pixel_count(self) -> int:
        return len(self.pixels)

    def flat_index(self, width: int) -> np.ndarray:
        return self.pixels[:, 0] * width + self.pixels[:, 1]


def _grid_shape(R: int, H: int, W: int) -> tuple[int, int]:
    ny = max(1, min(H, int(round(np.sqrt(R * H / W)))))
    nx = max(1, min(W, int(round(R / ny))))
    return ny, nx


def partition_frame(rgb: np.ndarray, n_regions: int = 48, compactness: float = 10.0,
                    iters: int = 10, frame_id: int = 0) -> Partition:
    """SLIC superpixels on an ``(H, W, 3)`` image in ``[0, 1]``.

    Colours are scaled to ``[0, 100]`` so ``compactness`` plays the same role
    as in Lab-space SLIC. Clusters start on a regular grid, search within
    one grid step of their centre and are refined ``iters`` times; afterwards
    every disconnected fragment is merged into its largest neighbour.
    """
    H, W = rgb.shape[:2]
    if not 1 <= n_regions <= H * W:
        raise ValueError("n_regions must lie in [1, H*W]")
    col = rgb.reshape(-1, 3).astype(np.float64) * 100.0
    rr, cc = np.mgrid[0:H, 0:W]
    pos = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.float64)

    ny, nx = _grid_shape(n_regions, H, W)
    step = np.sqrt(H * W / (ny * nx))
    cy = (np.arange(ny) + 0.5) * H / ny
    cx = (np.arange(nx) + 0.5) * W / nx
    c_pos = np.stack(np.meshgrid(cy, cx, indexing="ij"), axis=-1).reshape(-1, 2)
    seed_pix = np.minimum(c_pos.astype(int), [H - 1, W - 1])
    c_col = col[seed_pix[:, 0] * W + seed_pix[:, 1]]
    win = np.array([H / ny, W / nx])

    assign = np.zeros(H * W, dtype=np.int64)
    for _ in range(max(iters, 1)):
        dpos = pos[:, None, :] - c_pos[None, :, :]
        d_s = (dpos ** 2).sum(-1) / step ** 2
        d_c = ((col[:, None, :] - c_col[None, :, :]) ** 2).sum(-1)
        dist = d_c + compactness ** 2 * d_s
        near = np.all(np.abs(dpos) <= win, axis=-1)
        dist = np.where(near, dist, np.inf)
        orphan = ~np.isfinite(dist).any(axis=1)
        if orphan.any():
            dist[orphan] = d_c[orphan] + compactness ** 2 * d_s[orphan]
        assign = np.argmin(dist, axis=1)
        counts = np.bincount(assign, minlength=len(c_pos))
        has = counts > 0
        for j in range(2):
            c_pos[has, j] = np.bincount(assign, pos[:, j], len(c_pos))[has] / counts[has]
        for j in range(3):
            c_col[has, j] = np.bincount(assign, col[:, j], len(c_pos))[has] / counts[has]

    labels = _enforce_connectivity(assign.reshape(H, W))
    return Partition(frame_id, labels)


def _enforce_connectivity(labels: np.ndarray) -> np.ndarray:
    """Keep the largest component per label; merge the other fragments into
    their largest adjacent region. Result is relabelled in raster order."""
    lab = labels.copy()
    while True:
        frags = []
        for r in np.unique(lab):
            comp, n = ndimage.label(lab == r)
            if n <= 1:
                continue
            sizes = np.bincount(comp.ravel())[1:]
            keep = int(np.argmax(sizes)) + 1
            frags.extend(comp == k for k in range(1, n + 1) if k != keep)
        if not frags:
            break
        sizes = np.bincount(lab.ravel())
        for mask in frags:
            ring = ndimage.binary_dilation(mask) & ~mask
            nbrs = np.unique(lab[ring])
            own = lab[mask][0]
            nbrs = nbrs[nbrs != own]
            if len(nbrs) == 0:
                continue
            # largest neighbour, lowest id on ties
            target = nbrs[np.argmax(sizes[nbrs])]
            lab[mask] = target
            sizes = np.bincount(lab.ravel(), minlength=len(sizes))
    _, first = np.unique(lab.ravel(), return_index=True)
    order = np.argsort(first)
    remap = np.empty(lab.max() + 1, dtype=np.int64)
    remap[np.unique(lab.ravel())[order]] = np.arange(len(order))
    return remap[lab]


def regions_of(part: Partition) -> list[Region]:
    H, W = part.labels.shape
    flat = part.labels.ravel()
    order = np.argsort(flat, kind="stable")
    bounds = np.searchsorted(flat[order], np.arange(part.n_regions + 1))
    out = []
    for r in range(part.n_regions):
        idx = order[bounds[r]:bounds[r + 1]]
        out.append(Region(part.frame_id, r, np.stack([idx // W, idx % W], axis=1)))
    return out


def whole_frame_region(frame_id: int, height: int, width: int) -> Region:
    rr, cc = np.mgrid[0:height, 0:width]
    return Region(frame_id, 0, np.stack([rr.ravel(), cc.ravel()], axis=1))


# --------------------------------------------------------------------------
# statistics


def pixel_entropy(probs: np.ndarray) -> np.ndarray:
    """Natural-log entropy over the last axis, with 0 log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return 0.0 - terms.sum(axis=-1)   # keeps a one-hot result at +0.0


def region_entropy(prob_map: np.ndarray, region: Region) -> float:
    p = prob_map[region.pixels[:, 0], region.pixels[:, 1]]
    return float(pixel_entropy(p).mean())


def region_feature(logit_map: np.ndarray, region: Region) -> np.ndarray:
    return logit_map[region.pixels[:, 0], region.pixels[:, 1]].mean(axis=0)


def backproject(pixel, depth, pose: Pose, intrinsics: CameraIntrinsics) -> np.ndarray:
    """World point(s) for pixel ``(u, v)`` = (col, row) at z-depth ``depth``."""
    uv = np.asarray(pixel, dtype=np.float64)
    z = np.asarray(depth, dtype=np.float64)
    if np.any(z <= 0):
        raise ValueError("invalid depth: must be > 0")
    K = intrinsics
    cam = np.stack([(uv[..., 0] - K.cx) / K.fx * z, (uv[..., 1] - K.cy) / K.fy * z, z * np.ones_like(uv[..., 0])],
                   axis=-1)
    return cam @ pose.R.T + pose.t


def project(points, pose: Pose, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Pixel coordinates ``(u, v)`` of world point(s)."""
    cam = (np.asarray(points, dtype=np.float64) - pose.t) @ pose.R
    K = intrinsics
    return np.stack([K.fx * cam[..., 0] / cam[..., 2] + K.cx,
                     K.fy * cam[..., 1] / cam[..., 2] + K.cy], axis=-1)


def region_centroid3d(depth_map: np.ndarray, pose: Pose, intrinsics: CameraIntrinsics,
                      region: Region, depth_floor: float = DEPTH_FLOOR) -> tuple[np.ndarray, float]:
    z = depth_map[region.pixels[:, 0], region.pixels[:, 1]]
    ok = z > depth_floor
    if not ok.any():
        return pose.t.copy(), 0.0
    uv = region.pixels[ok][:, ::-1]
    pts = backproject(uv, z[ok], pose, intrinsics)
    return pts.mean(axis=0), float(ok.mean())


def compute_stats(regions: list[Region], probs: np.ndarray, logits: np.ndarray,
                  depth: np.ndarray, pose: Pose, intrinsics: CameraIntrinsics,
                  depth_floor: float = DEPTH_FLOOR) -> None:
    """Fill the cached statistics of every region of one frame, in place."""
    ent = pixel_entropy(probs)
    for reg in regions:
        r, c = reg.pixels[:, 0], reg.pixels[:, 1]
        reg.mean_entropy = float(ent[r, c].mean())
        reg.feature = logits[r, c].mean(axis=0)
        reg.centroid3d, reg.valid_depth_fraction = region_centroid3d(
            depth, pose, intrinsics, reg, depth_floor)
