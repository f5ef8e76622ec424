"""Pinhole cameras, point-splat z-buffer rendering and pixel-to-point lookup.

A point ``x`` in world coordinates maps to the image as
``[u, v, 1]^T = (1/z) K T [x, 1]^T`` with ``z`` the camera-space depth.
Pixel ``(h, w)`` covers ``u in [w - 0.5, w + 0.5)`` and ``v in [h - 0.5, h + 0.5)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .pnm import colorize_labels, write_pgm, write_ppm


class CameraError(ValueError):
    pass


class BehindCameraError(CameraError):
    pass


@dataclass(frozen=True, eq=False)
class Camera:
    intrinsics: np.ndarray  # (3, 3)
    extrinsics: np.ndarray  # (4, 4) world -> camera
    image_size: tuple  # (H, W)

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64)
        T = np.asarray(self.extrinsics, dtype=np.float64)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "extrinsics", T)
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))
        if K.shape != (3, 3) or T.shape != (4, 4):
            raise CameraError("intrinsics must be 3x3 and extrinsics 4x4")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise CameraError("focal lengths must be positive")
        R = T[:3, :3]
        if np.linalg.norm(R.T @ R - np.eye(3)) >= 1e-9:
            raise CameraError("extrinsic rotation block is not orthonormal")
        if min(self.image_size) < 1:
            raise CameraError("image size must be at least 1x1")

    @classmethod
    def from_params(cls, fx, fy, cx, cy, extrinsics=None, image_size=(128, 128)):
        K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        return cls(K, np.eye(4) if extrinsics is None else extrinsics, image_size)

    @property
    def rotation(self):
        return self.extrinsics[:3, :3]

    @property
    def translation(self):
        return self.extrinsics[:3, 3]

    def same_as(self, other):
        return (
            self.image_size == other.image_size
            and np.array_equal(self.intrinsics, other.intrinsics)
            and np.array_equal(self.extrinsics, other.extrinsics)
        )


def project(point, camera: Camera):
    """Project one world point; returns ``(u, v, depth)``."""
    x = np.asarray(point, dtype=np.float64)
    pc = camera.rotation @ x + camera.translation
    if pc[2] <= 0:
        raise BehindCameraError(f"point {x.tolist()} has camera depth {pc[2]:.6g} <= 0")
    uvw = camera.intrinsics @ pc
    return uvw[0] / pc[2], uvw[1] / pc[2], pc[2]


def project_points(points, camera: Camera):
    """Vectorized projection. Returns ``(u, v, depth, in_front)``.

    ``u``/``v`` are NaN where the point is not in front of the camera.
    """
    X = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    pc = X @ camera.rotation.T + camera.translation
    z = pc[:, 2]
    front = z > 0
    uvw = pc @ camera.intrinsics.T
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(front, uvw[:, 0] / z, np.nan)
        v = np.where(front, uvw[:, 1] / z, np.nan)
    return u, v, z, front


def unproject(u, v, depth, camera: Camera):
    """Inverse of :func:`project` given the camera-space depth."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    ray = np.stack([u, v, np.ones_like(u)], axis=-1) @ np.linalg.inv(camera.intrinsics).T
    pc = ray * depth[..., None]
    return (pc - camera.translation) @ camera.rotation


def to_pixel(u, v):
    """Nearest pixel ``(row, col)`` of continuous image coordinates."""
    return np.floor(np.asarray(v) + 0.5).astype(np.int64), np.floor(np.asarray(u) + 0.5).astype(np.int64)


@dataclass(frozen=True, eq=False)
class RenderedView:
    camera: Camera
    depth: np.ndarray  # (H, W), +inf where empty
    point_index: np.ndarray  # (H, W) int64, -1 where empty
    label_image: np.ndarray  # (H, W) int64, -1 where empty
    instance_image: np.ndarray  # (H, W) int64, -1 where empty
    point_pixels: np.ndarray  # (N, 2) projected (row, col) per point, -1 if behind camera
    view_id: int = 0

    @property
    def shape(self):
        return self.depth.shape

    def visible_points(self):
        idx = self.point_index[self.point_index >= 0]
        return np.unique(idx)


def render(scan, camera: Camera, splat_radius=1, view_id=0, impl=None) -> RenderedView:
    """Splat every in-front point as a disc; nearest depth wins, ties go to the lower index."""
    H, W = camera.image_size
    u, v, z, front = project_points(scan.positions, camera)
    depth, index = kernels.splat_zbuffer(
        np.nan_to_num(u), np.nan_to_num(v), z, front, H, W, int(splat_radius), impl=impl
    )
    set_ = index >= 0
    labels = np.full((H, W), -1, dtype=np.int64)
    inst = np.full((H, W), -1, dtype=np.int64)
    labels[set_] = scan.class_labels[index[set_]]
    inst[set_] = scan.instance_ids[index[set_]]
    rows, cols = to_pixel(np.nan_to_num(u), np.nan_to_num(v))
    pix = np.stack([rows, cols], axis=1)
    pix[~front] = -1
    return RenderedView(camera, depth, index, labels, inst, pix, view_id)


def reproject_pixels(pixels, view: RenderedView):
    """Point indices behind the given ``(h, w)`` pixels, empties skipped, de-duplicated."""
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    H, W = view.shape
    bad = (pixels[:, 0] < 0) | (pixels[:, 0] >= H) | (pixels[:, 1] < 0) | (pixels[:, 1] >= W)
    if bad.any():
        raise IndexError(f"pixel {pixels[bad][0].tolist()} outside {H}x{W} image")
    idx = view.point_index[pixels[:, 0], pixels[:, 1]]
    return np.unique(idx[idx >= 0])


def _look_at(eye, target):
    fwd = np.asarray(target, float) - np.asarray(eye, float)
    z = fwd / np.linalg.norm(fwd)
    hint = np.array([0.0, 1.0, 0.0])
    x = np.cross(z, hint)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = -R @ np.asarray(eye, float)
    return T


def fit_camera(points, extrinsics, image_size=(128, 128), fill=0.9):
    """Choose focal length and principal point so the points span ``fill`` of the image."""
    H, W = image_size
    X = np.asarray(points, dtype=np.float64)
    pc = X @ extrinsics[:3, :3].T + extrinsics[:3, 3]
    if np.any(pc[:, 2] <= 0):
        raise CameraError("cannot fit a camera with points behind it")
    a = pc[:, 0] / pc[:, 2]
    b = pc[:, 1] / pc[:, 2]
    extent = max(np.ptp(a), np.ptp(b), 1e-12)
    f = fill * min(H, W) / extent
    cx = (W - 1) / 2 - f * (a.min() + a.max()) / 2
    cy = (H - 1) / 2 - f * (b.min() + b.max()) / 2
    return Camera.from_params(f, f, cx, cy, extrinsics, image_size)


def default_cameras(scan, count=1, image_size=(128, 128), fill=0.9, tilt_deg=35.0):
    """Top-down occlusal view first, then views tilted around the arch."""
    if count < 1:
        raise CameraError("count must be >= 1")
    pts = np.asarray(scan.positions, dtype=np.float64)
    center = pts.mean(axis=0)
    size = float(np.ptp(pts, axis=0).max())
    dist = 3.0 * size
    cams = [fit_camera(pts, _look_at(center + [0.0, 0.0, dist], center), image_size, fill)]
    tilt = np.deg2rad(tilt_deg)
    for i in range(1, count):
        # spread extra views over the arch opening side and both flanks
        az = np.pi * (i - 1) / max(count - 2, 1) - np.pi if count > 2 else -np.pi / 2
        d = np.array([np.sin(tilt) * np.cos(az), np.sin(tilt) * np.sin(az), np.cos(tilt)])
        cams.append(fit_camera(pts, _look_at(center + dist * d, center), image_size, fill))
    return cams


def export_view(view: RenderedView, directory, num_classes, prefix="view"):
    """Write ``<prefix>_labels.ppm``, ``<prefix>_depth.pgm`` (16-bit) and ``<prefix>_pixmap.txt``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_ppm(directory / f"{prefix}_labels.ppm", colorize_labels(view.label_image, num_classes))
    write_pgm(directory / f"{prefix}_depth.pgm", depth_to_u16(view.depth), maxval=65535)
    rows, cols = np.nonzero(view.point_index >= 0)
    with open(directory / f"{prefix}_pixmap.txt", "w") as fh:
        for h, w in zip(rows.tolist(), cols.tolist()):
            fh.write(f"{h} {w} {int(view.point_index[h, w])}\n")


def depth_to_u16(depth):
    """Linear scale: nearest depth -> 65535, farthest -> 1, empty -> 0."""
    out = np.zeros(depth.shape, dtype=np.uint16)
    fin = np.isfinite(depth)
    if fin.any():
        lo, hi = depth[fin].min(), depth[fin].max()
        span = hi - lo if hi > lo else 1.0
        out[fin] = np.round(65535 - (depth[fin] - lo) / span * 65534).astype(np.uint16)
    return out


def shaded_image(view: RenderedView):
    """Depth-shaded RGB rendering (no labels), the image handed to an external segmenter."""
    g = (depth_to_u16(view.depth) >> 8).astype(np.uint8)
    return np.repeat(g[:, :, None], 3, axis=2)
