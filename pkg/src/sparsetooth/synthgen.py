"""Seeded synthetic jaw scans: ellipsoidal teeth on a dental arch over a gingiva band.

Class 0 is gingiva; teeth are classes 1..K ordered along the arch, and each
tooth class is also its instance id.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


class ScanFormatError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class UnsupportedVersionError(ScanFormatError):
    pass


MAGIC = b"WS3D"
VERSION = 1
_HEADER = struct.Struct("<4sBIH")


@dataclass(frozen=True)
class JawConfig:
    num_teeth: int = 14
    points_per_tooth: int = 100
    gingiva_points: int = 600
    arch_radius: float = 25.0
    tooth_scale: tuple = (1.9, 2.2, 2.4)  # radial, tangential, vertical semi-axes
    jitter_sigma: float = 0.05
    seed: int = 0
    # per-scan shape variation
    radius_jitter: float = 0.06
    rotation_jitter_deg: float = 8.0
    size_jitter: float = 0.05
    gingiva_width: float = 6.0

    def validate(self):
        if self.num_teeth < 1:
            raise ConfigError("num_teeth must be >= 1")
        if self.points_per_tooth < 1 or self.gingiva_points < 1:
            raise ConfigError("point counts must be >= 1")
        if self.jitter_sigma < 0:
            raise ConfigError("jitter_sigma must be >= 0")
        if self.arch_radius <= 0 or min(self.tooth_scale) <= 0:
            raise ConfigError("arch_radius and tooth_scale must be positive")
        if len(self.tooth_scale) != 3:
            raise ConfigError("tooth_scale needs three semi-axes")
        if self.num_teeth > 1:
            # worst case of the per-scan jitter
            r_min = self.arch_radius * (1 - self.radius_jitter)
            spacing = 2 * r_min * np.sin(np.pi / (2 * self.num_teeth))
            axis_max = max(self.tooth_scale) * (1 + self.size_jitter)
            if spacing <= 2 * axis_max:
                raise ConfigError(
                    f"teeth overlap: center spacing {spacing:.3f} <= 2 x semi-axis {axis_max:.3f}"
                )

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "tooth_scale" in d:
            d["tooth_scale"] = tuple(float(x) for x in d["tooth_scale"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown jaw config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(eq=False)
class LabeledScan:
    positions: np.ndarray  # (N, 3) float32
    class_labels: np.ndarray  # (N,) int64
    instance_ids: np.ndarray  # (N,) int64
    num_classes: int  # K + 1
    normals: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def num_points(self):
        return int(self.positions.shape[0])

    @property
    def num_teeth(self):
        return self.num_classes - 1

    def validate(self):
        n = self.num_points
        if self.positions.shape != (n, 3) or not np.all(np.isfinite(self.positions)):
            raise DataError("positions must be a finite (N, 3) array")
        if self.class_labels.shape != (n,) or self.instance_ids.shape != (n,):
            raise DataError("label arrays must have one entry per point")
        if self.class_labels.min(initial=0) < 0 or self.class_labels.max(initial=0) >= self.num_classes:
            raise DataError("class label out of range")
        if not np.array_equal(self.instance_ids == 0, self.class_labels == 0):
            raise DataError("instance id 0 must coincide with class 0")
        if self.normals is not None and self.normals.shape != (n, 3):
            raise DataError("normals must be (N, 3)")

    def equals(self, other):
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.dtype == b.dtype and np.array_equal(a, b)

        return (
            self.num_classes == other.num_classes
            and same(self.positions, other.positions)
            and same(self.normals, other.normals)
            and same(self.class_labels, other.class_labels)
            and same(self.instance_ids, other.instance_ids)
        )

    def tooth_centroids(self):
        """(K, 3) mean position per tooth class 1..K (NaN for absent classes)."""
        out = np.full((self.num_teeth, 3), np.nan)
        for k in range(1, self.num_classes):
            sel = self.class_labels == k
            if sel.any():
                out[k - 1] = self.positions[sel].astype(np.float64).mean(axis=0)
        return out


@dataclass(frozen=True)
class SparseLabelMask:
    labeled_indices: np.ndarray
    per_tooth: int = 1

    def __len__(self):
        return int(self.labeled_indices.size)


def _unit_sphere(rng, n, min_z):
    """Uniform directions on the sphere, restricted to z > min_z by rejection."""
    out = np.empty((0, 3))
    while out.shape[0] < n:
        d = rng.normal(size=(2 * n + 8, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        out = np.concatenate([out, d[d[:, 2] > min_z]])
    return out[:n]


def generate_jaw(config: JawConfig) -> LabeledScan:
    config.validate()
    rng = np.random.default_rng(config.seed)
    k = config.num_teeth
    radius = config.arch_radius * rng.uniform(1 - config.radius_jitter, 1 + config.radius_jitter)
    rot = np.deg2rad(rng.uniform(-config.rotation_jitter_deg, config.rotation_jitter_deg))

    # tooth k sits at arch angle running from pi (class 1) down to 0 (class K)
    angles = np.pi * (1.0 - (np.arange(k) + 0.5) / k) + rot
    positions, normals, labels, footprints = [], [], [], []
    axes0 = np.asarray(config.tooth_scale, dtype=np.float64)
    for t in range(k):
        axes = axes0 * rng.uniform(1 - config.size_jitter, 1 + config.size_jitter, size=3)
        radial = np.array([np.cos(angles[t]), np.sin(angles[t]), 0.0])
        tangential = np.array([-np.sin(angles[t]), np.cos(angles[t]), 0.0])
        frame = np.stack([radial, tangential, [0.0, 0.0, 1.0]], axis=1)
        center = radius * radial + np.array([0.0, 0.0, 0.5 * axes[2]])
        d = _unit_sphere(rng, config.points_per_tooth, min_z=-0.3)
        local = d * axes
        nrm = local / axes**2
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        positions.append(local @ frame.T + center)
        normals.append(nrm @ frame.T)
        labels.append(np.full(config.points_per_tooth, t + 1))
        footprints.append((center[:2], frame[:2, :2], axes[:2]))

    # gingiva band around the arch, slightly wider than the teeth span; no
    # gingiva under a crown, where it could show through gaps in the splat
    g = config.gingiva_points
    margin = 0.12
    pts = np.empty((0, 3))
    while pts.shape[0] < g:
        n = 2 * g
        theta = rng.uniform(-margin, np.pi + margin, size=n) + rot
        rho = radius + rng.uniform(-config.gingiva_width, config.gingiva_width, size=n)
        bump = 0.3 * np.sin(3 * theta) * np.cos(0.5 * (rho - radius))
        gz = -0.2 + bump + rng.normal(scale=0.1, size=n)
        cand = np.stack([rho * np.cos(theta), rho * np.sin(theta), gz], axis=1)
        keep = np.ones(n, dtype=bool)
        for c, fr, ax in footprints:
            loc = (cand[:, :2] - c) @ fr / ax
            keep &= np.sum(loc**2, axis=1) > 1.0
        pts = np.concatenate([pts, cand[keep]])
    positions.append(pts[:g])
    gn = np.tile([0.0, 0.0, 1.0], (g, 1))
    normals.append(gn)
    labels.append(np.zeros(g, dtype=np.int64))

    pos = np.concatenate(positions)
    if config.jitter_sigma > 0:
        pos = pos + rng.normal(scale=config.jitter_sigma, size=pos.shape)
    cls = np.concatenate(labels).astype(np.int64)
    scan = LabeledScan(
        positions=pos.astype(np.float32),
        normals=np.concatenate(normals).astype(np.float32),
        class_labels=cls,
        instance_ids=cls.copy(),
        num_classes=k + 1,
        meta={"seed": int(config.seed)},
    )
    scan.validate()
    return scan


def sample_sparse_labels(scan: LabeledScan, per_tooth=1, seed=0, include_background=False):
    """Uniformly pick ``per_tooth`` labeled points from each tooth class."""
    rng = np.random.default_rng(seed)
    first = 0 if include_background else 1
    picked = []
    for k in range(first, scan.num_classes):
        members = np.flatnonzero(scan.class_labels == k)
        if members.size < per_tooth:
            raise DataError(f"class {k} has {members.size} points, needs {per_tooth}")
        picked.append(np.sort(rng.choice(members, size=per_tooth, replace=False)))
    return SparseLabelMask(np.concatenate(picked).astype(np.int64), per_tooth)


def save_scan(scan: LabeledScan, path):
    """Write the little-endian WS3D container. Missing normals are stored as zeros."""
    n = scan.num_points
    normals = scan.normals if scan.normals is not None else np.zeros((n, 3), np.float32)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, scan.num_teeth))
        fh.write(np.ascontiguousarray(scan.positions, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(normals, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(scan.class_labels, dtype="<u2").tobytes())
        fh.write(np.ascontiguousarray(scan.instance_ids, dtype="<u2").tobytes())


def load_scan(path) -> LabeledScan:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ScanFormatError("truncated header", len(data))
    magic, version, n, k = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ScanFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported scan version {version}", 4)

    offset = _HEADER.size
    arrays = []
    for dtype, count in (("<f4", 3 * n), ("<f4", 3 * n), ("<u2", n), ("<u2", n)):
        nbytes = np.dtype(dtype).itemsize * count
        if offset + nbytes > len(data):
            raise ScanFormatError(f"truncated body: need {nbytes} bytes", offset)
        arrays.append(np.frombuffer(data, dtype=dtype, count=count, offset=offset))
        offset += nbytes
    if offset != len(data):
        raise ScanFormatError(f"{len(data) - offset} trailing bytes", offset)

    pos, nrm, cls, inst = arrays
    normals = nrm.reshape(n, 3).astype(np.float32)
    scan = LabeledScan(
        positions=pos.reshape(n, 3).astype(np.float32),
        normals=None if not normals.any() else normals,
        class_labels=cls.astype(np.int64),
        instance_ids=inst.astype(np.int64),
        num_classes=int(k) + 1,
    )
    try:
        scan.validate()
    except DataError as exc:
        raise ScanFormatError(str(exc), _HEADER.size) from exc
    return scan


def generate_dataset(config: JawConfig, count, seed):
    """``count`` scans with seeds derived from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(count, dtype=np.uint64)
    return [generate_jaw(_with_seed(config, int(s))) for s in seeds]


def _with_seed(config, seed):
    return JawConfig(**{**config.__dict__, "seed": seed})


def save_dataset(scans, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, scan in enumerate(scans):
        p = directory / f"scan_{i:04d}.ws3d"
        save_scan(scan, p)
        paths.append(p)
    return paths


def load_dataset(directory):
    paths = sorted(Path(directory).glob("*.ws3d"))
    if not paths:
        raise DataError(f"no .ws3d scans in {directory}")
    return [load_scan(p) for p in paths]
