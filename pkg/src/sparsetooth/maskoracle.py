"""Promptable 2D mask oracles and the background-mask complement.

An oracle maps (rendered view, point prompt) to one binary mask. Two are
provided: a simulator backed by the rendered instance image with a
configurable noise model, and a bridge to an external command that speaks
a file-based protocol (see :class:`ExternalOracle`).
"""
from __future__ import annotations

import json
import logging
import os
import shlex
import subprocess
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .camera import RenderedView, shaded_image
from .pnm import PnmError, read_pnm, write_ppm

log = logging.getLogger(__name__)

TIMEOUT_ENV = "WS3D_ORACLE_TIMEOUT_SECS"


class OracleError(RuntimeError):
    pass


@dataclass(frozen=True)
class OracleNoiseConfig:
    dilate_px: int = 0
    erode_px: int = 0
    flip_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.dilate_px < 0 or self.erode_px < 0:
            raise ValueError("morphology radii must be >= 0")
        if not 0.0 <= self.flip_prob < 1.0:
            raise ValueError("flip_prob must lie in [0, 1)")


@dataclass
class MaskSet:
    view_id: int
    shape: tuple
    masks: list = field(default_factory=list)  # (class_id, bool mask, (u, v) prompt pixel)
    incidents: list = field(default_factory=list)

    def add(self, class_id, mask, prompt_uv):
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != tuple(self.shape):
            raise OracleError(f"mask for class {class_id} has shape {mask.shape}, view is {self.shape}")
        self.masks.append((int(class_id), mask, (int(prompt_uv[0]), int(prompt_uv[1]))))

    def nonempty(self):
        return [m for m in self.masks if m[1].any()]


def background_mask(masks, height, width):
    """Pixels covered by no foreground mask (product of the complements)."""
    bg = np.ones((height, width), dtype=bool)
    for item in masks:
        m = item[1] if isinstance(item, tuple) else item
        m = np.asarray(m, dtype=bool)
        if m.shape != (height, width):
            raise ValueError(f"mask shape {m.shape} != ({height}, {width})")
        bg &= ~m
    return bg


def _square(radius):
    return np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)


def _nearest_set_pixel(index_image, row, col, radius=3):
    H, W = index_image.shape
    best = None
    for dr in range(-radius, radius + 1):
        for dc in range(-radius, radius + 1):
            r, c = row + dr, col + dc
            if not (0 <= r < H and 0 <= c < W) or index_image[r, c] < 0:
                continue
            d2 = dr * dr + dc * dc
            if d2 > radius * radius:
                continue
            key = (d2, r, c)
            if best is None or key < best:
                best = key
    return None if best is None else (best[1], best[2])


def gt_oracle_segment(view: RenderedView, prompt_uv, noise: OracleNoiseConfig = OracleNoiseConfig()):
    """Simulated promptable segmenter built on the rendered instance image.

    The clean mask is every pixel showing the instance under the prompt (or
    under the nearest non-empty pixel within radius 3; empty mask if none).
    Noise is applied as dilation, then erosion, then seeded pixel flips.
    """
    H, W = view.shape
    u, v = int(prompt_uv[0]), int(prompt_uv[1])
    if not (0 <= v < H and 0 <= u < W):
        raise IndexError(f"prompt ({u}, {v}) outside {H}x{W} view")
    hit = (v, u) if view.point_index[v, u] >= 0 else _nearest_set_pixel(view.point_index, v, u)
    if hit is None:
        mask = np.zeros((H, W), dtype=bool)
    else:
        mask = view.instance_image == view.instance_image[hit]
    if noise.dilate_px:
        mask = ndimage.binary_dilation(mask, structure=_square(noise.dilate_px))
    if noise.erode_px:
        mask = ndimage.binary_erosion(mask, structure=_square(noise.erode_px))
    if noise.flip_prob > 0:
        key = zlib.crc32(f"{view.view_id}:{u}:{v}".encode())
        rng = np.random.default_rng([noise.seed, key])
        mask = mask ^ (rng.random((H, W)) < noise.flip_prob)
    return mask


class GroundTruthOracle:
    """Oracle protocol: ``segment_all(view, prompts) -> MaskSet``."""

    def __init__(self, noise: OracleNoiseConfig = OracleNoiseConfig()):
        self.noise = noise
        self.calls = 0

    def segment(self, view, prompt_uv):
        self.calls += 1
        return gt_oracle_segment(view, prompt_uv, self.noise)

    def segment_all(self, view, prompts):
        out = MaskSet(view.view_id, view.shape)
        for p in prompts:
            out.add(p.class_id, self.segment(view, (p.u, p.v)), (p.u, p.v))
        return out


class ExternalOracle:
    """Runs ``<command> <workdir>`` on files.

    Inputs written to the work directory: ``view.ppm`` (P6, depth-shaded
    rendering) and ``prompts.json`` (``[{"id": k, "u": int, "v": int}]``).
    The command must leave one ``mask_<id>.pgm`` (P5, 0/255) per prompt.
    A failing run, or a missing or malformed mask, yields empty masks and an
    incident record; with ``strict=True`` these raise :class:`OracleError`.
    """

    def __init__(self, command, workdir=None, timeout=None, strict=False):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.workdir = workdir
        if timeout is None:
            timeout = float(os.environ.get(TIMEOUT_ENV, "60"))
        self.timeout = timeout
        self.strict = strict
        self.calls = 0

    def _fail(self, out, message):
        out.incidents.append(message)
        log.warning("external oracle: %s", message)
        if self.strict:
            raise OracleError(message)

    def segment_all(self, view, prompts):
        self.calls += 1
        if self.workdir is None:
            with tempfile.TemporaryDirectory(prefix="ws3d_oracle_") as tmp:
                return self._run(Path(tmp), view, prompts)
        wd = Path(self.workdir)
        wd.mkdir(parents=True, exist_ok=True)
        return self._run(wd, view, prompts)

    def _run(self, wd, view, prompts):
        H, W = view.shape
        out = MaskSet(view.view_id, view.shape)
        for stale in wd.glob("mask_*.pgm"):
            stale.unlink()
        write_ppm(wd / "view.ppm", shaded_image(view))
        payload = [{"id": p.class_id, "u": p.u, "v": p.v} for p in prompts]
        (wd / "prompts.json").write_text(json.dumps(payload))

        ran = True
        try:
            proc = subprocess.run(self.command + [str(wd)], capture_output=True, timeout=self.timeout)
            if proc.returncode != 0:
                ran = False
                self._fail(out, f"command exited with {proc.returncode}: {proc.stderr.decode(errors='replace')[-200:]}")
        except subprocess.TimeoutExpired:
            ran = False
            self._fail(out, f"command timed out after {self.timeout}s")
        except OSError as exc:
            ran = False
            self._fail(out, f"command could not start: {exc}")

        for p in prompts:
            mask = np.zeros((H, W), dtype=bool)
            path = wd / f"mask_{p.class_id}.pgm"
            if ran:
                if not path.exists():
                    self._fail(out, f"missing output {path.name}")
                else:
                    try:
                        img = read_pnm(path)
                    except PnmError as exc:
                        self._fail(out, f"malformed output {path.name}: {exc}")
                    else:
                        if img.ndim != 2 or img.shape != (H, W):
                            self._fail(out, f"dimension mismatch in {path.name}: got {img.shape}, expected {(H, W)}")
                        else:
                            mask = img > 0
            out.add(p.class_id, mask, (p.u, p.v))
        return out
