"""Point prompts from coarse predictions.

Points are grouped by predicted tooth class, optionally filtered by
confidence (strictly above ``tau``), averaged, and projected into each view.
The unfiltered variant is the plain-aggregation baseline.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .camera import project_points, to_pixel

DROP_EMPTY = "empty_after_filter"
DROP_OUT_OF_BOUNDS = "projected_out_of_bounds"
DROP_BEHIND = "behind_camera"


@dataclass(frozen=True)
class Prompt:
    u: int  # column
    v: int  # row
    class_id: int
    view_id: int = 0


@dataclass
class PromptSet:
    prompts: list = field(default_factory=list)
    dropped: list = field(default_factory=list)  # (class_id, reason, view_id)

    def for_view(self, view_id):
        return [p for p in self.prompts if p.view_id == view_id]

    def to_table(self):
        lines = ["view_id class_id u v"]
        lines += [f"{p.view_id} {p.class_id} {p.u} {p.v}" for p in self.prompts]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_table(cls, text):
        rows = [ln.split() for ln in text.strip().splitlines()[1:] if ln.strip()]
        return cls([Prompt(int(u), int(v), int(c), int(vw)) for vw, c, u, v in rows])

    def to_json(self, view_id=0):
        """Payload for the external oracle: ``[{"id": class, "u": col, "v": row}]``."""
        return json.dumps([{"id": p.class_id, "u": p.u, "v": p.v} for p in self.for_view(view_id)])


def partition_subgroups(logits):
    """Map predicted tooth class -> point indices; class 0 never forms a subgroup."""
    pred = np.argmax(np.asarray(logits), axis=1)
    groups = {}
    for k in np.unique(pred):
        if k == 0:
            continue
        groups[int(k)] = np.flatnonzero(pred == k)
    return groups


def filter_confident(indices, confidence, tau):
    indices = np.asarray(indices, dtype=np.int64)
    return indices[np.asarray(confidence)[indices] > tau]


def generate_prompts(subgroups, scan, cameras):
    """One prompt per (subgroup, view): projection of the subgroup's mean position."""
    out = PromptSet()
    pos = np.asarray(scan.positions, dtype=np.float64)
    classes = sorted(subgroups)
    for view_id, cam in enumerate(cameras):
        H, W = cam.image_size
        for k in classes:
            ix = subgroups[k]
            if len(ix) == 0:
                out.dropped.append((k, DROP_EMPTY, view_id))
                continue
            center = pos[np.asarray(ix, dtype=np.int64)].mean(axis=0)
            u, v, _, front = project_points(center, cam)
            if not front[0]:
                out.dropped.append((k, DROP_BEHIND, view_id))
                continue
            row, col = to_pixel(u[0], v[0])
            if not (0 <= row < H and 0 <= col < W):
                out.dropped.append((k, DROP_OUT_OF_BOUNDS, view_id))
                continue
            out.prompts.append(Prompt(int(col), int(row), k, view_id))
    return out


def generate_prompts_cpg(logits, confidence, scan, cameras, tau=0.6):
    subgroups = partition_subgroups(logits)
    filtered = {k: filter_confident(ix, confidence, tau) for k, ix in subgroups.items()}
    return generate_prompts(filtered, scan, cameras)


def generate_prompts_agg(logits, scan, cameras):
    return generate_prompts(partition_subgroups(logits), scan, cameras)


def centroid_distances(prompts: PromptSet, scan, cameras):
    """Pixel distance from each prompt to the projection of its true tooth centroid."""
    cents = scan.tooth_centroids()
    out = []
    for p in prompts.prompts:
        c = cents[p.class_id - 1]
        u, v, _, _ = project_points(c, cameras[p.view_id])
        out.append(float(np.hypot(p.u - u[0], p.v - v[0])))
    return np.array(out)
