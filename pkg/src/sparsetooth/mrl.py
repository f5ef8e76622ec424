"""Turn oracle masks back into 3D point groups and gather their features.

Foreground masks become per-tooth point groups through the rendered
pixel->point map; the complement of their union becomes the background set.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .maskoracle import MaskSet, background_mask
from .prompter import generate_prompts_agg, generate_prompts_cpg

log = logging.getLogger(__name__)


@dataclass
class ReprojectedGroups:
    fg_groups: list = field(default_factory=list)  # (class_id, sorted point indices)
    bg_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    stats: dict = field(default_factory=dict)

    def fg_indices(self):
        return [ix for _, ix in self.fg_groups]

    def claimed(self):
        if not self.fg_groups:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate(self.fg_indices()))


def reproject_mask_groups(masks: MaskSet, view):
    """Point groups under each non-empty mask, each point kept by one mask only.

    A point claimed by several masks stays with the mask whose prompt pixel
    is closest to the point's own projected pixel (ties: lower class id).
    """
    live = [(c, m, uv) for c, m, uv in masks.masks if m.any()]
    stats = {"empty_masks": [c for c, m, _ in masks.masks if not m.any()]}
    pts, owner, keys_d = [], [], []
    for i, (c, m, (u, v)) in enumerate(live):
        ix = np.unique(view.point_index[m])
        ix = ix[ix >= 0]
        pix = view.point_pixels[ix]
        d2 = (pix[:, 0] - v) ** 2 + (pix[:, 1] - u) ** 2
        pts.append(ix)
        owner.append(np.full(ix.size, i))
        keys_d.append(d2)
    if not live:
        return [], stats
    pts = np.concatenate(pts)
    owner = np.concatenate(owner)
    d2 = np.concatenate(keys_d)
    cls = np.array([live[i][0] for i in owner], dtype=np.int64)
    order = np.lexsort((cls, d2, pts))
    pts, owner = pts[order], owner[order]
    first = np.ones(pts.size, dtype=bool)
    first[1:] = pts[1:] != pts[:-1]
    stats["multiply_claimed"] = int(np.sum(~first))
    pts, owner = pts[first], owner[first]
    groups = []
    for i, (c, _, _) in enumerate(live):
        ix = np.sort(pts[owner == i])
        if ix.size:
            groups.append((c, ix))
    return groups, stats


def reproject_background(bg_mask, view, exclude=None):
    """Point indices under background pixels, minus ``exclude`` (fg-claimed points)."""
    ix = np.unique(view.point_index[np.asarray(bg_mask, dtype=bool)])
    ix = ix[ix >= 0]
    if exclude is not None and len(exclude):
        ix = np.setdiff1d(ix, exclude, assume_unique=False)
    return ix.astype(np.int64)


def reproject(masks: MaskSet, view) -> ReprojectedGroups:
    groups, stats = reproject_mask_groups(masks, view)
    if groups:
        bg = background_mask(masks.masks, *view.shape)
        claimed = np.unique(np.concatenate([ix for _, ix in groups]))
        bg_idx = reproject_background(bg, view, claimed)
    else:
        # without any foreground mask the complement is the whole view: uninformative
        bg_idx = np.zeros(0, dtype=np.int64)
        stats["bg_skipped"] = "no foreground masks"
    stats["group_sizes"] = {c: int(ix.size) for c, ix in groups}
    stats["bg_size"] = int(bg_idx.size)
    return ReprojectedGroups(groups, bg_idx, stats)


def merge_views(per_view):
    """Union per-view groups by class; earlier views keep contested points."""
    if len(per_view) == 1:
        return per_view[0]
    taken = np.zeros(0, dtype=np.int64)
    merged = {}
    for rg in per_view:
        for c, ix in rg.fg_groups:
            new = np.setdiff1d(ix, taken)
            merged[c] = np.union1d(merged.get(c, np.zeros(0, np.int64)), new)
            taken = np.union1d(taken, new)
    bg = np.zeros(0, dtype=np.int64)
    for rg in per_view:
        bg = np.union1d(bg, rg.bg_indices)
    bg = np.setdiff1d(bg, taken)
    groups = [(c, merged[c].astype(np.int64)) for c in sorted(merged) if merged[c].size]
    stats = {"views": len(per_view), "group_sizes": {c: int(ix.size) for c, ix in groups},
             "bg_size": int(bg.size)}
    return ReprojectedGroups(groups, bg.astype(np.int64), stats)


def subsample_groups(groups, cap, rng):
    """At most ``cap`` indices per group, uniformly chosen and kept sorted."""
    out = []
    for ix in groups:
        ix = np.asarray(ix, dtype=np.int64)
        if ix.size > cap:
            ix = np.sort(rng.choice(ix, size=cap, replace=False))
        out.append(ix)
    return out


def gather_group_embeddings(pred, groups: ReprojectedGroups, cap=64, rng=None):
    """Embedding rows per (subsampled) foreground group and logits rows of the background set.

    Returns ``(fg_features, fg_indices, bg_logits)``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    n = pred.num_points
    idx = subsample_groups(groups.fg_indices(), cap, rng)
    for ix in idx + [groups.bg_indices]:
        if ix.size and (ix.min() < 0 or ix.max() >= n):
            raise IndexError("group index outside the prediction")
    feats = [pred.embedding[ix] for ix in idx]
    return feats, idx, pred.logits[groups.bg_indices]


def mask_guidance(pred, scan, views, oracle, tau=0.6, prompt_mode="cpg", union_views=True):
    """Prompts -> oracle masks -> 3D groups for one scan.

    Returns ``(prompts, [MaskSet per view], [ReprojectedGroups per view or merged])``.
    """
    cams = [v.camera for v in views]
    if prompt_mode == "cpg":
        prompts = generate_prompts_cpg(pred.logits, pred.confidence, scan, cams, tau)
    elif prompt_mode == "agg":
        prompts = generate_prompts_agg(pred.logits, scan, cams)
    else:
        raise ValueError(f"unknown prompt mode {prompt_mode!r}")
    masksets, per_view = [], []
    for view in views:
        ps = prompts.for_view(view.view_id)
        ms = oracle.segment_all(view, ps) if ps else MaskSet(view.view_id, view.shape)
        masksets.append(ms)
        per_view.append(reproject(ms, view))
    groups = [merge_views(per_view)] if union_views else per_view
    return prompts, masksets, groups


def group_purity(groups: ReprojectedGroups, scan):
    """Fraction of each group's points whose instance id matches the group class; bg vs class 0."""
    rows = []
    for c, ix in groups.fg_groups:
        pure = float(np.mean(scan.instance_ids[ix] == c)) if ix.size else float("nan")
        rows.append((c, int(ix.size), pure))
    bg = groups.bg_indices
    bg_pure = float(np.mean(scan.class_labels[bg] == 0)) if bg.size else float("nan")
    rows.append((0, int(bg.size), bg_pure))
    return rows
