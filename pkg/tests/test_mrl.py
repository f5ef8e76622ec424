import numpy as np
import pytest

from sparsetooth.camera import default_cameras, render
from sparsetooth.maskoracle import GroundTruthOracle, MaskSet
from sparsetooth.mrl import (ReprojectedGroups, gather_group_embeddings, group_purity,
                             mask_guidance, reproject, reproject_background,
                             reproject_mask_groups, subsample_groups)
from sparsetooth.segnet import NetDims, forward, init_params
from sparsetooth.synthgen import JawConfig, generate_jaw

from conftest import perfect_logits


class _Pred:
    def __init__(self, logits, conf):
        self.logits, self.confidence = logits, conf


def _guidance(scan, views=1, union=True):
    cams = default_cameras(scan, views)
    vs = [render(scan, c, 1, view_id=i) for i, c in enumerate(cams)]
    pred = _Pred(perfect_logits(scan), np.full(scan.num_points, 0.99))
    return vs, mask_guidance(pred, scan, vs, GroundTruthOracle(), union_views=union)


@pytest.mark.parametrize("seed", range(3))
def test_zero_noise_purity(seed):
    scan = generate_jaw(JawConfig(seed=seed))
    _, (prompts, masks, groups) = _guidance(scan)
    g = groups[0]
    assert len(g.fg_groups) == 14
    for c, ix in g.fg_groups:
        assert (scan.instance_ids[ix] == c).all()
    assert g.bg_indices.size > 0
    assert (scan.class_labels[g.bg_indices] == 0).all()
    rows = group_purity(g, scan)
    assert all(r[2] == 1.0 for r in rows)


def test_groups_disjoint_with_overlapping_masks(default_view):
    H, W = default_view.shape
    a = default_view.instance_image == 3
    b = a | (default_view.instance_image == 4)
    ms = MaskSet(0, (H, W))
    pa = np.argwhere(a).mean(axis=0).round().astype(int)
    pb = np.argwhere(default_view.instance_image == 4).mean(axis=0).round().astype(int)
    ms.add(3, a, (pa[1], pa[0]))
    ms.add(4, b, (pb[1], pb[0]))
    rg = reproject(ms, default_view)
    g3, g4 = dict(rg.fg_groups)[3], dict(rg.fg_groups)[4]
    assert np.intersect1d(g3, g4).size == 0
    assert rg.stats["multiply_claimed"] > 0
    # contested tooth-3 points stay with the prompt placed on tooth 3
    assert (default_view_scan_ids(default_view, g3) == 3).all()
    assert np.intersect1d(rg.bg_indices, np.union1d(g3, g4)).size == 0


def default_view_scan_ids(view, ix):
    ids = {}
    set_ = view.point_index >= 0
    for i, inst in zip(view.point_index[set_], view.instance_image[set_]):
        ids[int(i)] = int(inst)
    return np.array([ids[int(i)] for i in ix])


def test_empty_masks_dropped(default_view):
    H, W = default_view.shape
    ms = MaskSet(0, (H, W))
    ms.add(1, np.zeros((H, W), bool), (0, 0))
    groups, stats = reproject_mask_groups(ms, default_view)
    assert groups == [] and stats["empty_masks"] == [1]
    rg = reproject(ms, default_view)
    assert rg.bg_indices.size == 0


def test_mask_over_empty_pixels_gives_no_group(default_view):
    H, W = default_view.shape
    m = default_view.point_index < 0
    ms = MaskSet(0, (H, W))
    ms.add(2, m, (0, 0))
    groups, _ = reproject_mask_groups(ms, default_view)
    assert groups == []


def test_reproject_background_cases(default_view):
    H, W = default_view.shape
    visible = np.unique(default_view.point_index[default_view.point_index >= 0])
    assert np.array_equal(reproject_background(np.ones((H, W), bool), default_view), visible)
    assert reproject_background(np.zeros((H, W), bool), default_view).size == 0
    excl = visible[:10]
    assert np.array_equal(reproject_background(np.ones((H, W), bool), default_view, excl), visible[10:])


def test_subsample_cap_and_determinism():
    groups = [np.arange(100), np.arange(5)]
    a = subsample_groups(groups, 64, np.random.default_rng(0))
    b = subsample_groups(groups, 64, np.random.default_rng(0))
    assert [x.size for x in a] == [64, 5]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert np.all(np.diff(a[0]) > 0)


def test_gather_matches_forward(default_scan):
    p = init_params(NetDims(), 0)
    pred = forward(default_scan, p)
    rg = ReprojectedGroups([(1, np.array([4])), (2, np.arange(10, 200))], np.array([0, 1, 2]))
    feats, idx, bg = gather_group_embeddings(pred, rg, cap=64, rng=np.random.default_rng(1))
    assert feats[0].shape == (1, 32) and feats[1].shape == (64, 32)
    assert np.array_equal(feats[1], pred.embedding[idx[1]])
    assert np.array_equal(bg, pred.logits[[0, 1, 2]])
    with pytest.raises(IndexError):
        gather_group_embeddings(pred, ReprojectedGroups([(1, np.array([10**6]))]), 64)


def test_multi_view_union_and_per_view(default_scan):
    _, (_, masks, merged) = _guidance(default_scan, views=3, union=True)
    assert len(masks) == 3 and len(merged) == 1
    _, (_, _, per_view) = _guidance(default_scan, views=3, union=False)
    assert len(per_view) == 3
    m = merged[0]
    for c, ix in m.fg_groups:
        assert (default_scan.instance_ids[ix] == c).all()
        for pv in per_view:
            sub = dict(pv.fg_groups).get(c)
            if sub is not None:
                assert np.isin(sub, ix).all()
    assert (default_scan.class_labels[m.bg_indices] == 0).all()


def test_guidance_deterministic(default_scan):
    _, (_, _, a) = _guidance(default_scan)
    _, (_, _, b) = _guidance(default_scan)
    assert all(np.array_equal(x, y) for x, y in zip(a[0].fg_indices(), b[0].fg_indices()))
    assert np.array_equal(a[0].bg_indices, b[0].bg_indices)
