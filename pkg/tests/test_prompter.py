import numpy as np

from sparsetooth.camera import Camera, default_cameras, project_points, to_pixel
from sparsetooth.prompter import (DROP_BEHIND, DROP_EMPTY, DROP_OUT_OF_BOUNDS, Prompt, PromptSet,
                                  centroid_distances, filter_confident, generate_prompts,
                                  generate_prompts_agg, generate_prompts_cpg, partition_subgroups)
from sparsetooth.trainer import PlantedOutliers, apply_planted, planted_outliers

from conftest import perfect_logits


def test_partition_excludes_background():
    logits = np.array([[5, 0, 0], [0, 5, 0], [0, 0, 5], [0, 5, 0]], dtype=float)
    groups = partition_subgroups(logits)
    assert sorted(groups) == [1, 2]
    assert groups[1].tolist() == [1, 3] and groups[2].tolist() == [2]


def test_filter_is_strict():
    conf = np.array([0.6, 0.61, 0.2, 0.9])
    assert filter_confident([0, 1, 2, 3], conf, 0.6).tolist() == [1, 3]


def test_single_point_subgroup_prompt_at_its_projection(default_scan):
    cam = default_cameras(default_scan, 1)[0]
    i = int(np.flatnonzero(default_scan.class_labels == 3)[0])
    ps = generate_prompts({3: np.array([i])}, default_scan, [cam])
    u, v, _, _ = project_points(default_scan.positions[i].astype(float), cam)
    row, col = to_pixel(u[0], v[0])
    assert ps.prompts == [Prompt(col, row, 3, 0)]


def test_all_filtered_subgroup_is_dropped(default_scan):
    cams = default_cameras(default_scan, 1)
    logits = perfect_logits(default_scan)
    conf = np.full(default_scan.num_points, 0.9)
    conf[default_scan.class_labels == 2] = 0.3
    ps = generate_prompts_cpg(logits, conf, default_scan, cams, tau=0.6)
    assert 2 not in {p.class_id for p in ps.prompts}
    assert (2, DROP_EMPTY, 0) in ps.dropped
    assert len(ps.prompts) == 13


def test_out_of_bounds_and_behind(small_scan):
    far = Camera.from_params(1, 1, 1000, 1000, image_size=(4, 4))
    T = np.diag([1.0, 1.0, -1.0, 1.0])
    T[0, 0] = -1.0
    T[2, 3] = -100.0  # everything ends up behind
    behind = Camera(np.eye(3), T, (4, 4))
    groups = partition_subgroups(perfect_logits(small_scan))
    T2 = np.eye(4)
    T2[2, 3] = 100.0
    ps = generate_prompts(groups, small_scan, [Camera(far.intrinsics, T2, (4, 4)), behind])
    reasons = {(r, v) for _, r, v in ps.dropped}
    assert (DROP_OUT_OF_BOUNDS, 0) in reasons and (DROP_BEHIND, 1) in reasons
    assert not ps.prompts


def test_cpg_equals_agg_when_all_confident(default_scan):
    cams = default_cameras(default_scan, 1)
    logits = perfect_logits(default_scan)
    conf = np.full(default_scan.num_points, 0.99)
    a = generate_prompts_cpg(logits, conf, default_scan, cams)
    b = generate_prompts_agg(logits, default_scan, cams)
    assert a.prompts == b.prompts


def test_prompts_deterministic(default_scan):
    cams = default_cameras(default_scan, 2)
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(default_scan.num_points, 15))
    conf = rng.random(default_scan.num_points)
    assert generate_prompts_cpg(logits, conf, default_scan, cams).prompts == \
        generate_prompts_cpg(logits, conf, default_scan, cams).prompts


def test_multi_view_prompts(default_scan):
    cams = default_cameras(default_scan, 3)
    ps = generate_prompts_agg(perfect_logits(default_scan), default_scan, cams)
    assert {p.view_id for p in ps.prompts} == {0, 1, 2}
    assert len(ps.for_view(1)) == 14


def test_table_roundtrip():
    ps = PromptSet([Prompt(3, 4, 1, 0), Prompt(10, 2, 5, 1)])
    assert PromptSet.from_table(ps.to_table()).prompts == ps.prompts
    assert ps.to_json(1) == '[{"id": 5, "u": 10, "v": 2}]'


def test_planted_outliers_displace_agg_more(default_scan):
    cams = default_cameras(default_scan, 1)
    logits = perfect_logits(default_scan)
    conf = np.full(default_scan.num_points, 0.95)
    planted = planted_outliers(default_scan, PlantedOutliers(fraction=0.3, seed=1))
    assert planted
    lg, cf = apply_planted(logits, conf, planted, 0.2)
    d_cpg = centroid_distances(generate_prompts_cpg(lg, cf, default_scan, cams), default_scan, cams)
    d_agg = centroid_distances(generate_prompts_agg(lg, default_scan, cams), default_scan, cams)
    assert d_cpg.mean() < d_agg.mean()
    assert d_cpg.max() < 1.0
