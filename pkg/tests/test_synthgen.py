import numpy as np
import pytest

from sparsetooth.synthgen import (ConfigError, DataError, JawConfig, LabeledScan, ScanFormatError,
                                  UnsupportedVersionError, generate_dataset, generate_jaw,
                                  load_dataset, load_scan, sample_sparse_labels, save_dataset,
                                  save_scan)


def test_default_counts_and_classes(default_scan):
    assert default_scan.num_points == 2000
    assert set(np.unique(default_scan.class_labels)) == set(range(15))
    assert np.array_equal(default_scan.instance_ids == 0, default_scan.class_labels == 0)


def test_generation_is_deterministic():
    a = generate_jaw(JawConfig(seed=7))
    b = generate_jaw(JawConfig(seed=7))
    assert a.equals(b)
    assert a.positions.tobytes() == b.positions.tobytes()


def test_different_seeds_differ():
    a = generate_jaw(JawConfig(seed=7))
    b = generate_jaw(JawConfig(seed=8))
    assert np.any(a.positions != b.positions)


@pytest.mark.parametrize("seed", range(5))
def test_teeth_are_separated(seed):
    cfg = JawConfig(seed=seed, jitter_sigma=0.0)
    scan = generate_jaw(cfg)
    cents = scan.tooth_centroids()
    d = np.linalg.norm(cents[:, None] - cents[None], axis=2)
    np.fill_diagonal(d, np.inf)
    # centroids sit slightly above the center, so allow the vertical offset
    assert d.min() > 2 * max(cfg.tooth_scale) * (1 - cfg.size_jitter) * 0.9


def test_gingiva_sits_below_teeth(default_scan):
    z = default_scan.positions[:, 2]
    assert np.median(z[default_scan.class_labels == 0]) < np.median(z[default_scan.class_labels > 0])


@pytest.mark.parametrize("bad", [
    dict(num_teeth=0), dict(points_per_tooth=0), dict(gingiva_points=0),
    dict(jitter_sigma=-1.0), dict(tooth_scale=(5.0, 5.0, 5.0)),
])
def test_invalid_config(bad):
    with pytest.raises(ConfigError):
        generate_jaw(JawConfig(**bad))


def test_sparse_labels_one_per_tooth(default_scan):
    m = sample_sparse_labels(default_scan, 1, seed=0)
    assert len(m) == 14
    assert sorted(default_scan.class_labels[m.labeled_indices]) == list(range(1, 15))
    assert len(m) / default_scan.num_points == pytest.approx(0.007)


def test_sparse_labels_two_per_tooth(default_scan):
    m = sample_sparse_labels(default_scan, 2, seed=0)
    assert len(m) == 28
    assert np.all(np.bincount(default_scan.class_labels[m.labeled_indices], minlength=15)[1:] == 2)
    assert not np.any(default_scan.class_labels[m.labeled_indices] == 0)


def test_sparse_labels_deterministic_and_background_option(default_scan):
    a = sample_sparse_labels(default_scan, 1, seed=4)
    b = sample_sparse_labels(default_scan, 1, seed=4)
    assert np.array_equal(a.labeled_indices, b.labeled_indices)
    c = sample_sparse_labels(default_scan, 1, seed=4, include_background=True)
    assert 0 in default_scan.class_labels[c.labeled_indices]


def test_sparse_labels_too_few_points(small_scan):
    with pytest.raises(DataError):
        sample_sparse_labels(small_scan, 13, seed=0)


def test_roundtrip(tmp_path, default_scan):
    p = tmp_path / "s.ws3d"
    save_scan(default_scan, p)
    back = load_scan(p)
    assert back.equals(default_scan)
    assert back.positions.tobytes() == default_scan.positions.tobytes()


def test_roundtrip_without_normals(tmp_path, small_scan):
    small_scan.normals = None
    save_scan(small_scan, tmp_path / "s.ws3d")
    assert load_scan(tmp_path / "s.ws3d").normals is None


def test_truncated_file(tmp_path, default_scan):
    p = tmp_path / "s.ws3d"
    save_scan(default_scan, p)
    data = p.read_bytes()
    p.write_bytes(data[:-10])
    with pytest.raises(ScanFormatError) as err:
        load_scan(p)
    assert err.value.offset > 0
    p.write_bytes(data[:5])
    with pytest.raises(ScanFormatError):
        load_scan(p)


def test_version_mismatch(tmp_path, default_scan):
    p = tmp_path / "s.ws3d"
    save_scan(default_scan, p)
    data = bytearray(p.read_bytes())
    data[4] = 9
    p.write_bytes(bytes(data))
    with pytest.raises(UnsupportedVersionError, match="version 9"):
        load_scan(p)


def test_bad_magic(tmp_path, default_scan):
    p = tmp_path / "s.ws3d"
    save_scan(default_scan, p)
    p.write_bytes(b"XXXX" + p.read_bytes()[4:])
    with pytest.raises(ScanFormatError, match="magic"):
        load_scan(p)


def test_dataset_roundtrip(tmp_path):
    scans = generate_dataset(JawConfig(), 3, seed=1)
    save_dataset(scans, tmp_path)
    back = load_dataset(tmp_path)
    assert all(a.equals(b) for a, b in zip(scans, back))
    assert not scans[0].equals(scans[1])


def test_validate_rejects_inconsistent_instances(small_scan):
    bad = LabeledScan(small_scan.positions, small_scan.class_labels,
                      np.ones_like(small_scan.instance_ids), small_scan.num_classes)
    with pytest.raises(DataError):
        bad.validate()
