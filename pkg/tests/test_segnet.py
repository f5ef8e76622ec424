import numpy as np
import pytest

from sparsetooth.segnet import (CheckpointError, NetDims, NetworkParams, NumericError, UsageError,
                                backward, forward, init_params, load_params, prepare, save_params,
                                zeros_like)
from sparsetooth.synthgen import JawConfig, generate_jaw

SMALL = NetDims(hidden=16, conf_hidden=8, embed=8, num_classes=5, k_neighbors=6)


def test_zero_params_give_uniform_outputs(small_scan):
    p = zeros_like(init_params(SMALL, 0))
    pred = forward(small_scan, p)
    assert np.array_equal(pred.logits, np.zeros_like(pred.logits))
    assert np.allclose(pred.confidence, 0.5)


def test_init_deterministic_and_bounded():
    a, b = init_params(NetDims(), 3), init_params(NetDims(), 3)
    assert a.equals(b)
    assert not a.equals(init_params(NetDims(), 4))
    for name, fi, fo in NetDims().layer_shapes():
        assert a[f"{name}.W"].shape == (fi, fo)
        assert np.abs(a[f"{name}.W"]).max() <= np.sqrt(6 / (fi + fo))


def test_init_posteriors_near_uniform(default_scan):
    pred = forward(default_scan, init_params(NetDims(), 0))
    z = pred.logits - pred.logits.max(axis=1, keepdims=True)
    prob = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    assert prob.max() < 0.5


def test_permutation_equivariance(small_scan):
    p = init_params(SMALL, 1)
    perm = np.random.default_rng(0).permutation(small_scan.num_points)
    from sparsetooth.synthgen import LabeledScan
    s2 = LabeledScan(small_scan.positions[perm], small_scan.class_labels[perm],
                     small_scan.instance_ids[perm], small_scan.num_classes,
                     None if small_scan.normals is None else small_scan.normals[perm])
    a, b = forward(small_scan, p), forward(s2, p)
    assert np.allclose(a.logits[perm], b.logits, atol=1e-12)
    assert np.allclose(a.confidence[perm], b.confidence, atol=1e-12)
    assert np.allclose(a.embedding[perm], b.embedding, atol=1e-12)


@pytest.mark.parametrize("seed", range(100))
def test_fuzz_outputs_finite(seed):
    scan = generate_jaw(JawConfig(num_teeth=4, points_per_tooth=10, gingiva_points=20,
                                  arch_radius=12.0, seed=seed))
    pred = forward(scan, init_params(SMALL, seed))
    for arr in (pred.logits, pred.confidence, pred.embedding):
        assert np.isfinite(arr).all()
    assert ((pred.confidence > 0) & (pred.confidence < 1)).all()


def test_nan_params_rejected(small_scan):
    p = init_params(SMALL, 0)
    p.tensors["enc2.W"][0, 0] = np.nan
    with pytest.raises(NumericError):
        forward(small_scan, p)


def test_backward_needs_cache(small_scan):
    p = init_params(SMALL, 0)
    pred = forward(small_scan, p, keep_cache=False)
    with pytest.raises(UsageError):
        backward(pred, p, dlogits=np.ones_like(pred.logits))


def test_sum_logits_bias_gradient(small_scan):
    p = init_params(SMALL, 0)
    pred = forward(small_scan, p)
    g = backward(pred, p, dlogits=np.ones_like(pred.logits))
    assert np.array_equal(g["seg.b"], np.full(SMALL.num_classes, float(small_scan.num_points)))


def test_zero_upstream_zero_gradient(small_scan):
    p = init_params(SMALL, 0)
    pred = forward(small_scan, p)
    g = backward(pred, p)
    assert all(not np.any(g[k]) for k in g.names())


def test_backward_matches_finite_difference_on_linear_functional(small_scan):
    p = init_params(SMALL, 2)
    geo = prepare(small_scan, SMALL.k_neighbors)
    rng = np.random.default_rng(0)
    pred = forward(geo, p)
    wl, wc, we = (rng.normal(size=pred.logits.shape), rng.normal(size=pred.confidence.shape),
                  rng.normal(size=pred.embedding.shape))

    def f(q):
        pr = forward(geo, q, keep_cache=False)
        return np.sum(wl * pr.logits) + np.sum(wc * pr.confidence) + np.sum(we * pr.embedding)

    g = backward(pred, p, wl, wc, we)
    h = 1e-6
    for name in ("enc1.W", "mix.b", "conf1.W", "proj2.W", "seg.W"):
        q1, q2 = p.copy(), p.copy()
        q1.tensors[name].flat[0] += h
        q2.tensors[name].flat[0] -= h
        fd = (f(q1) - f(q2)) / (2 * h)
        assert g[name].flat[0] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_checkpoint_roundtrip(tmp_path):
    p = init_params(SMALL, 5)
    save_params(p, tmp_path / "a.wsnn")
    q = load_params(tmp_path / "a.wsnn")
    assert q.dims == SMALL and q.equals(p)
    assert (tmp_path / "a.wsnn").read_bytes()[:4] == b"WSNN"


def test_checkpoint_errors(tmp_path):
    p = init_params(SMALL, 5)
    path = tmp_path / "a.wsnn"
    save_params(p, path)
    data = path.read_bytes()
    (tmp_path / "t.wsnn").write_bytes(data[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_params(tmp_path / "t.wsnn")
    (tmp_path / "m.wsnn").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_params(tmp_path / "m.wsnn")
    (tmp_path / "v.wsnn").write_bytes(data[:4] + b"\x07" + data[5:])
    with pytest.raises(CheckpointError, match="version"):
        load_params(tmp_path / "v.wsnn")
    (tmp_path / "x.wsnn").write_bytes(data + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_params(tmp_path / "x.wsnn")


def test_num_parameters():
    p = init_params(SMALL, 0)
    expected = sum(fi * fo + fo for _, fi, fo in SMALL.layer_shapes())
    assert p.num_parameters() == expected
    assert isinstance(p.copy(), NetworkParams)
