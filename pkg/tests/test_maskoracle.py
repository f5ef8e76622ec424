import json
import sys
import textwrap

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsetooth.camera import reproject_pixels
from sparsetooth.maskoracle import (TIMEOUT_ENV, ExternalOracle, GroundTruthOracle, MaskSet,
                                    OracleError, OracleNoiseConfig, background_mask,
                                    gt_oracle_segment)
from sparsetooth.pnm import read_pnm
from sparsetooth.prompter import Prompt, generate_prompts_agg

from conftest import perfect_logits

ECHO = textwrap.dedent("""\
    import json, sys
    from pathlib import Path
    wd = Path(sys.argv[1])
    data = wd.joinpath("view.ppm").read_bytes()
    parts = data.split(maxsplit=4)
    w, h = int(parts[1]), int(parts[2])
    mode = {mode!r}
    for p in json.loads(wd.joinpath("prompts.json").read_text()):
        if mode == "skip_first" and p["id"] == 1:
            continue
        if mode == "bad_size":
            w = w + 1
        img = bytearray(w * h)
        for r in range(max(0, p["v"] - 2), min(h, p["v"] + 3)):
            for c in range(max(0, p["u"] - 2), min(w, p["u"] + 3)):
                img[r * w + c] = 255
        out = wd / f"mask_{{p['id']}}.pgm"
        if mode == "garbage":
            out.write_bytes(b"hello")
        else:
            out.write_bytes(f"P5\\n{{w}} {{h}}\\n255\\n".encode() + bytes(img))
    if mode == "fail":
        sys.exit(3)
""")


def _script(tmp_path, mode="ok"):
    path = tmp_path / f"echo_{mode}.py"
    path.write_text(ECHO.format(mode=mode))
    return [sys.executable, str(path)]


@settings(max_examples=1000, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 6), st.integers(0, 2**31))
def test_background_partition(h, w, n, seed):
    rng = np.random.default_rng(seed)
    masks = [rng.random((h, w)) < rng.random() for _ in range(n)]
    bg = background_mask(masks, h, w)
    union = np.zeros((h, w), dtype=bool)
    for m in masks:
        union |= m
        assert not (bg & m).any()
    assert (bg | union).all()


def test_background_edge_cases():
    assert background_mask([], 3, 4).all()
    assert not background_mask([np.ones((3, 4), bool)], 3, 4).any()
    with pytest.raises(ValueError):
        background_mask([np.ones((2, 2), bool)], 3, 4)


def test_gt_oracle_returns_tooth_footprint(default_scan, default_view):
    cams = [default_view.camera]
    ps = generate_prompts_agg(perfect_logits(default_scan), default_scan, cams)
    for p in ps.prompts:
        mask = gt_oracle_segment(default_view, (p.u, p.v))
        assert np.array_equal(mask, default_view.instance_image == p.class_id)
        idx = reproject_pixels(np.argwhere(mask), default_view)
        assert (default_scan.instance_ids[idx] == p.class_id).all()


def test_gt_oracle_empty_region(default_view):
    assert not gt_oracle_segment(default_view, (0, 0)).any()
    with pytest.raises(IndexError):
        gt_oracle_segment(default_view, (500, 0))


def test_noise_monotone(default_view):
    p = (64, 20)
    clean = gt_oracle_segment(default_view, p)
    if not clean.any():
        p = tuple(np.argwhere(default_view.instance_image == 5)[0][::-1])
        clean = gt_oracle_segment(default_view, p)
    dil = gt_oracle_segment(default_view, p, OracleNoiseConfig(dilate_px=2))
    ero = gt_oracle_segment(default_view, p, OracleNoiseConfig(erode_px=1))
    assert (dil >= clean).all() and dil.sum() > clean.sum()
    assert (ero <= clean).all() and ero.sum() < clean.sum()
    a = gt_oracle_segment(default_view, p, OracleNoiseConfig(flip_prob=0.1, seed=3))
    b = gt_oracle_segment(default_view, p, OracleNoiseConfig(flip_prob=0.1, seed=3))
    assert np.array_equal(a, b) and not np.array_equal(a, clean)


def test_noise_config_validation():
    with pytest.raises(ValueError):
        OracleNoiseConfig(dilate_px=-1)
    with pytest.raises(ValueError):
        OracleNoiseConfig(flip_prob=1.0)


def test_maskset_shape_check():
    ms = MaskSet(0, (4, 4))
    with pytest.raises(OracleError):
        ms.add(1, np.zeros((3, 4)), (0, 0))


def test_gt_oracle_counts_calls(default_view):
    o = GroundTruthOracle()
    ms = o.segment_all(default_view, [Prompt(10, 10, 1), Prompt(20, 20, 2)])
    assert o.calls == 2 and len(ms.masks) == 2


def _prompts():
    return [Prompt(10, 12, 1), Prompt(40, 50, 2)]


def test_external_echo_roundtrip(tmp_path, default_view):
    oracle = ExternalOracle(_script(tmp_path), workdir=tmp_path / "wd")
    ms = oracle.segment_all(default_view, _prompts())
    assert not ms.incidents
    m1 = ms.masks[0][1]
    assert m1.sum() == 25 and m1[12, 10] and not m1[12, 13]
    payload = json.loads((tmp_path / "wd" / "prompts.json").read_text())
    assert payload == [{"id": 1, "u": 10, "v": 12}, {"id": 2, "u": 40, "v": 50}]
    assert read_pnm(tmp_path / "wd" / "view.ppm").shape == (128, 128, 3)


def test_external_missing_output(tmp_path, default_view):
    ms = ExternalOracle(_script(tmp_path, "skip_first")).segment_all(default_view, _prompts())
    assert not ms.masks[0][1].any() and ms.masks[1][1].any()
    assert any("missing" in s for s in ms.incidents)


def test_external_dimension_mismatch(tmp_path, default_view):
    ms = ExternalOracle(_script(tmp_path, "bad_size")).segment_all(default_view, _prompts())
    assert any("mask_1.pgm" in s and "dimension" in s for s in ms.incidents)
    with pytest.raises(OracleError, match="mask_1.pgm"):
        ExternalOracle(_script(tmp_path, "bad_size"), strict=True).segment_all(default_view, _prompts())


def test_external_garbage_and_failure(tmp_path, default_view):
    ms = ExternalOracle(_script(tmp_path, "garbage")).segment_all(default_view, _prompts())
    assert len(ms.incidents) == 2 and not any(m.any() for _, m, _ in ms.masks)
    ms = ExternalOracle(_script(tmp_path, "fail")).segment_all(default_view, _prompts())
    assert any("exited with 3" in s for s in ms.incidents)
    assert not any(m.any() for _, m, _ in ms.masks)


def test_external_timeout(tmp_path, default_view, monkeypatch):
    slow = tmp_path / "slow.py"
    slow.write_text("import time; time.sleep(5)\n")
    monkeypatch.setenv(TIMEOUT_ENV, "0.5")
    oracle = ExternalOracle([sys.executable, str(slow)])
    assert oracle.timeout == 0.5
    ms = oracle.segment_all(default_view, _prompts())
    assert any("timed out" in s for s in ms.incidents)
