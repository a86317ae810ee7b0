import json
import math

import numpy as np
import pytest

import blockprop as bp


def test_conv2d_identity_kernel():
    x = np.arange(2 * 5 * 6, dtype=np.float32).reshape(1, 2, 5, 6)
    w = np.zeros((2, 2, 3, 3), dtype=np.float32)
    w[0, 0, 1, 1] = 1.0
    w[1, 1, 1, 1] = 2.0
    y = bp.conv2d(x, w, np.array([0.0, 1.0], dtype=np.float32), stride=1, pad=1)
    assert y.shape == (1, 2, 5, 6)
    np.testing.assert_array_equal(y[0, 0], x[0, 0])
    np.testing.assert_array_equal(y[0, 1], 2 * x[0, 1] + 1)


def test_detection_ig_moved_box():
    ig = bp.ig_detection([(5, 0, 15, 10, 0.9, 0)], [(0, 0, 10, 10, 0.8, 0)], 10, 20)
    assert ig.shape == (1, 1, 10, 20)
    assert ig[0, 0, 5, 7] == pytest.approx(0.6, abs=1e-6)
    assert ig[0, 0, 5, 2] == pytest.approx(0.8 * 2 / 3, abs=1e-6)
    assert ig[0, 0, 5, 17] == 0.0
    pooled = bp.block_maxpool(np.ascontiguousarray(ig[:, :, :, :]), 10)
    assert pooled.shape == (1, 1, 1, 2)


def test_kl_closed_form():
    curr = np.array([1.0, 0.0], dtype=np.float32).reshape(1, 2, 1, 1)
    prev = np.array([0.5, 0.5], dtype=np.float32).reshape(1, 2, 1, 1)
    assert bp.ig_semseg(curr, prev)[0, 0, 0, 0] == pytest.approx(math.log(2), abs=1e-6)
    assert not bp.ig_semseg(prev, prev).any()


def test_reinforce_loss_single_block():
    loss, grad = bp.reinforce_loss(np.full((1, 1, 1, 1), 0.7, np.float32), np.ones((1, 1), np.uint8),
                                   np.full((1, 1, 1, 1), 0.5, np.float32))
    assert loss == pytest.approx(-0.5 * math.log(0.7), rel=1e-6)
    # d/dz of -R log sigmoid(z) is -R (1 - p)
    assert grad[0, 0, 0, 0] == pytest.approx(-0.5 * 0.3, rel=1e-5)


def test_oracle_on_generated_clip():
    clip = bp.generate_clip(seed=4, frames=5)
    assert len(clip) == 5
    frame = clip.frames[0]
    assert frame.shape == (1, 3, 64, 128)
    dets = bp.oracle_detect(frame)
    gt = clip.ground_truth[0]
    assert len(dets) >= 1
    assert {d[5] for d in dets} <= {g[5] for g in gt}
    seg = bp.oracle_segment(frame)
    np.testing.assert_allclose(seg.sum(axis=1), 1.0, atol=1e-6)


def test_config_round_trip_and_errors():
    cfg = bp.RunConfig.parse("tau = 0.4\ntask = oracle-seg\n")
    assert cfg.tau == pytest.approx(0.4)
    assert cfg.task == "oracle-seg"
    again = bp.RunConfig.parse(str(cfg))
    assert str(again) == str(cfg)
    with pytest.raises(bp.Error, match="update period"):
        bp.RunConfig.parse("update_period = 0\n").validate()
    with pytest.raises(bp.Error):
        cfg.set("block_size", "abc")


def test_pipeline_protocol_and_determinism():
    cfg = bp.RunConfig()
    cfg.frames = 6
    cfg.tau = 0.3
    clip = bp.generate_clip(seed=2, frames=6)
    out = bp.Pipeline(cfg).run_clip(clip)
    recs = out["records"]
    assert [r["frame"] for r in recs] == list(range(6))
    assert recs[0]["executed_fraction"] == 1.0 and recs[0]["loss"] is None
    assert all(r["loss"] is not None for r in recs[1:])
    assert out["actions"][0].shape == (4, 8)

    full = bp.Pipeline(cfg).run_clip(clip, forced_fraction=1.0)["records"]
    assert all(r["executed_fraction"] == 1.0 for r in full)

    a, b = bp.Pipeline(cfg), bp.Pipeline(cfg)
    a.warmup(2)
    b.warmup(2)
    ja, jb = a.evaluate_jsonl(2), b.evaluate_jsonl(2)
    assert ja == jb
    lines = [json.loads(x) for x in ja.splitlines()]
    assert len(lines) == 12 and all(x["schema"] == 1 for x in lines)


def test_mismatched_frames_raise():
    cfg = bp.RunConfig()
    with pytest.raises(bp.Error, match="config expects"):
        p = bp.Pipeline(cfg)
        p.run_clip(bp.generate_clip(seed=1, width=64, height=64, frames=3))


def test_spearman():
    assert bp.spearman([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
    assert bp.spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
