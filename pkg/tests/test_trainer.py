import math

import numpy as np
import pytest
import torch

from dpc import datakit as dk
from dpc import trainer as tr
from dpc.geometry import Pose, axis_rotation
from dpc.imaging import Intrinsics


@pytest.fixture(scope="module")
def small_seq():
    motion = dk.circle_motion(2 * math.pi * 12, 40, 9 / 40, 1)
    cfg = dk.SyntheticSceneConfig(seed=3, height=48, width=64, depth_model="room", motion=motion,
                                  start_pose=dk.circle_start(12, 1), texel=0.25, texture_sigmas=(4.0, 12.0),
                                  vo_bias=dk.yaw_bias(0.3))
    s = dk.generate_synthetic(cfg)
    return tr.prepare_sequence("s", s.images, s.intrinsics, s.vo_relatives, (48, 64), s.gt_relatives)


def moved(t, deg=0.0):
    return axis_rotation("y", math.radians(deg)) @ Pose.from_translation((0, 0, t))


def test_build_dataset_thresholds():
    poses = [Pose.identity()]
    for rel in (moved(1.0, 0.2), moved(2.0), moved(1.5), moved(0.1, 0.4), moved(0.1, 0.39)):
        poses.append(poses[-1] @ rel.inverse())
    pairs = tr.build_dataset([("x", len(poses))], {"x": poses})
    assert [p.source for p in pairs] == [1, 2, 3]
    assert all(p.target == p.source + 1 for p in pairs)
    with pytest.raises(ValueError):
        tr.build_dataset([("x", len(poses) + 1)], {"x": poses})


def test_build_dataset_is_stable(small_seq):
    a = tr.build_dataset([small_seq])
    b = tr.build_dataset([small_seq])
    assert [(p.sequence_id, p.source) for p in a] == [(p.sequence_id, p.source) for p in b]
    assert [p.source for p in a] == sorted(p.source for p in a)


def test_leave_one_out():
    assert tr.leave_one_out(["00", "01", "02", "05"], "02", "05") == ["00", "01"]
    with pytest.raises(ValueError):
        tr.leave_one_out(["00"], "00", "00")


def test_adam_first_step_and_zero_grad():
    p = {"w": torch.tensor([0.3, -2.0], dtype=torch.float64)}
    st = tr.init_adam_state(p)
    tr.adam_step(p, {"w": torch.ones(2, dtype=torch.float64)}, st, 1e-3)
    np.testing.assert_allclose(p["w"].numpy(), [0.3 - 1e-3, -2.0 - 1e-3], rtol=0, atol=1e-10)
    q = {"w": torch.tensor([1.0, 2.0], dtype=torch.float64)}
    st = tr.init_adam_state(q)
    for _ in range(3):
        tr.adam_step(q, {"w": torch.zeros(2, dtype=torch.float64)}, st, 1e-3)
    assert q["w"].tolist() == [1.0, 2.0]


def test_adam_decay_only_on_named():
    p = {"a": torch.ones(1, dtype=torch.float64), "b": torch.ones(1, dtype=torch.float64)}
    st = tr.init_adam_state(p)
    zero = {"a": torch.zeros(1, dtype=torch.float64), "b": torch.zeros(1, dtype=torch.float64)}
    tr.adam_step(p, zero, st, 1e-3, weight_decay=0.1, decay={"a"})
    assert p["a"].item() == pytest.approx(1 - 1e-3) and p["b"].item() == 1.0


def test_lr_schedule():
    stereo, mono = tr.TrainConfig.for_mode("stereo"), tr.TrainConfig.for_mode("monocular")
    assert tr.lr_at_epoch(stereo, 8) == pytest.approx(2.5e-4)
    assert tr.lr_at_epoch(mono, 25) == pytest.approx(1.25e-5)
    assert tr.lr_at_epoch(stereo, 0) == 1e-3 and tr.lr_at_epoch(stereo, 3) == 1e-3


def test_config_defaults_and_validation():
    c = tr.TrainConfig()
    assert (c.batch_size, c.max_epochs, c.dropout_p, c.weight_decay) == (32, 30, 0.5, 4e-6)
    with pytest.raises(ValueError):
        tr.TrainConfig(dropout_p=1.0)
    with pytest.raises(ValueError):
        tr.TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        tr.TrainConfig(mode="lidar")


def test_config_file_round_trip(tmp_path):
    c = tr.TrainConfig.for_mode("stereo", batch_size=4, seed=9, rotation_only=False)
    c.loss.gamma_grad = 0.07
    tr.write_config(tmp_path / "c.txt", c)
    text = (tmp_path / "c.txt").read_text()
    assert "loop_trans_thresh" in text and "lambda_exp" in text
    assert tr.read_config(tmp_path / "c.txt") == c


def test_selection_examples():
    assert tr.select_epoch_gradient([0.5, 0.3, 0.4]) == 2
    assert tr.select_epoch_gradient([0.3, 0.3]) == 1
    assert tr.select_epoch_gradient([0.7]) == 1
    assert tr.select_epoch_gradient([None, 0.2]) == 2
    with pytest.raises(ValueError):
        tr.select_epoch_gradient([None, None])
    counts = [40, 75, 122, 98, 122]
    assert tr.select_epoch_loopclosure(counts) == 3


def test_loopclosure_degenerate_warns(caplog):
    with caplog.at_level("WARNING"):
        assert tr.select_epoch_loopclosure([0, 0, 0]) == 1
    assert "no loop closures" in caplog.text


def test_straight_validation_has_no_loops():
    cfg = tr.TrainConfig()
    traj = [Pose.from_translation((0, 0, 2.0 * i)) for i in range(200)]
    assert tr.count_trajectory_loops(traj, cfg) == 0


def test_records_csv(tmp_path):
    recs = [tr.EpochRecord(1, 0.5, None, 3, "a.ckpt"), tr.EpochRecord(2, 0.25, 0.125, 7, "b.ckpt")]
    tr.write_records(tmp_path / "r.csv", recs)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "epoch,val_loss,grad_loss,loop_closures,checkpoint_path"
    back = tr.read_records(tmp_path / "r.csv")
    assert [(r.epoch, r.val_loss, r.grad_loss, r.loop_closures, r.checkpoint_path) for r in back] == [
        (1, 0.5, None, 3, "a.ckpt"), (2, 0.25, 0.125, 7, "b.ckpt")]


def test_prepared_and_pairs_round_trip(tmp_path, small_seq):
    tr.save_prepared(tmp_path / "s.npz", small_seq)
    back = tr.load_prepared(tmp_path / "s.npz")
    assert np.array_equal(back.images, small_seq.images) and np.array_equal(back.flows, small_seq.flows)
    assert back.intrinsics == small_seq.intrinsics
    for a, b in zip(back.vo_relatives, small_seq.vo_relatives):
        np.testing.assert_array_equal(a.matrix(), b.matrix())
    pairs = tr.build_dataset([small_seq])
    tr.write_pairs(tmp_path / "pairs.csv", pairs)
    got = tr.read_pairs(tmp_path / "pairs.csv")
    assert [(p.sequence_id, p.source, p.target) for p in got] == [(p.sequence_id, p.source, p.target) for p in pairs]
    np.testing.assert_allclose(got[0].vo_prior.matrix(), pairs[0].vo_prior.matrix(), atol=1e-15)


def test_prepare_sequence_checks_counts():
    img = [dk.ImageBuffer(np.zeros((40, 40, 3)))] * 3
    with pytest.raises(ValueError):
        tr.prepare_sequence("x", img, Intrinsics(30, 30, 20, 20, 40, 40), [Pose.identity()])


def test_overfit_loss_decreases(tmp_path, small_seq):
    assert len(small_seq) == 9 and len(tr.build_dataset([small_seq])) >= 8
    seq = tr.SequenceData("s", small_seq.images[:9], small_seq.intrinsics, small_seq.vo_relatives[:8],
                          small_seq.flows[:8], small_seq.gt_relatives[:8])
    # regularizers off: dropout on the pose head makes single-batch epoch losses noisy
    cfg = tr.TrainConfig.for_mode("stereo", lr_init=1e-4, batch_size=8, max_epochs=5, height_px=48, width_px=64,
                                  seed=1, dropout_p=0.0, weight_decay=0.0)
    recs = tr.train(cfg, [seq], small_seq, tmp_path)
    losses = [r.train_loss for r in recs]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses
    assert (tmp_path / "epoch_005.ckpt").exists() and len(tr.read_records(tmp_path / "records.csv")) == 5


def test_training_is_reproducible(tmp_path, small_seq):
    cfg = tr.TrainConfig.for_mode("stereo", batch_size=4, max_epochs=2, height_px=48, width_px=64, seed=2)
    a = tr.train(cfg, [small_seq], small_seq, tmp_path / "a")
    b = tr.train(cfg, [small_seq], small_seq, tmp_path / "b")
    assert [r.val_loss for r in a] == [r.val_loss for r in b]
    assert (tmp_path / "a" / "epoch_002.ckpt").read_bytes() == (tmp_path / "b" / "epoch_002.ckpt").read_bytes()


def test_rotation_only_corrections_keep_translation(small_seq):
    from dpc.model import init_params

    cfg = tr.TrainConfig.for_mode("stereo", height_px=48, width_px=64)
    net = init_params(0, 0.25, (48, 64))
    traj = tr.corrected_trajectory(net, small_seq, cfg)
    rels = [b.inverse() @ a for a, b in zip(traj[:-1], traj[1:])]
    for r, vo in zip(rels, small_seq.vo_relatives):
        np.testing.assert_allclose(np.linalg.norm(r.translation), np.linalg.norm(vo.translation), rtol=1e-9)
