"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` or ``python tests/test_acceptance.py``.
The end-to-end learning run takes a few minutes on a laptop CPU.
"""

import math
import time

import numpy as np
import pytest
import torch
from scipy import ndimage
from torch.func import functional_call

from dpc import autodiff as ad
from dpc import datakit as dk
from dpc import evaluation as ev
from dpc import trainer as tr
from dpc.cli import main as cli
from dpc.geometry import Pose, Twist, axis_rotation, exp_se3, log_se3, read_poses, write_poses
from dpc.imaging import DepthMap, ImageBuffer, Intrinsics, backproject, pixel_grid, project
from dpc.model import depth_from_inverse, init_params
from dpc.warploss import (
    LossConfig,
    batch_loss,
    explainability_loss,
    rotation_gated_loss,
    total_loss,
    warp,
    warp_batch,
)


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, detail

    return emit


def smooth(h, w, seed=0, sigma=3.0):
    rng = np.random.default_rng(seed)
    return np.dstack([ndimage.gaussian_filter(rng.random((h, w)), sigma) for _ in range(3)])


# 1 -------------------------------------------------------------------------

def test_c1_geometry(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(10_000):
        phi = rng.normal(size=3)
        phi *= rng.uniform(0, math.pi - 0.1) / np.linalg.norm(phi)
        xi = Twist(rng.uniform(-10, 10, 3), phi)
        worst = max(worst, float(np.abs(log_se3(exp_se3(xi)).vector() - xi.vector()).max()))
    K = Intrinsics(718.856, 718.856, 607.19, 185.22, 370, 1226)
    u = rng.uniform(0, K.width - 1, 10_000)
    v = rng.uniform(0, K.height - 1, 10_000)
    d = rng.uniform(0.1, 500, 10_000)
    pts = backproject(u, v, d, K)
    pu, pv, _ = project(pts, K)
    proj = float(max(np.abs(pu - u).max(), np.abs(pv - v).max()))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-9 and proj <= 1e-9 and dt < 5.0
    report(1, ok, f"exp/log max err {worst:.2e}, project-backproject {proj:.2e} px, {dt:.2f} s")


# 2 -------------------------------------------------------------------------

def test_c2_warp_oracles(report):
    t0 = time.perf_counter()
    h, w = 48, 64
    K = Intrinsics(50.0, 50.0, 31.5, 23.5, h, w)
    img = ImageBuffer(smooth(h, w))
    depth = DepthMap(np.random.default_rng(1).uniform(1, 20, (h, w)))
    recon, valid = warp(img, depth, Pose.identity(), K)
    zero_err = float(np.abs(recon.data - img.data).max())

    u, v = pixel_grid(h, w)
    ramp = np.dstack([u / w, v / h, 0.5 * (u / w + v / h)])
    d, tx = 6.0, 0.3
    recon, valid2 = warp(ImageBuffer(ramp), DepthMap(np.full((h, w), d)), Pose.from_translation((tx, 0, 0)), K)
    us = u + K.fu * tx / d
    expected = np.dstack([us / w, v / h, 0.5 * (us / w + v / h)])
    shift_err = float(np.abs(recon.data - expected)[valid2].max())
    dt = time.perf_counter() - t0
    ok = valid.all() and zero_err <= 1e-12 and valid2.sum() > 0 and shift_err <= 1e-3 and dt < 10.0
    report(2, ok, f"zero-motion max err {zero_err:.1e}, plane shift max err {shift_err:.1e}, {dt:.2f} s")


# 3 -------------------------------------------------------------------------

def test_c3_loss_oracles(report):
    cfg = LossConfig()
    half = explainability_loss(torch.tensor([0.5], dtype=torch.float64)).item()
    phot = torch.full((2, 3, 6, 8), 0.5, dtype=torch.float64)
    mask = torch.full((2, 6, 8), 0.5, dtype=torch.float64)
    gated = rotation_gated_loss(phot, torch.tensor([0.001, 0.004], dtype=torch.float64), cfg.gamma_rot)
    total = total_loss(phot, explainability_loss(mask), gated, cfg).item()
    above = rotation_gated_loss(phot, [axis_rotation("y", 0.006)] * 2, cfg.gamma_rot)
    e1, e2 = abs(half - math.log(2)), abs(total - (0.5 + cfg.lambda_exp * math.log(2)))
    ok = e1 <= 1e-9 and e2 <= 1e-9 and not gated.any() and torch.equal(above, phot) and cfg.gamma_rot == 0.005
    report(3, ok, f"ln2 err {e1:.1e}, total err {e2:.1e}, gate below {cfg.gamma_rot} rad zero: {not gated.any()}")


# 4 -------------------------------------------------------------------------

def _r(*shape, seed=0, lo=-1.0, hi=1.0):
    g = torch.Generator().manual_seed(seed)
    return lo + (hi - lo) * torch.rand(tuple(shape), generator=g, dtype=torch.float64)


def _weighted(fn):
    def f(*xs):
        out = fn(*xs)
        outs = out if isinstance(out, tuple) else (out,)
        return sum((o * _r(*o.shape, seed=50 + j)).sum() for j, o in enumerate(outs))

    return f


def _primitive_cases():
    K = Intrinsics(20.0, 22.0, 5.5, 4.5, 10, 12)
    off_kink = _r(4, 6) + torch.sign(_r(4, 6, seed=5)) * 0.1
    u = _r(2, 4, 5, seed=1, lo=0.2, hi=5.8)
    v = _r(2, 4, 5, seed=2, lo=0.2, hi=4.8)
    u = u.floor() + 0.1 + 0.8 * (u - u.floor())
    v = v.floor() + 0.1 + 0.8 * (v - v.floor())
    pts = ad.backproject(_r(2, 10, 12, lo=1, hi=5), K).detach()
    return {
        "linear": (ad.linear, (_r(3, 5), _r(4, 5, seed=1), _r(4, seed=2))),
        "conv2d": (lambda x, k, b: ad.conv2d(x, k, b, stride=2, padding=1), (_r(2, 3, 7, 8), _r(4, 3, 3, 3, seed=1), _r(4, seed=2))),
        "conv_transpose2d": (lambda x, k, b: ad.conv_transpose2d(x, k, b, stride=2, padding=1),
                             (_r(2, 3, 4, 5), _r(3, 2, 4, 4, seed=1), _r(2, seed=2))),
        "batch_norm": (lambda x, k, b: ad.batch_norm(x, k, b, None, None, training=True),
                       (_r(4, 3, 5, 5), _r(3, seed=1, lo=0.5, hi=1.5), _r(3, seed=2))),
        "relu": (ad.relu, (off_kink,)),
        "abs": (ad.absolute, (off_kink,)),
        "sigmoid": (ad.sigmoid, (_r(4, 6, lo=-4, hi=4),)),
        "log": (ad.log, (_r(4, 6, lo=0.1, hi=3),)),
        "mean": (ad.mean, (_r(3, 4),)),
        "sum": (ad.total, (_r(3, 4),)),
        "concat": (lambda a, b: ad.concat([a, b], dim=1), (_r(2, 3), _r(2, 5, seed=1))),
        "dropout": (lambda x: ad.dropout(x, 0.5, True, torch.Generator().manual_seed(3)), (_r(8, 16),)),
        "bilinear_sample": (lambda i, a, b: ad.bilinear_sample(i, a, b)[0], (_r(2, 3, 6, 7), u, v)),
        "se3_exp": (ad.se3_exp, (_r(3, 6),)),
        "se3_exp_small": (ad.se3_exp, (torch.cat([_r(2, 3), _r(2, 3, seed=1, lo=-1e-3, hi=1e-3)], 1),)),
        "backproject": (lambda d: ad.backproject(d, K), (_r(2, 10, 12, lo=1, hi=5),)),
        "transform_points": (ad.transform_points, (_r(2, 3, 3), _r(2, 3, seed=1), pts)),
        "pinhole_project": (lambda q: torch.stack(ad.pinhole_project(q, K)[:2]), (pts,)),
    }


def test_c4_gradient_checks(report):
    t0 = time.perf_counter()
    bad = [name for name, (fn, xs) in _primitive_cases().items()
           if not ad.gradcheck(_weighted(fn), xs, tol=1e-6, n_coords=100).passed]

    h = w = 32
    rng = np.random.default_rng(0)

    def img():
        return torch.tensor(np.stack([ndimage.gaussian_filter(rng.random((h, w)), 2.0) for _ in range(3)]))[None] * 4 - 2

    src, tgt = img(), img()
    flow = torch.tensor(rng.normal(0, 0.5, (1, 2, h, w)))
    K = Intrinsics(30.0, 30.0, 15.5, 15.5, h, w)
    vo_rot = torch.eye(3, dtype=torch.float64)[None]
    vo_trans = torch.tensor([[0.02, 0.0, 0.5]], dtype=torch.float64)
    vo_twist = torch.tensor([[0.02, 0, 0.5, 0, 0.01, 0]], dtype=torch.float64)
    angle = torch.tensor([0.01], dtype=torch.float64)
    net = init_params(0, 0.25, (h, w)).double().eval()
    cfg = LossConfig()

    def loss_from(xi, inv, mask):
        rot, trans = tr.compose_correction(xi, vo_rot, vo_trans)
        recon, valid = warp_batch(tgt, depth_from_inverse(inv, 0.01), rot, trans, K)
        return batch_loss(recon, src, mask, valid, angle, cfg)[0]

    with torch.no_grad():
        out = net(src, tgt, flow, vo_twist)
    xi_rep = ad.gradcheck(lambda xi: loss_from(xi, out.inverse_depth, out.mask), [out.correction.clone()],
                          tol=1e-6, n_coords=None)

    names = [n for n, _ in net.named_parameters()]
    params = [p.detach().clone() for p in net.parameters()]

    def full(*ps):
        o = functional_call(net, dict(zip(names, ps)), (src, tgt, flow, vo_twist))
        return loss_from(o.correction, o.inverse_depth, o.mask)

    p_rep = ad.gradcheck(full, params, tol=1e-6, n_coords=6)
    dt = time.perf_counter() - t0
    ok = not bad and xi_rep.passed and p_rep.passed and dt < 120
    report(4, ok, f"xi rel err {xi_rep.max_rel_error:.1e}, params rel err {p_rep.max_rel_error:.1e} "
                  f"({p_rep.n_checked} entries over {len(params)} tensors), failing primitives {bad or 'none'}, {dt:.1f} s")


# 5 -------------------------------------------------------------------------

def _circle(circumference, n):
    r = circumference / (2 * math.pi)
    out = []
    for i in range(n):
        a = 2 * math.pi * i / circumference
        out.append(Pose(axis_rotation("y", a).rotation, np.array([r - r * math.cos(a), 0.0, r * math.sin(a)])))
    return out


def _brute_force_loops(traj, trans=7.0, rot=8.5, forward=10.0):
    steps = [(traj[i + 1].inverse() @ traj[i]).inverse().translation[2] for i in range(len(traj) - 1)]
    count = 0
    for t in range(len(traj)):
        for m in range(t + 1, len(traj)):
            rel = traj[m].inverse() @ traj[t]
            ang = math.degrees(math.acos(max(-1.0, min(1.0, (np.trace(rel.rotation) - 1) / 2))))
            if sum(steps[t:m]) >= forward and np.linalg.norm(rel.translation) <= trans and ang <= rot:
                count += 1
                break
    return count


def test_c5_metric_oracles(report):
    gt = [Pose.from_translation((0, 0, float(i))) for i in range(1001)]
    est = [Pose.from_translation((0, 0, 0.99 * i)) for i in range(1001)]
    rep = ev.mean_segment_error(est, gt)
    dev = max(abs(rep.translation[L] - 1.0) for L in ev.SEGMENT_LENGTHS)
    traj = _circle(200, 401)
    got, want = ev.count_loop_closures(traj), _brute_force_loops(traj)
    ok = dev <= 1e-6 and got == want
    report(5, ok, f"0.99-scale segments max |err-1%| {dev:.1e}; loops {got} vs brute force {want}")


# 6 -------------------------------------------------------------------------

SEGMENTS = tuple(range(10, 90, 10))


def test_c6_end_to_end_learning(report, tmp_path):
    t0 = time.perf_counter()
    scenes = dk.desk_scenes(seed=0)
    prep = {sid: tr.prepare_sequence(sid, s.images, s.intrinsics, s.vo_relatives, gt_relatives=s.gt_relatives)
            for sid, (_, s) in scenes.items()}
    train_ids = [sid for sid, (role, _) in scenes.items() if role == "train"]
    test = prep["test"]
    n_all = sum(len(prep[s]) for s in train_ids)
    n_pairs = len(tr.build_dataset([prep[s] for s in train_ids]))
    cfg = tr.TrainConfig.for_mode("stereo", batch_size=4, max_epochs=20, lr_decay_every=10, seed=0)
    ate, mse = {}, {}

    def on_epoch(rec, net):
        traj = tr.corrected_trajectory(net, test, cfg)
        ate[rec.epoch] = ev.mean_ate(traj, test.gt_poses)[0]
        mse[rec.epoch] = ev.mean_segment_error(traj, test.gt_poses, SEGMENTS).mean_translation

    recs = tr.train(cfg, [prep[s] for s in train_ids], prep["val"], tmp_path, on_epoch=on_epoch)
    prior = ev.compound(test.vo_relatives)
    prior_ate = ev.mean_ate(prior, test.gt_poses)[0]
    g, lc = tr.select_epoch_gradient(recs), tr.select_epoch_loopclosure(recs)
    median = float(np.median(list(mse.values())))
    dt = time.perf_counter() - t0
    ok = ate[g] <= 0.5 * prior_ate and mse[lc] <= median and len(recs) <= 20 and dt <= 1800
    report(6, ok, f"{n_all} pairs, {n_pairs} past the motion thresholds; gradient epoch {g} m-ATE {ate[g]:.3f} m vs prior {prior_ate:.3f} m "
                  f"(ratio {ate[g] / prior_ate:.2f}); loop epoch {lc} m-SE {mse[lc]:.3f}% vs median {median:.3f}%; "
                  f"{dt / 60:.1f} min")


# 7 -------------------------------------------------------------------------

def test_c7_format_fidelity(report, tmp_path, capsys):
    rng = np.random.default_rng(0)
    poses = [exp_se3(Twist.from_vector(rng.uniform(-2, 2, 6))) for _ in range(200)]
    write_poses(tmp_path / "p.txt", poses)
    back = read_poses(tmp_path / "p.txt")
    exact = all(np.array_equal(a.matrix(), b.matrix()) for a, b in zip(poses, back))

    # KITTI-style layout: PNG frames, calib.txt, 12-number pose files
    from PIL import Image

    seq = dk.generate_synthetic(dk.SyntheticSceneConfig(seed=4, height=32, width=48, motion=dk.straight_motion(0.3, 4)))
    root = tmp_path / "kitti"
    (root / "image_2").mkdir(parents=True)
    for i, im in enumerate(seq.images):
        Image.fromarray(np.round(im.data * 255).astype(np.uint8)).save(root / "image_2" / f"{i:06d}.png")
    K = seq.intrinsics
    p = f"{K.fu} 0 {K.cu} 0 0 {K.fv} {K.cv} 0 0 0 1 0"
    (root / "calib.txt").write_text("".join(f"P{i}: {p}\n" for i in range(4)))
    write_poses(root / "vo.txt", seq.vo_poses)
    write_poses(root / "gt.txt", seq.gt_poses)
    (root / "manifest.txt").write_text("image_dir = image_2\nintrinsics = calib.txt\nvo_poses = vo.txt\ngt_poses = gt.txt\n")
    raw = dk.ingest_kitti(dk.SequenceManifest.read(root / "manifest.txt"))
    ingested = len(raw.images) == 5 and raw.intrinsics == K

    capsys.readouterr()
    code = cli(["eval", "--gt", str(root / "gt.txt"), "--est", f"VO={root / 'vo.txt'}", "--lengths", "0.5,1"])
    lines = capsys.readouterr().out.splitlines()
    header = lines[1].split("  ")
    cols = all(c in lines[1] for c in ev.TABLE_COLUMNS) and "m-SE" in lines[0] and "m-ATE" in lines[0]
    ok = exact and ingested and code == 0 and cols and lines[2].startswith("VO")
    report(7, ok, f"pose round trip bit-exact {exact}; KITTI-layout ingest ok {ingested}; "
                  f"table columns {[c for c in header if c.strip()]}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
