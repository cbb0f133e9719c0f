"""Command-line entry point: synth, prepare, train, select, correct, eval."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import datakit as dk
from . import evaluation as ev
from . import trainer as tr
from .fileio import atomic_write_text
from .geometry import read_poses, write_poses
from .imaging import FileFlow, resize_flow

log = logging.getLogger("dpc")


def _prepared_path(directory, sequence_id: str) -> Path:
    return Path(directory) / f"{sequence_id}.npz"


def cmd_synth(args) -> int:
    out = Path(args.out)
    if args.preset == "desk":
        scenes = dk.desk_scenes(seed=args.seed, bias_deg=args.bias_deg)
        for sid, (role, seq) in scenes.items():
            dk.write_sequence(out / sid, sid, seq)
            log.info("wrote %s sequence %s (%d frames)", role, sid, len(seq.images))
        roles = "\n".join(f"{sid} = {role}" for sid, (role, _) in scenes.items())
        atomic_write_text(out / "roles.txt", roles + "\n")
        return 0
    if args.shape == "circle":
        motion = dk.circle_motion(2 * np.pi * args.radius, args.frames_per_lap, args.laps, args.direction)
        start = dk.circle_start(args.radius, args.direction)
    elif args.shape == "racetrack":
        motion = dk.racetrack_motion(args.straight, args.radius, args.frames_per_lap, args.laps, args.direction)
        start = dk.racetrack_start(args.straight, args.radius, args.direction)
    else:
        motion = dk.straight_motion(args.step, args.frames_per_lap)
        start = None
    cfg = dk.SyntheticSceneConfig(
        seed=args.seed, height=args.height, width=args.width, depth_model="room" if args.shape != "straight" else "plane",
        texel=0.25, texture_sigmas=(4.0, 12.0), motion=motion, start_pose=start,
        vo_bias=dk.yaw_bias(args.bias_deg), vo_noise_std=(0, 0, 0, 0, np.radians(args.noise_deg), 0),
    )
    seq = dk.generate_synthetic(cfg)
    dk.write_sequence(out, args.id, seq)
    log.info("wrote %s (%d frames) to %s", args.id, len(seq.images), out)
    return 0


def cmd_prepare(args) -> int:
    cfg = tr.read_config(args.config) if args.config else tr.TrainConfig.for_mode(args.mode)
    out = Path(args.out)
    pairs = []
    for m in args.manifest:
        man = dk.SequenceManifest.read(m)
        raw = dk.ingest_kitti(man)
        flows = None
        if man.flow_dir:
            ff = FileFlow(man.flow_dir)
            h, w = cfg.input_size
            flows = [resize_flow(ff.load(a, b), h, w) for a, b in zip(raw.frame_ids[:-1], raw.frame_ids[1:])]
        gt_rel = ev.relatives_from_trajectory(raw.gt_poses) if raw.gt_poses else None
        seq = tr.prepare_sequence(man.sequence_id, raw.images, raw.intrinsics, ev.relatives_from_trajectory(raw.vo_poses),
                                  cfg.input_size, gt_rel, flows=flows)
        tr.save_prepared(_prepared_path(out, seq.sequence_id), seq)
        kept = tr.build_dataset([seq], min_translation=cfg.min_translation, min_rotation_deg=cfg.min_rotation_deg)
        log.info("%s: %d frames, %d pairs kept", seq.sequence_id, len(seq) + 1, len(kept))
        pairs.extend(kept)
    tr.write_pairs(out / "pairs.csv", pairs)
    return 0


def cmd_train(args) -> int:
    cfg = tr.read_config(args.config) if args.config else tr.TrainConfig.for_mode(args.mode)
    cfg.seed = args.seed
    if args.epochs:
        cfg.max_epochs = args.epochs
    train = [tr.load_prepared(_prepared_path(args.prepared, s)) for s in args.train]
    val = tr.load_prepared(_prepared_path(args.prepared, args.val))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tr.write_config(out / "config.txt", cfg)
    tr.train(cfg, train, val, out)
    log.info("records written to %s", out / "records.csv")
    return 0


def cmd_select(args) -> int:
    records = tr.read_records(args.records)
    if args.criterion == "gradient":
        epoch = tr.select_epoch_gradient(records)
    else:
        epoch = tr.select_epoch_loopclosure(records)
    rec = next(r for r in records if r.epoch == epoch)
    print(f"{epoch} {rec.checkpoint_path}")
    return 0


def cmd_correct(args) -> int:
    from .model import load_checkpoint

    net, _, meta = load_checkpoint(args.checkpoint)
    seq = tr.load_prepared(_prepared_path(args.prepared, args.sequence))
    cfg = tr.TrainConfig.for_mode(meta.get("mode", "stereo"), rotation_only=args.mode == "rotation-only")
    if args.no_rescale:
        cfg.rescale_monocular = False
    corr = tr.predict_corrections(net, seq, cfg)
    rels = ev.correct_sequence(tr.prior_relatives(seq, cfg), corr, rotation_only=cfg.corrections_rotation_only)
    write_poses(args.out, rels)
    if args.trajectory:
        write_poses(args.trajectory, ev.compound(rels))
    return 0


def _segment_lengths(text: str | None):
    if not text:
        return ev.SEGMENT_LENGTHS
    return tuple(float(x) for x in text.split(","))


def cmd_eval(args) -> int:
    gt = read_poses(args.gt)
    lengths = _segment_lengths(args.lengths)
    results = {}
    out = Path(args.out) if args.out else None
    for spec in args.est:
        name, _, path = spec.partition("=")
        if not path:
            name, path = Path(spec).stem, spec
        est = read_poses(path)
        if args.relative:
            est = ev.compound(est)
        est = ev.normalize_trajectory(est)
        seg = ev.mean_segment_error(est, ev.normalize_trajectory(gt), lengths)
        results[name] = (seg, ev.mean_ate(est, ev.normalize_trajectory(gt)))
        if out:
            atomic_write_text(out / f"segments_{name}.csv", ev.format_segment_csv(name, seg))
            ev.write_polyline(out / f"polyline_{name}.csv", est)
    table = ev.format_table(results)
    print(table, end="")
    if out:
        atomic_write_text(out / "table.txt", table)
        atomic_write_text(out / "results.csv", ev.format_csv(results))
        ev.write_polyline(out / "polyline_gt.csv", ev.normalize_trajectory(gt))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dpc", description="Self-supervised pose corrections for visual odometry")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic sequence or the desk-scale dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=["desk", "single"], default="single")
    p.add_argument("--id", default="synth")
    p.add_argument("--shape", choices=["circle", "racetrack", "straight"], default="racetrack")
    p.add_argument("--radius", type=float, default=10.0)
    p.add_argument("--straight", type=float, default=20.0)
    p.add_argument("--step", type=float, default=1.0)
    p.add_argument("--frames-per-lap", type=int, default=100)
    p.add_argument("--laps", type=float, default=1.0)
    p.add_argument("--direction", type=int, choices=[-1, 1], default=1)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--bias-deg", type=float, default=0.3, help="constant VO yaw bias per frame")
    p.add_argument("--noise-deg", type=float, default=0.03, help="VO yaw noise std per frame")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="resize, whiten and filter sequences; write the pair index")
    p.add_argument("--manifest", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--mode", choices=["monocular", "stereo"], default="stereo")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a corrector, one checkpoint per epoch")
    p.add_argument("--prepared", required=True)
    p.add_argument("--train", nargs="+", required=True, help="training sequence ids")
    p.add_argument("--val", required=True, help="validation sequence id")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--mode", choices=["monocular", "stereo"], default="stereo")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("select", help="pick an epoch from a records file")
    p.add_argument("--records", required=True)
    p.add_argument("--criterion", choices=["gradient", "loopclosure"], required=True)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("correct", help="apply a checkpoint to a prepared sequence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prepared", required=True)
    p.add_argument("--sequence", required=True)
    p.add_argument("--mode", choices=["full", "rotation-only"], default="rotation-only")
    p.add_argument("--no-rescale", action="store_true", help="skip monocular rescaling of the prior")
    p.add_argument("--out", required=True, help="corrected relative poses")
    p.add_argument("--trajectory", help="also write the compounded trajectory")
    p.set_defaults(func=cmd_correct)

    p = sub.add_parser("eval", help="m-SE and m-ATE table, CSVs and polylines")
    p.add_argument("--gt", required=True)
    p.add_argument("--est", nargs="+", required=True, help="NAME=PATH trajectory files")
    p.add_argument("--relative", action="store_true", help="estimate files hold relative poses")
    p.add_argument("--lengths", help="comma-separated segment lengths in metres")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    for p in sub.choices.values():
        p.add_argument("--seed", type=int, default=0)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except OSError as e:
        where = e.filename or ""
        print(f"dpc: error: {where}: {e.strerror or e}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"dpc: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
