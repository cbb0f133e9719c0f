"""Trajectory compounding and KITTI-style error metrics.

Conventions
-----------
A relative pose ``T_{t+1,t}`` maps points from camera frame t into camera
frame t+1 (the transform used for warping). A trajectory holds the global
poses ``G_t = T_{0,t}`` (camera t expressed in the start frame, the layout of
KITTI ground-truth files), so ``G_0 = I`` and ``G_{t+1} = G_t T_{t+1,t}^-1``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fileio import atomic_write_text
from .geometry import Pose, Twist, exp_se3, rotation_angle


SEGMENT_LENGTHS = (100, 200, 300, 400, 500, 600, 700, 800)


def compound(relatives: Sequence[Pose]) -> list[Pose]:
    """Global poses G_0..G_n from n relative poses (n >= 0 gives n+1 poses)."""
    traj = [Pose.identity()]
    for rel in relatives:
        if not isinstance(rel, Pose):
            raise TypeError(f"expected Pose, got {type(rel).__name__}")
        traj.append(traj[-1] @ rel.inverse())
    return traj


def relatives_from_trajectory(traj: Sequence[Pose]) -> list[Pose]:
    """Inverse of compound: T_{t+1,t} = G_{t+1}^-1 G_t."""
    return [traj[i + 1].inverse() @ traj[i] for i in range(len(traj) - 1)]


def normalize_trajectory(traj: Sequence[Pose]) -> list[Pose]:
    """Re-express a trajectory so that its first pose is the identity."""
    g0inv = traj[0].inverse()
    return [g0inv @ g for g in traj]


def correct_sequence(relatives_vo: Sequence[Pose], corrections: Sequence, rotation_only: bool = False) -> list[Pose]:
    """Apply per-frame corrections (Twists or Poses) on the left of the VO relatives."""
    if len(relatives_vo) != len(corrections):
        raise ValueError(f"{len(relatives_vo)} relatives but {len(corrections)} corrections")
    out = []
    for vo, corr in zip(relatives_vo, corrections):
        if isinstance(corr, Twist):
            if rotation_only:
                corr = Twist(np.zeros(3), corr.rotational)
            corr = exp_se3(corr)
        elif rotation_only:
            corr = Pose(corr.rotation, np.zeros(3))
        out.append(corr @ vo)
    return out


def rescale_monocular(relatives_est: Sequence[Pose], gt: Sequence[Pose]) -> list[Pose]:
    """Scale each estimated translation to the ground-truth inter-frame displacement.

    ``gt`` is a trajectory with one more pose than there are relatives.
    """
    if len(gt) != len(relatives_est) + 1:
        raise ValueError(f"need {len(relatives_est) + 1} ground-truth poses, got {len(gt)}")
    out = []
    for i, rel in enumerate(relatives_est):
        norm = float(np.linalg.norm(rel.translation))
        if norm == 0.0:
            out.append(rel)
            continue
        target = float(np.linalg.norm(gt[i + 1].translation - gt[i].translation))
        out.append(Pose(rel.rotation, rel.translation * (target / norm)))
    return out


def _check_lengths(est, gt):
    if len(est) != len(gt):
        raise ValueError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")


def ate_errors(est: Sequence[Pose], gt: Sequence[Pose]) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame translation (m) and rotation (deg) error of G_gt^-1 G_est."""
    _check_lengths(est, gt)
    te = np.empty(len(est))
    re = np.empty(len(est))
    for i, (e, g) in enumerate(zip(est, gt)):
        d = g.inverse() @ e
        te[i] = np.linalg.norm(d.translation)
        re[i] = math.degrees(rotation_angle(d.rotation))
    return te, re


def mean_ate(est: Sequence[Pose], gt: Sequence[Pose]) -> tuple[float, float]:
    """Mean absolute trajectory error (metres, degrees), no alignment."""
    te, re = ate_errors(est, gt)
    return float(te.mean()), float(re.mean())


@dataclass
class SegmentErrorReport:
    lengths: tuple = SEGMENT_LENGTHS
    translation: dict = field(default_factory=dict)  # length -> % of length, None if no segment
    rotation: dict = field(default_factory=dict)  # length -> deg / 100 m
    counts: dict = field(default_factory=dict)

    @property
    def mean_translation(self) -> float | None:
        vals = [v for v in self.translation.values() if v is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def mean_rotation(self) -> float | None:
        vals = [v for v in self.rotation.values() if v is not None]
        return float(np.mean(vals)) if vals else None


def path_distances(traj: Sequence[Pose]) -> np.ndarray:
    pos = np.array([g.translation for g in traj])
    steps = np.linalg.norm(np.diff(pos, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def mean_segment_error(est: Sequence[Pose], gt: Sequence[Pose], lengths=SEGMENT_LENGTHS) -> SegmentErrorReport:
    """Mean relative error over all segments of each length, from every start frame.

    A segment ends at the first frame whose cumulative GT path length from the
    start reaches L. Lengths no segment can span are reported as None.
    """
    _check_lengths(est, gt)
    dist = path_distances(gt)
    gt_m = np.array([g.matrix() for g in gt])
    est_m = np.array([e.matrix() for e in est])
    gt_inv = np.linalg.inv(gt_m)
    est_inv = np.linalg.inv(est_m)
    report = SegmentErrorReport(lengths=tuple(lengths))
    n = len(gt)
    for length in lengths:
        t_err, r_err = [], []
        for first in range(n):
            last = int(np.searchsorted(dist, dist[first] + length, side="left"))
            if last >= n:
                break
            rel_gt = gt_inv[first] @ gt_m[last]
            rel_est = est_inv[first] @ est_m[last]
            e = np.linalg.inv(rel_gt) @ rel_est
            t_err.append(np.linalg.norm(e[:3, 3]) / length * 100.0)
            r_err.append(math.degrees(rotation_angle(e[:3, :3])) / length * 100.0)
        report.counts[length] = len(t_err)
        report.translation[length] = float(np.mean(t_err)) if t_err else None
        report.rotation[length] = float(np.mean(r_err)) if r_err else None
    return report


def count_loop_closures(
    traj: Sequence[Pose],
    trans_thresh: float = 7.0,
    rot_thresh: float = 8.5,
    forward_min: float = 10.0,
    forward_axis: int = 2,
) -> int:
    """Count frames t that are revisited by a later frame t+n.

    A revisit needs the relative pose G_{t+n}^-1 G_t within ``trans_thresh``
    metres and ``rot_thresh`` degrees, and at least ``forward_min`` metres of
    forward travel between t and t+n (the forward components of the relative
    motions, summed). Each t counts once.
    """
    n = len(traj)
    if n < 2:
        return 0
    mats = np.array([g.matrix() for g in traj])
    inv = np.linalg.inv(mats)
    # forward travel of each step = forward component of the camera displacement
    steps = np.array([(inv[i] @ mats[i + 1])[forward_axis, 3] for i in range(n - 1)])
    travelled = np.concatenate([[0.0], np.cumsum(steps)])
    pos = mats[:, :3, 3]
    cos_thresh = math.cos(math.radians(rot_thresh))
    count = 0
    for t in range(n - 1):
        later = np.arange(t + 1, n)
        ok = travelled[later] - travelled[t] >= forward_min
        ok &= np.linalg.norm(pos[later] - pos[t], axis=1) <= trans_thresh
        cand = later[ok]
        if cand.size == 0:
            continue
        # relative rotation angle via the trace of R_{t+n}^T R_t
        tr = np.einsum("kij,ij->k", mats[cand, :3, :3], mats[t, :3, :3])
        if np.any(0.5 * (tr - 1.0) >= cos_thresh - 1e-15):
            count += 1
    return count


# --- reports ---

TABLE_COLUMNS = ("Trans. (%)", "Rot. (deg/100m)", "m-ATE Trans. (m)", "m-ATE Rot. (deg)")


def _fmt(x, digits=3):
    return "n/a" if x is None else f"{x:.{digits}f}"


def report_rows(results: dict) -> list[tuple]:
    """results: name -> (SegmentErrorReport, (ate_m, ate_deg))."""
    rows = []
    for name, (seg, ate) in results.items():
        rows.append((name, seg.mean_translation, seg.mean_rotation, ate[0], ate[1]))
    return rows


def format_table(results: dict) -> str:
    """Aligned plain-text table: estimator, m-SE (trans, rot), m-ATE (trans, rot)."""
    header = ("Estimator",) + TABLE_COLUMNS
    body = [(r[0],) + tuple(_fmt(x) for x in r[1:]) for r in report_rows(results)]
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    group = f"{'':<{widths[0]}}  {'m-SE':^{widths[1] + widths[2] + 2}}  {'m-ATE':^{widths[3] + widths[4] + 2}}"
    lines = [group.rstrip()]
    for row in [header] + body:
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))))
    return "\n".join(lines) + "\n"


def format_csv(results: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["estimator", "mse_trans_pct", "mse_rot_deg_per_100m", "mate_trans_m", "mate_rot_deg"])
    for row in report_rows(results):
        w.writerow([row[0]] + ["" if x is None else repr(float(x)) for x in row[1:]])
    return buf.getvalue()


def format_segment_csv(name: str, seg: SegmentErrorReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["estimator", "length_m", "segments", "trans_pct", "rot_deg_per_100m"])
    for length in seg.lengths:
        t, r = seg.translation.get(length), seg.rotation.get(length)
        w.writerow([name, length, seg.counts.get(length, 0), "" if t is None else repr(t), "" if r is None else repr(r)])
    return buf.getvalue()


def write_polyline(path, traj: Sequence[Pose]) -> None:
    """Top-down x-z polyline of camera positions, for external plotting."""
    lines = ["x,z"] + [f"{float(g.translation[0])!r},{float(g.translation[2])!r}" for g in traj]
    atomic_write_text(path, "\n".join(lines) + "\n")
