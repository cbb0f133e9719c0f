"""Dataset assembly, the training loop, and epoch selection.

Epochs are numbered from 1. The learning rate is decayed at epoch
boundaries: after ``e`` completed epochs it is
``lr_init * lr_decay_factor ** (e // lr_decay_every)``, so epoch ``e`` trains
with ``lr_at_epoch(e - 1)``.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import autodiff as ad
from . import imaging
from .evaluation import compound, count_loop_closures, correct_sequence, rescale_monocular
from .fileio import atomic_write_bytes, atomic_write_text
from .geometry import Pose, Twist, log_se3, rotation_magnitude
from .imaging import ImageBuffer, Intrinsics
from .model import Corrector, depth_from_inverse, init_params, save_checkpoint
from .warploss import LossConfig, batch_loss, gradient_criterion_loss, warp_batch

log = logging.getLogger(__name__)

RECORD_COLUMNS = ("epoch", "val_loss", "grad_loss", "loop_closures", "checkpoint_path")


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr_init: float = 5e-5
    lr_decay_factor: float = 0.5
    lr_decay_every: int = 10
    batch_size: int = 32
    max_epochs: int = 30
    dropout_p: float = 0.5
    weight_decay: float = 4e-6
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    mode: str = "monocular"
    width: float = 0.25
    height_px: int = 96
    width_px: int = 128
    eps_inv: float = 0.01
    correction_scale: float = 0.01
    rescale_monocular: bool = True
    rotation_only: bool | None = None  # None: True in stereo mode
    min_translation: float = 1.5  # metres
    min_rotation_deg: float = 0.4
    loop_trans_thresh: float = 7.0
    loop_rot_thresh: float = 8.5
    loop_forward_min: float = 10.0
    reproducible: bool = True

    def __post_init__(self):
        if self.mode not in ("monocular", "stereo"):
            raise ValueError(f"mode must be monocular or stereo, got {self.mode!r}")
        for name in ("lr_init", "lr_decay_factor", "lr_decay_every", "batch_size", "max_epochs", "width", "eps_inv"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")

    @classmethod
    def for_mode(cls, mode: str, **overrides) -> "TrainConfig":
        """Optimizer schedule defaults for the monocular or stereo prior."""
        if mode == "stereo":
            base = dict(lr_init=1e-3, lr_decay_every=4)
        else:
            base = dict(lr_init=5e-5, lr_decay_every=10)
        base.update(overrides)
        return cls(mode=mode, **base)

    @property
    def corrections_rotation_only(self) -> bool:
        return self.mode == "stereo" if self.rotation_only is None else self.rotation_only

    @property
    def input_size(self) -> tuple[int, int]:
        return (self.height_px, self.width_px)


# --- run config file: flat key = value ---

_LOSS_KEYS = {f.name for f in fields(LossConfig)}


def _coerce(value: str, like):
    if isinstance(like, bool) or like is None and value.lower() in ("true", "false", "none"):
        low = value.lower()
        if low == "none":
            return None
        if low not in ("true", "false"):
            raise ValueError(f"expected true/false, got {value!r}")
        return low == "true"
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def read_config(path) -> TrainConfig:
    defaults = TrainConfig()
    kv = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        kv[k] = v
    mode = kv.get("mode", "monocular")
    cfg = TrainConfig.for_mode(mode)
    loss = LossConfig()
    top = {}
    for k, v in kv.items():
        if k in _LOSS_KEYS:
            setattr(loss, k, _coerce(v, getattr(loss, k)))
        elif k in {f.name for f in fields(TrainConfig)} and k != "loss":
            top[k] = _coerce(v, getattr(defaults, k))
        else:
            raise ValueError(f"{path}: unknown config key {k!r}")
    merged = {**{f.name: getattr(cfg, f.name) for f in fields(TrainConfig)}, **top, "loss": LossConfig(**asdict(loss))}
    return TrainConfig(**merged)


def write_config(path, cfg: TrainConfig) -> None:
    lines = []
    for f in fields(TrainConfig):
        if f.name == "loss":
            lines.extend(f"{k} = {v!r}" for k, v in asdict(cfg.loss).items())
        else:
            v = getattr(cfg, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) or v is None else v!r}".replace("'", ""))
    atomic_write_text(path, "\n".join(lines) + "\n")


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate after ``epoch`` completed epochs."""
    return cfg.lr_init * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


# --- data ---

@dataclass
class SamplePair:
    sequence_id: str
    source: int
    target: int
    vo_prior: Pose
    flow_ref: str | None = None
    intrinsics_ref: str | None = None


@dataclass
class SequenceData:
    """One sequence prepared at network resolution."""

    sequence_id: str
    images: np.ndarray  # (T, C, H, W) float32, whitened
    intrinsics: Intrinsics
    vo_relatives: list[Pose]
    flows: np.ndarray  # (T-1, 2, H, W) float32
    gt_relatives: list[Pose] | None = None

    def __len__(self) -> int:
        return len(self.vo_relatives)

    @property
    def gt_poses(self) -> list[Pose] | None:
        return None if self.gt_relatives is None else compound(self.gt_relatives)


def prepare_sequence(
    sequence_id: str,
    images: Sequence[ImageBuffer],
    intrinsics: Intrinsics,
    vo_relatives: Sequence[Pose],
    size=(96, 128),
    gt_relatives: Sequence[Pose] | None = None,
    flow_provider=None,
    flows: Sequence | None = None,
) -> SequenceData:
    """Resize and whiten frames, compute flow between consecutive frames."""
    if len(vo_relatives) != len(images) - 1:
        raise ValueError(f"{len(images)} frames need {len(images) - 1} relative poses, got {len(vo_relatives)}")
    h, w = size
    resized = [im if (im.height, im.width) == (h, w) else imaging.resize(im, h, w) for im in images]
    resized = [im if im.channels == 3 else ImageBuffer(np.repeat(im.data, 3, axis=2)) for im in resized]
    if flows is None:
        flows = [imaging.compute_flow(a, b, flow_provider) for a, b in zip(resized[:-1], resized[1:])]
    flow_arr = np.stack([np.asarray(f.data if hasattr(f, "data") else f).transpose(2, 0, 1) for f in flows])
    whitened = np.stack([imaging.whiten(im).data.transpose(2, 0, 1) for im in resized])
    K = intrinsics if (intrinsics.height, intrinsics.width) == (h, w) else intrinsics.resized(h, w)
    return SequenceData(
        sequence_id,
        whitened.astype(np.float32),
        K,
        list(vo_relatives),
        flow_arr.astype(np.float32),
        None if gt_relatives is None else list(gt_relatives),
    )


def save_prepared(path, seq: SequenceData) -> None:
    """Cache a prepared sequence as an .npz archive."""
    K = seq.intrinsics
    arrays = dict(
        sequence_id=np.array(seq.sequence_id),
        images=seq.images,
        flows=seq.flows,
        intrinsics=np.array([K.fu, K.fv, K.cu, K.cv, K.height, K.width], dtype=np.float64),
        vo=np.array([p.matrix() for p in seq.vo_relatives]),
    )
    if seq.gt_relatives is not None:
        arrays["gt"] = np.array([p.matrix() for p in seq.gt_relatives])
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write_bytes(path, buf.getvalue())


def load_prepared(path) -> SequenceData:
    with np.load(path) as z:
        k = z["intrinsics"]
        K = Intrinsics(float(k[0]), float(k[1]), float(k[2]), float(k[3]), int(k[4]), int(k[5]))
        gt = [Pose.from_matrix(m) for m in z["gt"]] if "gt" in z else None
        return SequenceData(str(z["sequence_id"]), z["images"], K, [Pose.from_matrix(m) for m in z["vo"]],
                            z["flows"], gt)


def write_pairs(path, pairs: Sequence[SamplePair]) -> None:
    """Pair index: sequence, frame indices and the 12 VO prior entries."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sequence_id", "source", "target"] + [f"r{i}{j}" for i in range(3) for j in range(3)] + ["tx", "ty", "tz"])
    for p in pairs:
        w.writerow([p.sequence_id, p.source, p.target] + [repr(float(x)) for x in p.vo_prior.rotation.ravel()]
                   + [repr(float(x)) for x in p.vo_prior.translation])
    atomic_write_text(path, buf.getvalue())


def read_pairs(path) -> list[SamplePair]:
    out = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for row in r:
            vals = np.array([float(x) for x in row[3:]])
            out.append(SamplePair(row[0], int(row[1]), int(row[2]), Pose(vals[:9].reshape(3, 3), vals[9:])))
    return out


def build_dataset(sequences: Sequence, vo_estimates: dict | None = None, min_translation: float = 1.5,
                  min_rotation_deg: float = 0.4) -> list[SamplePair]:
    """Keep consecutive pairs whose VO motion is large enough.

    A pair (t, t+1) is kept iff its VO translation >= ``min_translation`` or
    its VO rotation >= ``min_rotation_deg``. ``sequences`` are SequenceData
    (VO relatives taken from them) or ``(sequence_id, n_frames)`` tuples with
    global VO poses per frame in ``vo_estimates[sequence_id]``.
    """
    min_rot = math.radians(min_rotation_deg)
    pairs = []
    for seq in sequences:
        if isinstance(seq, SequenceData):
            sid, rels = seq.sequence_id, seq.vo_relatives
        else:
            sid, n_frames = seq
            poses = vo_estimates[sid]
            if len(poses) != n_frames:
                raise ValueError(f"sequence {sid}: {len(poses)} VO poses for {n_frames} frames")
            rels = [poses[i + 1].inverse() @ poses[i] for i in range(n_frames - 1)]
        for t, rel in enumerate(rels):
            if np.linalg.norm(rel.translation) >= min_translation or rotation_magnitude(rel) >= min_rot:
                pairs.append(SamplePair(sid, t, t + 1, rel, intrinsics_ref=sid))
    return pairs


def leave_one_out(sequence_ids: Sequence[str], test_id: str, validation_id: str) -> list[str]:
    """Training ids for one fold: everything except the test and validation sequence."""
    if test_id == validation_id:
        raise ValueError("test and validation sequences must differ")
    for s in (test_id, validation_id):
        if s not in sequence_ids:
            raise ValueError(f"unknown sequence {s!r}")
    return [s for s in sequence_ids if s not in (test_id, validation_id)]


# --- optimizer ---

def init_adam_state(params: dict[str, torch.Tensor]) -> dict:
    return {
        "step": 0,
        "m": {k: torch.zeros_like(p) for k, p in params.items()},
        "v": {k: torch.zeros_like(p) for k, p in params.items()},
    }


def adam_step(params: dict, grads: dict, state: dict, lr: float, weight_decay: float = 0.0,
              decay: set | None = None, betas=(0.9, 0.999), eps: float = 1e-8) -> dict:
    """One Adam update in place, with bias correction.

    Weight decay is classical L2 added to the gradient, applied to the names
    in ``decay`` (all parameters when None).
    """
    b1, b2 = betas
    state["step"] += 1
    step = state["step"]
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if weight_decay and (decay is None or name in decay):
                g = g + weight_decay * p
            m = state["m"][name].mul_(b1).add_(g, alpha=1 - b1)
            v = state["v"][name].mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = m / (1 - b1**step)
            v_hat = v / (1 - b2**step)
            p.sub_(lr * m_hat / (v_hat.sqrt() + eps))
    return state


# --- forward pass on pairs ---

def _poses_to_tensors(poses: Sequence[Pose], dtype):
    rot = torch.tensor(np.array([p.rotation for p in poses]), dtype=dtype)
    trans = torch.tensor(np.array([p.translation for p in poses]), dtype=dtype)
    return rot, trans


def _intrinsics_tensor(Ks: Sequence[Intrinsics], dtype):
    return torch.tensor([[k.fu, k.fv, k.cu, k.cv] for k in Ks], dtype=dtype)


@dataclass
class Batch:
    source: torch.Tensor
    target: torch.Tensor
    flow: torch.Tensor
    vo_twist: torch.Tensor
    vo_rot: torch.Tensor
    vo_trans: torch.Tensor
    vo_angle: torch.Tensor
    K: torch.Tensor


def make_batch(items: Sequence[tuple[SequenceData, int, Pose]], dtype=torch.float32) -> Batch:
    """items: (sequence, source frame index, VO prior for that pair)."""
    src = torch.from_numpy(np.stack([s.images[t] for s, t, _ in items])).to(dtype)
    tgt = torch.from_numpy(np.stack([s.images[t + 1] for s, t, _ in items])).to(dtype)
    flow = torch.from_numpy(np.stack([s.flows[t] for s, t, _ in items])).to(dtype)
    vos = [vo for _, _, vo in items]
    twist = torch.tensor(np.array([log_se3(vo).vector() for vo in vos]), dtype=dtype)
    rot, trans = _poses_to_tensors(vos, dtype)
    angles = torch.tensor([rotation_magnitude(vo) for vo in vos], dtype=dtype)
    K = _intrinsics_tensor([s.intrinsics for s, _, _ in items], dtype)
    return Batch(src, tgt, flow, twist, rot, trans, angles, K)


def compose_correction(xi, vo_rot, vo_trans):
    """T* = exp(xi) . T_vo for a batch."""
    rc, tc = ad.se3_exp(xi)
    rot = rc @ vo_rot
    trans = (rc @ vo_trans.unsqueeze(-1)).squeeze(-1) + tc
    return rot, trans


def run_batch(net: Corrector, batch: Batch, cfg: TrainConfig, generator=None):
    """Forward pass plus loss. Returns (loss, output, recon, valid)."""
    out = net(batch.source, batch.target, batch.flow, batch.vo_twist, generator=generator)
    rot, trans = compose_correction(out.correction, batch.vo_rot, batch.vo_trans)
    depth = depth_from_inverse(out.inverse_depth, cfg.eps_inv)
    recon, valid = warp_batch(batch.target, depth, rot, trans, batch.K)
    loss, _ = batch_loss(recon, batch.source, out.mask, valid, batch.vo_angle, cfg.loss)
    return loss, out, recon, valid


def loss_prior(seq: SequenceData, t: int, cfg: TrainConfig) -> Pose:
    """VO prior used in the loss; monocular priors are rescaled to GT when enabled."""
    vo = seq.vo_relatives[t]
    if cfg.mode == "monocular" and cfg.rescale_monocular and seq.gt_relatives is not None:
        gt = seq.gt_relatives[t]
        n = float(np.linalg.norm(vo.translation))
        if n > 0:
            vo = Pose(vo.rotation, vo.translation * (np.linalg.norm(gt.translation) / n))
    return vo


def prior_relatives(seq: SequenceData, cfg: TrainConfig) -> list[Pose]:
    if cfg.mode == "monocular" and cfg.rescale_monocular and seq.gt_relatives is not None:
        return rescale_monocular(seq.vo_relatives, compound(seq.gt_relatives))
    return list(seq.vo_relatives)


def predict_corrections(net: Corrector, seq: SequenceData, cfg: TrainConfig, batch_size: int = 32) -> list[Twist]:
    """Eval-mode corrections for every consecutive pair of a sequence."""
    net.eval()
    priors = prior_relatives(seq, cfg)
    out = []
    with torch.no_grad():
        for start in range(0, len(seq), batch_size):
            idx = range(start, min(start + batch_size, len(seq)))
            batch = make_batch([(seq, t, priors[t]) for t in idx])
            xi = net(batch.source, batch.target, batch.flow, batch.vo_twist).correction.double().numpy()
            out.extend(Twist.from_vector(x) for x in xi)
    return out


def corrected_trajectory(net: Corrector, seq: SequenceData, cfg: TrainConfig) -> list[Pose]:
    corr = predict_corrections(net, seq, cfg)
    rels = correct_sequence(prior_relatives(seq, cfg), corr, rotation_only=cfg.corrections_rotation_only)
    return compound(rels)


# --- training ---

@dataclass
class EpochRecord:
    epoch: int
    val_loss: float
    grad_loss: float | None
    loop_closures: int
    checkpoint_path: str
    train_loss: float = float("nan")


def validate(net: Corrector, seq: SequenceData, pairs: Sequence[SamplePair], cfg: TrainConfig, batch_size: int = 32):
    """Validation loss, mean gradient-criterion loss, and loop closures of the corrected trajectory."""
    net.eval()
    losses, weights, grad_losses = [], [], []
    with torch.no_grad():
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start:start + batch_size]
            batch = make_batch([(seq, p.source, loss_prior(seq, p.source, cfg)) for p in chunk])
            loss, _, recon, valid = run_batch(net, batch, cfg)
            losses.append(loss.item())
            weights.append(len(chunk))
            for i in range(len(chunk)):
                g = gradient_criterion_loss(
                    recon[i].permute(1, 2, 0).double().numpy(),
                    batch.source[i].permute(1, 2, 0).double().numpy(),
                    cfg.loss.gamma_grad,
                    valid[i].numpy(),
                )
                if g is not None:
                    grad_losses.append(g)
    val_loss = float(np.average(losses, weights=weights)) if losses else float("nan")
    grad_loss = float(np.mean(grad_losses)) if grad_losses else None
    traj = corrected_trajectory(net, seq, cfg)
    loops = count_loop_closures(traj, cfg.loop_trans_thresh, cfg.loop_rot_thresh, cfg.loop_forward_min)
    return val_loss, grad_loss, loops, traj


def write_records(path, records: Sequence[EpochRecord]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_COLUMNS)
    for r in records:
        w.writerow([r.epoch, repr(r.val_loss), "" if r.grad_loss is None else repr(r.grad_loss), r.loop_closures,
                    r.checkpoint_path])
    atomic_write_text(path, buf.getvalue())


def read_records(path) -> list[EpochRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(EpochRecord(
                int(row["epoch"]), float(row["val_loss"]),
                float(row["grad_loss"]) if row["grad_loss"] else None,
                int(row["loop_closures"]), row["checkpoint_path"],
            ))
    return out


def train(
    cfg: TrainConfig,
    train_sequences: Sequence[SequenceData],
    validation: SequenceData,
    out_dir,
    net: Corrector | None = None,
    on_epoch: Callable[[EpochRecord, Corrector], None] | None = None,
) -> list[EpochRecord]:
    """Train for ``cfg.max_epochs`` epochs, checkpointing and validating after each."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.reproducible:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(cfg.seed)
    pairs = build_dataset(train_sequences, min_translation=cfg.min_translation, min_rotation_deg=cfg.min_rotation_deg)
    val_pairs = build_dataset([validation], min_translation=cfg.min_translation, min_rotation_deg=cfg.min_rotation_deg)
    if not pairs:
        raise ValueError("no training pairs survive the motion filter")
    if not val_pairs:
        raise ValueError("no validation pairs survive the motion filter")
    by_id = {s.sequence_id: s for s in train_sequences}
    if net is None:
        net = init_params(cfg.seed, cfg.width, cfg.input_size, correction_scale=cfg.correction_scale,
                          dropout_p=cfg.dropout_p)
    params = dict(net.named_parameters())
    decay = {n for n, p in params.items() if any(p is w for w in net.dense_weights())}
    state = init_adam_state(params)
    shuffle_rng = np.random.default_rng(cfg.seed)
    dropout_gen = torch.Generator().manual_seed(cfg.seed + 1)
    records: list[EpochRecord] = []
    for epoch in range(1, cfg.max_epochs + 1):
        lr = lr_at_epoch(cfg, epoch - 1)
        order = shuffle_rng.permutation(len(pairs))
        net.train()
        total, count = 0.0, 0
        t0 = time.time()
        for start in range(0, len(order), cfg.batch_size):
            chunk = [pairs[i] for i in order[start:start + cfg.batch_size]]
            items = [(by_id[p.sequence_id], p.source, loss_prior(by_id[p.sequence_id], p.source, cfg)) for p in chunk]
            batch = make_batch(items)
            with ad.Tape() as tape:
                loss, *_ = run_batch(net, batch, cfg, generator=dropout_gen)
            if not math.isfinite(loss.item()):
                raise TrainingDivergedError(f"epoch {epoch}, batch at {start}: loss is {loss.item()}")
            net.zero_grad(set_to_none=True)
            tape.backward(loss)
            grads = {n: p.grad for n, p in params.items()}
            adam_step(params, grads, state, lr, cfg.weight_decay, decay)
            total += loss.item() * len(chunk)
            count += len(chunk)
        train_loss = total / count
        val_loss, grad_loss, loops, _ = validate(net, validation, val_pairs, cfg)
        ckpt = out_dir / f"epoch_{epoch:03d}.ckpt"
        save_checkpoint(ckpt, net, state, meta={"epoch": epoch, "seed": cfg.seed, "mode": cfg.mode})
        rec = EpochRecord(epoch, val_loss, grad_loss, loops, str(ckpt), train_loss)
        records.append(rec)
        write_records(out_dir / "records.csv", records)
        log.info("epoch %d lr %.2e train %.5f val %.5f grad %s loops %d (%.1fs)", epoch, lr, train_loss, val_loss,
                 "n/a" if grad_loss is None else f"{grad_loss:.5f}", loops, time.time() - t0)
        if on_epoch is not None:
            on_epoch(rec, net)
    return records


# --- epoch selection ---

def select_epoch_gradient(records: Sequence) -> int:
    """Epoch with the lowest gradient-criterion loss; ties go to the earliest.

    ``records`` are EpochRecords or plain per-epoch values (None = no pixels).
    """
    vals = [r.grad_loss if isinstance(r, EpochRecord) else r for r in records]
    epochs = [r.epoch if isinstance(r, EpochRecord) else i + 1 for i, r in enumerate(records)]
    best = None
    for e, v in zip(epochs, vals):
        if v is None:
            continue
        if best is None or v < best[1]:
            best = (e, v)
    if best is None:
        raise ValueError("no epoch has any pixel above the gradient threshold")
    return best[0]


def select_epoch_loopclosure(records: Sequence) -> int:
    """Epoch with the most loop closures in its corrected validation trajectory; ties go earliest.

    ``records`` are EpochRecords or plain per-epoch counts.
    """
    counts = [r.loop_closures if isinstance(r, EpochRecord) else r for r in records]
    epochs = [r.epoch if isinstance(r, EpochRecord) else i + 1 for i, r in enumerate(records)]
    if not counts:
        raise ValueError("no epochs to select from")
    best = int(np.argmax(counts))
    if counts[best] == 0:
        log.warning("no loop closures in any epoch; the validation sequence may not revisit its path")
    return epochs[best]


def count_trajectory_loops(traj: Sequence[Pose], cfg: TrainConfig) -> int:
    return count_loop_closures(traj, cfg.loop_trans_thresh, cfg.loop_rot_thresh, cfg.loop_forward_min)
