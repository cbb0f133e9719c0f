"""Dataset ingestion (KITTI layout and generic manifests) and synthetic scenes.

Synthetic scenes are sets of textured rectangles in a world frame. Each frame
is rendered by casting the pinhole rays of ``imaging.backproject`` into the
world and sampling the plane textures with ``imaging.bilinear_sample``, so
rendering and training use one camera model.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import imaging
from .evaluation import compound, relatives_from_trajectory
from .fileio import atomic_write_text
from .geometry import Pose, Twist, exp_se3, read_poses, write_poses
from .imaging import DepthMap, ImageBuffer, Intrinsics

DATA_ROOT_ENV = "DPC_DATA_ROOT"
IMAGE_SUFFIXES = (".ppm", ".pgm", ".png")
BACKGROUND = 0.5
FAR_DEPTH = 1000.0


class SceneError(ValueError):
    pass


# --- manifests and ingestion ---

@dataclass
class SequenceManifest:
    sequence_id: str
    image_dir: Path
    intrinsics: Path
    vo_poses: Path
    gt_poses: Path | None = None
    flow_dir: Path | None = None

    @classmethod
    def read(cls, path) -> "SequenceManifest":
        """Parse a ``key = value`` manifest; relative paths resolve against its directory."""
        path = Path(path)
        if not path.is_absolute() and not path.exists() and os.environ.get(DATA_ROOT_ENV):
            path = Path(os.environ[DATA_ROOT_ENV]) / path
        base = path.parent
        kv = {}
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            kv[k] = v

        def p(key, required=True):
            if key not in kv:
                if required:
                    raise ValueError(f"{path}: missing key {key!r}")
                return None
            q = Path(kv[key])
            return q if q.is_absolute() else base / q

        return cls(
            sequence_id=kv.get("sequence_id", base.name),
            image_dir=p("image_dir"),
            intrinsics=p("intrinsics"),
            vo_poses=p("vo_poses"),
            gt_poses=p("gt_poses", required=False),
            flow_dir=p("flow_dir", required=False),
        )

    def write(self, path) -> None:
        base = Path(path).parent

        def rel(q):
            try:
                return str(Path(q).relative_to(base))
            except ValueError:
                return str(q)

        lines = [f"sequence_id = {self.sequence_id}", f"image_dir = {rel(self.image_dir)}",
                 f"intrinsics = {rel(self.intrinsics)}", f"vo_poses = {rel(self.vo_poses)}"]
        if self.gt_poses is not None:
            lines.append(f"gt_poses = {rel(self.gt_poses)}")
        if self.flow_dir is not None:
            lines.append(f"flow_dir = {rel(self.flow_dir)}")
        atomic_write_text(path, "\n".join(lines) + "\n")


@dataclass
class RawSequence:
    """Frames in [0, 1] with global poses (camera in start frame)."""

    sequence_id: str
    images: list[ImageBuffer]
    intrinsics: Intrinsics
    vo_poses: list[Pose]
    gt_poses: list[Pose] | None = None
    flow_dir: Path | None = None
    frame_ids: list[str] = field(default_factory=list)


def list_images(directory) -> list[Path]:
    files = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise FileNotFoundError(f"no images in {directory}")
    return files


def read_image(path) -> ImageBuffer:
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image  # optional: KITTI ships PNG frames

        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB" if im.mode not in ("L", "I;16") else "L"), dtype=np.float64)
        return ImageBuffer(arr / 255.0)
    return imaging.read_pnm(path)


def read_intrinsics_any(path, image_size=None) -> Intrinsics:
    """Either the one-line 'f_u f_v c_u c_v H W' file or a KITTI calib.txt (uses P2)."""
    text = Path(path).read_text()
    if ":" not in text:
        return imaging.read_intrinsics(path)
    rows = dict(line.split(":", 1) for line in text.splitlines() if ":" in line)
    key = "P2" if "P2" in rows else sorted(rows)[0]
    p = np.array([float(x) for x in rows[key].split()]).reshape(3, 4)
    if image_size is None:
        raise ValueError(f"{path}: KITTI calibration needs the image size")
    h, w = image_size
    return Intrinsics(p[0, 0], p[1, 1], p[0, 2], p[1, 2], h, w)


def ingest_kitti(manifest: SequenceManifest, as_gray: bool = False) -> RawSequence:
    """Load one sequence: images, intrinsics, VO and (optional) GT pose files."""
    files = list_images(manifest.image_dir)
    images = [read_image(f) for f in files]
    if as_gray:
        images = [ImageBuffer(im.gray()) for im in images]
    h, w = images[0].height, images[0].width
    K = read_intrinsics_any(manifest.intrinsics, (h, w))
    vo = read_poses(manifest.vo_poses)
    if len(vo) != len(images):
        raise ValueError(f"{manifest.vo_poses}: {len(vo)} poses for {len(images)} frames")
    gt = None
    if manifest.gt_poses is not None:
        gt = read_poses(manifest.gt_poses)
        if len(gt) != len(images):
            raise ValueError(f"{manifest.gt_poses}: {len(gt)} poses for {len(images)} frames")
    return RawSequence(manifest.sequence_id, images, K, vo, gt, manifest.flow_dir, [f.stem for f in files])


# --- synthetic scenes ---

@dataclass
class TexturedPlane:
    origin: np.ndarray
    axis_u: np.ndarray  # unit vector along texture columns
    axis_v: np.ndarray  # unit vector along texture rows
    half_u: float
    half_v: float
    texture: np.ndarray  # (Ht, Wt, C)
    texel: float  # metres per texel

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.axis_u, self.axis_v)


def random_texture(rng: np.random.Generator, shape, sigmas=(3.0, 8.0), channels: int = 3) -> np.ndarray:
    """Band-limited random field in [0.05, 0.95]: sums of smoothed white noise."""
    h, w = shape

    def field_():
        f = sum(ndimage.gaussian_filter(rng.standard_normal((h, w)), s, mode="wrap") * s for s in sigmas)
        return (f - f.mean()) / f.std()

    lum = field_()
    chans = [0.8 * lum + 0.6 * field_() for _ in range(channels)]
    tex = np.stack(chans, axis=-1)
    lo, hi = tex.min(), tex.max()
    return 0.05 + 0.9 * (tex - lo) / (hi - lo)


@dataclass
class SyntheticSceneConfig:
    seed: int = 0
    height: int = 96
    width: int = 128
    focal: float | None = None  # pixels; default 0.8 * width
    depth_model: str = "plane"  # plane | multiplane | room
    plane_depth: float = 10.0
    strip_depths: tuple = (8.0, 12.0, 16.0)
    room_half: float = 30.0
    room_center: tuple = (0.0, 0.0, 0.0)
    texel: float = 0.1
    texture_sigmas: tuple = (3.0, 8.0)
    motion: list = field(default_factory=list)  # camera motions: pose of frame t+1 in frame t
    start_pose: Pose | None = None  # camera 0 in the world frame
    vo_bias: Twist | list | None = None
    vo_noise_std: tuple = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    noise_seed: int | None = None

    def __post_init__(self):
        if self.height < 32 or self.width < 32:
            raise ValueError("synthetic images must be at least 32x32")
        if self.depth_model not in ("plane", "multiplane", "room"):
            raise ValueError(f"unknown depth model {self.depth_model!r}")
        if self.plane_depth <= 0 or min(self.strip_depths) <= 0 or self.room_half <= 0:
            raise ValueError("scene depths must be positive")

    def intrinsics(self) -> Intrinsics:
        f = self.focal or 0.8 * self.width
        return Intrinsics(f, f, (self.width - 1) / 2.0, (self.height - 1) / 2.0, self.height, self.width)


@dataclass
class SyntheticSequence:
    images: list[ImageBuffer]
    depths: list[DepthMap]
    gt_relatives: list[Pose]
    vo_relatives: list[Pose]
    intrinsics: Intrinsics
    world_poses: list[Pose]

    @property
    def gt_poses(self) -> list[Pose]:
        return compound(self.gt_relatives)

    @property
    def vo_poses(self) -> list[Pose]:
        return compound(self.vo_relatives)


def _extent_for(cfg: SyntheticSceneConfig, poses: Sequence[Pose]) -> float:
    pos = np.array([p.translation for p in poses])
    return float(np.max(np.abs(pos))) if len(pos) else 0.0


def build_planes(cfg: SyntheticSceneConfig, world_poses: Sequence[Pose]) -> list[TexturedPlane]:
    rng = np.random.default_rng(cfg.seed)
    K = cfg.intrinsics()
    ex, ey, ez = np.eye(3)
    half_fov = math.atan2(max(K.width, K.height) / 2.0, K.fu)
    reach = _extent_for(cfg, world_poses)

    def plane(origin, au, av, hu, hv):
        shape = (int(math.ceil(2 * hv / cfg.texel)) + 2, int(math.ceil(2 * hu / cfg.texel)) + 2)
        tex = random_texture(rng, shape, cfg.texture_sigmas)
        return TexturedPlane(np.asarray(origin, float), au, av, hu, hv, tex, cfg.texel)

    if cfg.depth_model == "plane":
        half = (cfg.plane_depth + reach) * math.tan(half_fov) * 1.5 + reach + 1.0
        return [plane((0, 0, cfg.plane_depth), ex, ey, half, half)]
    if cfg.depth_model == "multiplane":
        depths = sorted(cfg.strip_depths)
        far = depths[-1]
        half = (far + reach) * math.tan(half_fov) * 1.5 + reach + 1.0
        planes = [plane((0, 0, far), ex, ey, half, half)]  # backdrop
        near = depths[:-1]
        width = 2 * half / (2 * len(near) + 1)
        for i, d in enumerate(near):
            x0 = -half + (2 * i + 1.5) * width
            planes.append(plane((x0, 0, d), ex, ey, width / 2, half))
        return planes
    # room: four vertical walls around room_center, facing inward
    c = np.asarray(cfg.room_center, float)
    L = cfg.room_half
    hv = L * 0.75
    return [
        plane(c + L * ez, ex, ey, L, hv),
        plane(c - L * ez, -ex, ey, L, hv),
        plane(c + L * ex, -ez, ey, L, hv),
        plane(c - L * ex, ez, ey, L, hv),
    ]


def render(planes: Sequence[TexturedPlane], world_from_cam: Pose, K: Intrinsics):
    """Nearest-hit ray cast. Returns (image, depth, hit mask)."""
    u, v = imaging.pixel_grid(K.height, K.width)
    rays_cam = imaging.backproject(u, v, np.ones_like(u), K)  # z = 1, so ray length = depth
    rays = rays_cam @ world_from_cam.rotation.T
    origin = world_from_cam.translation
    best = np.full(u.shape, np.inf)
    img = np.full(u.shape + (planes[0].texture.shape[2],), BACKGROUND)
    for pl in planes:
        n = pl.normal
        denom = rays @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(np.abs(denom) > 1e-12, ((pl.origin - origin) @ n) / denom, np.inf)
        hit_pts = origin + s[..., None] * rays
        rel = hit_pts - pl.origin
        a = rel @ pl.axis_u
        b = rel @ pl.axis_v
        hit = (s > imaging.MIN_DEPTH) & (np.abs(a) <= pl.half_u) & (np.abs(b) <= pl.half_v) & (s < best)
        if not hit.any():
            continue
        th, tw = pl.texture.shape[:2]
        col = a / pl.texel + (tw - 1) / 2.0
        row = b / pl.texel + (th - 1) / 2.0
        vals, _ = imaging.bilinear_sample(pl.texture, col, row)
        img[hit] = vals[hit]
        best = np.where(hit, s, best)
    hit = np.isfinite(best)
    depth = np.where(hit, best, FAR_DEPTH)
    return ImageBuffer(img), DepthMap(depth), hit


def _bias_list(bias, n: int) -> list[Twist]:
    if bias is None:
        return [Twist.zero()] * n
    if isinstance(bias, Twist):
        return [bias] * n
    if len(bias) != n:
        raise ValueError(f"{len(bias)} bias twists for {n} motions")
    return list(bias)


def generate_synthetic(cfg: SyntheticSceneConfig) -> SyntheticSequence:
    """Render a scripted camera path and build biased, noisy VO relatives.

    GT relative T_{t+1,t} is the inverse of the scripted camera motion; the VO
    relative is exp(bias + noise) . T_{t+1,t}.
    """
    K = cfg.intrinsics()
    motions = [exp_se3(m) if isinstance(m, Twist) else m for m in cfg.motion]
    world = [cfg.start_pose or Pose.identity()]
    for m in motions:
        world.append(world[-1] @ m)
    planes = build_planes(cfg, world)
    images, depths = [], []
    for i, w in enumerate(world):
        img, depth, hit = render(planes, w, K)
        if not hit.any():
            raise SceneError(f"frame {i}: the camera sees none of the scene")
        images.append(img)
        depths.append(depth)
    gt_rel = [m.inverse() for m in motions]
    noise_rng = np.random.default_rng(cfg.seed + 1 if cfg.noise_seed is None else cfg.noise_seed)
    std = np.asarray(cfg.vo_noise_std, dtype=np.float64)
    vo_rel = []
    for rel, b in zip(gt_rel, _bias_list(cfg.vo_bias, len(gt_rel))):
        noise = noise_rng.standard_normal(6) * std
        vo_rel.append(exp_se3(Twist.from_vector(b.vector() + noise)) @ rel)
    return SyntheticSequence(images, depths, gt_rel, vo_rel, K, world)


# --- motion scripts ---

def circle_motion(circumference: float, frames_per_lap: int, laps: float = 1.0, direction: int = 1,
                  wobble: float = 0.0, seed: int = 0) -> list[Twist]:
    """Constant-speed turning motion along a horizontal circle.

    ``wobble`` adds a smooth relative variation of the yaw rate (the path
    then no longer closes exactly).
    """
    n = int(round(frames_per_lap * laps))
    ds = circumference / frames_per_lap
    dyaw = direction * 2 * math.pi / frames_per_lap
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 2 * math.pi)
    out = []
    for k in range(n):
        rate = dyaw * (1.0 + wobble * math.sin(2 * math.pi * k / max(n, 1) * 2 + phase))
        out.append(Twist((0.0, 0.0, ds), (0.0, rate, 0.0)))
    return out


def racetrack_motion(straight: float, radius: float, frames_per_lap: int, laps: float = 1.0,
                     direction: int = 1) -> list[Twist]:
    """Constant-speed lap of two straights joined by half circles.

    The lap starts at the beginning of a straight. A constant yaw error does
    not keep this path closed, unlike a pure circle.
    """
    perimeter = 2 * straight + 2 * math.pi * radius
    steps = [perimeter / frames_per_lap] * int(round(frames_per_lap * laps))
    return track_motion(straight, radius, steps, direction)


def track_motion(straight: float, radius: float, steps: Sequence[float], direction: int = 1) -> list[Twist]:
    """Racetrack driven with the given per-frame path lengths (metres)."""
    if straight < 0 or radius <= 0:
        raise ValueError("straight must be >= 0 and radius > 0")
    perimeter = 2 * straight + 2 * math.pi * radius
    arc = math.pi * radius
    curves = [(straight, straight + arc), (2 * straight + arc, perimeter)]
    curves += [(a + perimeter, b + perimeter) for a, b in curves]
    out = []
    s = 0.0
    for ds in steps:
        if ds <= 0:
            raise ValueError("steps must be positive")
        s0 = s % perimeter
        s1 = s0 + ds
        bent = sum(max(0.0, min(s1, b) - max(s0, a)) for a, b in curves)
        out.append(Twist((0.0, 0.0, ds), (0.0, direction * bent / radius, 0.0)))
        s += ds
    return out


def varying_speed_laps(perimeter: float, frames_first_lap: int, laps: int = 2, swing: float = 0.5) -> list[float]:
    """Per-frame steps: a constant-speed first lap, then laps whose speed varies with position.

    On later laps the speed is ``base * (1 + swing * sin(2 pi s / perimeter))``
    so revisits of different places happen after different numbers of frames.
    """
    if not 0.0 <= swing < 1.0:
        raise ValueError("swing must be in [0, 1)")
    base = perimeter / frames_first_lap
    steps = [base] * frames_first_lap
    s, end = 0.0, perimeter * (laps - 1)
    while s < end - 1e-9:
        ds = min(base * (1.0 + swing * math.sin(2 * math.pi * s / perimeter)), end - s)
        steps.append(ds)
        s += ds
    return steps


def racetrack_start(straight: float, radius: float, direction: int = 1, center=(0.0, 0.0, 0.0)) -> Pose:
    """Start pose for ``racetrack_motion`` so the track is centred on ``center``."""
    c = np.asarray(center, float)
    return Pose.from_translation(c + np.array([-direction * radius, 0.0, -straight / 2.0]))


def straight_motion(step: float, frames: int) -> list[Twist]:
    return [Twist((0.0, 0.0, step), (0.0, 0.0, 0.0)) for _ in range(frames)]


def circle_start(radius: float, direction: int = 1, center=(0.0, 0.0, 0.0)) -> Pose:
    """Start pose such that ``circle_motion`` orbits ``center``.

    A right turn (direction=+1, positive yaw about camera y) curves toward +x.
    """
    c = np.asarray(center, float)
    return Pose.from_translation(c - direction * radius * np.array([1.0, 0.0, 0.0]))


def yaw_bias(degrees_per_frame: float) -> Twist:
    return Twist((0.0, 0.0, 0.0), (0.0, math.radians(degrees_per_frame), 0.0))


def vary_speed(motion: Sequence[Twist], seed: int = 0, lo: float = 0.5, hi: float = 2.0) -> list[Twist]:
    """Scale each frame's translation by an independent uniform factor in [lo, hi].

    Rotations are kept, so the path bends differently but the turn per frame
    (and hence the rotation statistics) is unchanged.
    """
    rng = np.random.default_rng(seed)
    return [Twist(np.asarray(x.translational) * rng.uniform(lo, hi), x.rotational) for x in motion]


def _desk_config(seed: int, motion, start: Pose, bias_deg: float, noise_rad: float, **kw) -> SyntheticSceneConfig:
    return SyntheticSceneConfig(
        seed=seed, depth_model="room", motion=motion, start_pose=start, texel=0.25, texture_sigmas=(4.0, 12.0),
        vo_bias=yaw_bias(bias_deg), vo_noise_std=(0, 0, 0, 0, noise_rad, 0), **kw,
    )


def desk_scenes(seed: int = 0, bias_deg: float = 0.3, noise_rad: float = 5e-4, **kw) -> dict[str, tuple[str, SyntheticSequence]]:
    """Small room-scale dataset for end-to-end runs on a CPU.

    Three training drives at irregular speed, a validation drive of two laps
    with a position-dependent speed on the second (so loop closures are found
    only when the yaw drift is small), and a constant-speed test lap. VO
    carries a constant yaw bias plus white yaw noise.
    Returns ``{sequence_id: (role, sequence)}``.
    """
    s = seed
    val_perimeter = 2 * 20 + 2 * math.pi * 10
    plan = {
        "a": ("train", vary_speed(circle_motion(2 * math.pi * 14, 90, 0.75, 1, 0.3, 1), s + 1), circle_start(14, 1)),
        "b": ("train", vary_speed(racetrack_motion(16, 12, 110, 0.65, -1), s + 2), racetrack_start(16, 12, -1)),
        "c": ("train", vary_speed(racetrack_motion(24, 9, 90, 0.75, 1), s + 3), racetrack_start(24, 9, 1)),
        "val": ("val", track_motion(20, 10, varying_speed_laps(val_perimeter, 200, 2, 0.5), 1), racetrack_start(20, 10, 1)),
        "test": ("test", racetrack_motion(18, 11, 100, 1, -1), racetrack_start(18, 11, -1)),
    }
    out = {}
    for k, (sid, (role, motion, start)) in enumerate(plan.items()):
        cfg = _desk_config(s + k + 1, motion, start, bias_deg, noise_rad, **kw)
        out[sid] = (role, generate_synthetic(cfg))
    return out


# --- writing datasets ---

def write_sequence(directory, seq_id: str, seq: SyntheticSequence) -> SequenceManifest:
    """Write frames (PPM/PGM), intrinsics, GT and VO global poses, and a manifest."""
    d = Path(directory)
    img_dir = d / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    ext = ".ppm" if seq.images[0].channels == 3 else ".pgm"
    for i, im in enumerate(seq.images):
        imaging.write_pnm(img_dir / f"{i:06d}{ext}", im)
    imaging.write_intrinsics(d / "intrinsics.txt", seq.intrinsics)
    write_poses(d / "gt_poses.txt", seq.gt_poses)
    write_poses(d / "vo_poses.txt", seq.vo_poses)
    man = SequenceManifest(seq_id, img_dir, d / "intrinsics.txt", d / "vo_poses.txt", d / "gt_poses.txt")
    man.write(d / "manifest.txt")
    return man


def relatives(poses: Sequence[Pose]) -> list[Pose]:
    return relatives_from_trajectory(poses)
