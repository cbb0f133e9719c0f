"""Corrector network: pose correction, inverse depth and explainability mask.

Input is the whitened source and target images stacked with the optical
flow between them (3 + 3 + 2 channels). A five-block strided encoder feeds
three heads: a dense pose head that also sees the VO prior twist, an
inverse-depth decoder and an explainability decoder.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import autodiff as ad
from .fileio import atomic_write_bytes

ENC_KERNELS = (7, 5, 3, 3, 3)
ENC_CHANNELS = (16, 32, 64, 128, 256)
DEC_CHANNELS = (128, 64, 32, 16, 8)
# decoder blocks (0-based) whose output also emits an inverse-depth prediction
# that is concatenated into the next block's input
DEPTH_SIDE_OUTPUTS = (1, 2, 3)
DENSE_UNITS = (512, 128)
FLOW_CLIP = 32.0
MASK_EPS = 1e-6

CKPT_MAGIC = b"DPCCKPT\0"
CKPT_VERSION = 1


def channels(base: int, width: float) -> int:
    return max(1, int(round(base * width)))


def conv_out(n: int, k: int, stride: int = 2) -> int:
    return (n + 2 * (k // 2) - k) // stride + 1


def _uniform_(t: torch.Tensor, fan_in: float, gen: torch.Generator, gain: float = 2.0) -> None:
    # gain 2 for layers feeding a ReLU, 1 for linear outputs
    bound = math.sqrt(3.0 * gain / fan_in)
    with torch.no_grad():
        t.copy_((torch.rand(t.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)


class BatchNorm(nn.Module):
    def __init__(self, c: int, momentum: float = 0.1):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(c))
        self.bias = nn.Parameter(torch.zeros(c))
        self.register_buffer("running_mean", torch.zeros(c))
        self.register_buffer("running_var", torch.ones(c))
        self.momentum = momentum

    def forward(self, x):
        return ad.batch_norm(
            x, self.weight, self.bias, self.running_mean, self.running_var, self.training, self.momentum
        )


class Conv(nn.Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, transposed: bool = False):
        super().__init__()
        shape = (cin, cout, k, k) if transposed else (cout, cin, k, k)
        self.weight = nn.Parameter(torch.empty(shape))
        self.bias = nn.Parameter(torch.zeros(cout))
        self.stride = stride
        self.transposed = transposed
        self.k = k

    def fan_in(self) -> float:
        cin = self.weight.shape[0] if self.transposed else self.weight.shape[1]
        return cin * self.k * self.k / (self.stride**2 if self.transposed else 1)

    def forward(self, x):
        if self.transposed:
            return ad.conv_transpose2d(x, self.weight, self.bias, self.stride, (self.k - self.stride) // 2)
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.k // 2)


class Dense(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(cout, cin))
        self.bias = nn.Parameter(torch.zeros(cout))

    def forward(self, x):
        return ad.linear(x, self.weight, self.bias)


@dataclass
class CorrectorOutput:
    correction: torch.Tensor  # (N, 6), translation first
    inverse_depth: torch.Tensor  # (N, H, W)
    mask: torch.Tensor  # (N, H, W)

    def depth(self, eps_inv: float = 0.01) -> torch.Tensor:
        return depth_from_inverse(self.inverse_depth, eps_inv)


def depth_from_inverse(inv, eps_inv: float = 0.01):
    if isinstance(inv, torch.Tensor):
        return 1.0 / (inv + eps_inv)
    inv = np.asarray(inv, dtype=np.float64)
    if np.any(inv < 0):
        raise ValueError("inverse depth must be nonnegative")
    return 1.0 / (inv + eps_inv)


class Corrector(nn.Module):
    def __init__(
        self,
        width: float = 0.25,
        input_size: tuple[int, int] = (96, 128),
        correction_scale: float = 0.01,
        dropout_p: float = 0.5,
        inv_depth_bias: float = 0.05,
    ):
        super().__init__()
        if width <= 0:
            raise ValueError("width must be positive")
        self.width = width
        self.input_size = tuple(input_size)
        self.correction_scale = correction_scale
        self.dropout_p = dropout_p
        self.inv_depth_bias = inv_depth_bias

        enc_c = [channels(c, width) for c in ENC_CHANNELS]
        dec_c = [channels(c, width) for c in DEC_CHANNELS]
        self.sizes = [tuple(input_size)]
        for k in ENC_KERNELS:
            h, w = self.sizes[-1]
            self.sizes.append((conv_out(h, k), conv_out(w, k)))

        cin = 8
        self.encoder = nn.ModuleList()
        self.enc_bn = nn.ModuleList()
        for c, k in zip(enc_c, ENC_KERNELS):
            self.encoder.append(Conv(cin, c, k, stride=2))
            self.enc_bn.append(BatchNorm(c))
            cin = c

        bh, bw = self.sizes[-1]
        flat = enc_c[-1] * bh * bw
        self.pose_fc = nn.ModuleList(
            [Dense(flat + 6, DENSE_UNITS[0]), Dense(DENSE_UNITS[0], DENSE_UNITS[1]), Dense(DENSE_UNITS[1], 6)]
        )

        self.depth_dec = nn.ModuleList()
        self.depth_side = nn.ModuleDict()
        cin = enc_c[-1]
        for i, c in enumerate(dec_c):
            self.depth_dec.append(Conv(cin, c, 4, stride=2, transposed=True))
            cin = c
            if i in DEPTH_SIDE_OUTPUTS:
                self.depth_side[str(i)] = Conv(c, 1, 3)
                cin = c + 1
        self.depth_out = Conv(cin, 1, 3)

        self.mask_dec = nn.ModuleList()
        cin = enc_c[-1]
        for c in dec_c:
            self.mask_dec.append(Conv(cin, c, 4, stride=2, transposed=True))
            cin = c
        self.mask_out = Conv(cin, 1, 3)

    def param_groups(self) -> dict[str, list[nn.Parameter]]:
        return {
            "encoder": list(self.encoder.parameters()) + list(self.enc_bn.parameters()),
            "pose_head": list(self.pose_fc.parameters()),
            "depth_decoder": list(self.depth_dec.parameters())
            + list(self.depth_side.parameters())
            + list(self.depth_out.parameters()),
            "mask_decoder": list(self.mask_dec.parameters()) + list(self.mask_out.parameters()),
        }

    def dense_weights(self) -> list[nn.Parameter]:
        return [m.weight for m in self.pose_fc]

    def _decode(self, x, blocks, side=None):
        for i, block in enumerate(blocks):
            x = ad.relu(block(x))
            h, w = self.sizes[len(blocks) - 1 - i]
            x = x[:, :, :h, :w]
            if side is not None and str(i) in side:
                x = ad.concat([x, ad.relu(side[str(i)](x))], dim=1)
        return x

    def forward(self, source, target, flow, vo_twist, generator: torch.Generator | None = None) -> CorrectorOutput:
        n, _, h, w = source.shape
        if (h, w) != self.input_size:
            raise ValueError(f"network built for {self.input_size}, got {(h, w)}")
        if target.shape != source.shape or flow.shape != (n, 2, h, w) or vo_twist.shape != (n, 6):
            raise ValueError(
                f"input shapes disagree: source {tuple(source.shape)}, target {tuple(target.shape)}, "
                f"flow {tuple(flow.shape)}, vo {tuple(vo_twist.shape)}"
            )
        x = ad.concat([source, target, flow.clamp(-FLOW_CLIP, FLOW_CLIP)], dim=1)
        for conv, bn in zip(self.encoder, self.enc_bn):
            x = bn(ad.relu(conv(x)))
        bottleneck = x

        z = ad.concat([bottleneck.reshape(n, -1), vo_twist.to(x.dtype)], dim=1)
        for fc in self.pose_fc[:-1]:
            z = ad.dropout(ad.relu(fc(z)), self.dropout_p, self.training, generator)
        correction = self.pose_fc[-1](z) * self.correction_scale

        d = self._decode(bottleneck, self.depth_dec, self.depth_side)
        inv_depth = ad.relu(self.depth_out(d))[:, 0]

        m = self._decode(bottleneck, self.mask_dec)
        mask = ad.sigmoid(self.mask_out(m))[:, 0].clamp(MASK_EPS, 1 - MASK_EPS)
        return CorrectorOutput(correction, inv_depth, mask)


def init_params(seed: int, width: float = 0.25, input_size=(96, 128), **kwargs) -> Corrector:
    """Seeded fan-in-scaled uniform init; batch-norm scale 1, shift 0."""
    net = Corrector(width, input_size, **kwargs)
    gen = torch.Generator().manual_seed(int(seed))
    for mod in net.modules():
        if isinstance(mod, Conv):
            _uniform_(mod.weight, mod.fan_in(), gen)
        elif isinstance(mod, Dense):
            _uniform_(mod.weight, mod.weight.shape[1], gen)
    for out in (net.pose_fc[-1], net.mask_out):
        _uniform_(out.weight, out.weight[0].numel() if isinstance(out, Dense) else out.fan_in(), gen, gain=1.0)
    with torch.no_grad():
        net.depth_out.bias.fill_(net.inv_depth_bias)
    return net


def forward(params: Corrector, source, target, flow, vo_twist, mode: str = "eval", generator=None) -> CorrectorOutput:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    params.train(mode == "train")
    return params(source, target, flow, vo_twist, generator=generator)


# --- checkpoints ---

def _pack_block(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def save_checkpoint(path, net: Corrector, optimizer_state: dict | None = None, meta: dict | None = None) -> None:
    """Versioned little-endian binary: header, JSON metadata, float32 blocks."""
    info = {
        "correction_scale": net.correction_scale,
        "dropout_p": net.dropout_p,
        "inv_depth_bias": net.inv_depth_bias,
        **(meta or {}),
    }
    blocks = [(k, v.detach().cpu().double().numpy()) for k, v in net.state_dict().items()]
    if optimizer_state:
        blocks.append(("opt/step", np.array([optimizer_state["step"]], dtype=np.float64)))
        for key in ("m", "v"):
            for name, t in optimizer_state[key].items():
                blocks.append((f"opt/{key}/{name}", t.detach().cpu().double().numpy()))
    meta_raw = json.dumps(info, sort_keys=True).encode("utf-8")
    h, w = net.input_size
    out = [CKPT_MAGIC, struct.pack("<IdII", CKPT_VERSION, net.width, h, w)]
    out.append(struct.pack("<I", len(meta_raw)) + meta_raw)
    out.append(struct.pack("<I", len(blocks)))
    out.extend(_pack_block(k, v) for k, v in blocks)
    atomic_write_bytes(path, b"".join(out))


def load_checkpoint(path):
    """Return (net, optimizer_state or None, metadata)."""
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    pos = 8
    version, width, h, w = struct.unpack_from("<IdII", buf, pos)
    pos += struct.calcsize("<IdII")
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (mlen,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    meta = json.loads(buf[pos:pos + mlen].decode("utf-8"))
    pos += mlen
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    blocks = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        blocks[name] = arr
    net = Corrector(
        width,
        (h, w),
        correction_scale=meta["correction_scale"],
        dropout_p=meta["dropout_p"],
        inv_depth_bias=meta["inv_depth_bias"],
    )
    state = net.state_dict()
    for k, ref in state.items():
        if k not in blocks:
            raise ValueError(f"{path}: missing parameter block {k}")
        state[k] = torch.from_numpy(blocks[k].copy()).to(ref.dtype)
    net.load_state_dict(state)
    opt = None
    if "opt/step" in blocks:
        opt = {"step": int(blocks["opt/step"][0]), "m": {}, "v": {}}
        for k, arr in blocks.items():
            if k.startswith("opt/m/"):
                opt["m"][k[6:]] = torch.from_numpy(arr.copy())
            elif k.startswith("opt/v/"):
                opt["v"][k[6:]] = torch.from_numpy(arr.copy())
    return net, opt, meta
