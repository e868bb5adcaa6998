"""Residual classifier with group normalisation.

Teacher and student share this architecture; only the input resolution
differs. A forward pass returns both the final convolutional feature map
(post-ReLU output of the last residual block) and the logits.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .optim import Parameter, SeedLike, as_generator, he_init
from .tensor import Tensor, conv2d, global_avg_pool, group_norm, linear, relu

GN_EPS = 1e-5
HEAD_PREFIX = "head."


class InputTooSmall(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    stage_widths: Tuple[int, ...] = (16, 32, 64, 128)
    blocks_per_stage: int = 1
    num_classes: int = 3
    num_groups: int = 8
    input_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        if not self.stage_widths:
            raise ValueError("need at least one stage")
        for w in self.stage_widths:
            if w % self.num_groups:
                raise ValueError(f"stage width {w} not divisible by num_groups={self.num_groups}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.blocks_per_stage < 1 or self.input_channels < 1:
            raise ValueError("blocks_per_stage and input_channels must be >= 1")

    @property
    def num_reductions(self) -> int:
        return 1 + len(self.stage_widths)

    @property
    def min_input_size(self) -> int:
        return 2 ** self.num_reductions

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: (tuple(v) if k == "stage_widths" else v) for k, v in d.items()})


@dataclass
class ModelOutput:
    feature_map: Tensor
    logits: Tensor


@dataclass
class _Conv:
    name: str
    c_in: int
    c_out: int
    k: int
    stride: int
    padding: int


@dataclass
class _Block:
    conv1: _Conv
    conv2: _Conv
    proj: Optional[_Conv]


def _layout(cfg: ModelConfig) -> Tuple[_Conv, List[_Block]]:
    stem = _Conv("stem", cfg.input_channels, cfg.stage_widths[0], 3, 2, 1)
    blocks = []
    c_in = cfg.stage_widths[0]
    for i, width in enumerate(cfg.stage_widths):
        for j in range(cfg.blocks_per_stage):
            stride = 2 if j == 0 else 1
            prefix = f"stage{i}.block{j}"
            proj = None
            if stride != 1 or c_in != width:
                proj = _Conv(f"{prefix}.proj", c_in, width, 1, stride, 0)
            blocks.append(_Block(
                _Conv(f"{prefix}.conv1", c_in, width, 3, stride, 1),
                _Conv(f"{prefix}.conv2", width, width, 3, 1, 1),
                proj,
            ))
            c_in = width
    return stem, blocks


def _out_size(d: int, conv: _Conv) -> int:
    return (d + 2 * conv.padding - conv.k) // conv.stride + 1


class Model:
    """Parameters plus the fixed layer layout they plug into."""

    def __init__(self, cfg: ModelConfig, params: Dict[str, Parameter]):
        self.config = cfg
        self.params = params
        self._stem, self._blocks = _layout(cfg)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def parameters(self) -> List[Parameter]:
        return list(self.params.values())

    def named_parameters(self) -> Iterator[Tuple[str, Parameter]]:
        return iter(self.params.items())

    def head_parameters(self) -> List[Parameter]:
        return [p for n, p in self.params.items() if n.startswith(HEAD_PREFIX)]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_bytes(self) -> bytes:
        return b"".join(name.encode() + p.data.tobytes() for name, p in self.params.items())

    def fingerprint(self) -> str:
        return hashlib.sha256(self.state_bytes()).hexdigest()

    def copy(self) -> "Model":
        return Model(self.config, {n: Parameter(p.data.copy(), name=n) for n, p in self.params.items()})

    def load_state_from(self, other: "Model") -> None:
        for name, p in self.params.items():
            p.data = other.params[name].data.astype(p.dtype, copy=True)
            p.grad = None
            p.reset_optimizer_state()

    def astype(self, dtype) -> "Model":
        return Model(self.config, {n: Parameter(p.data.astype(dtype), name=n) for n, p in self.params.items()})

    # -- forward ---------------------------------------------------------

    def _conv_gn(self, x: Tensor, conv: _Conv) -> Tensor:
        p = self.params
        y = conv2d(x, p[conv.name + ".weight"], None, conv.stride, conv.padding)
        return group_norm(y, self.config.num_groups, p[conv.name + ".gn.gamma"], p[conv.name + ".gn.beta"], GN_EPS)

    def forward(self, x) -> ModelOutput:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        if x.ndim != 4 or x.shape[1] != self.config.input_channels:
            raise ValueError(f"expected [B,{self.config.input_channels},H,W] input, got {x.shape}")
        h, w = x.shape[2:]
        if min(h, w) < self.config.min_input_size:
            raise InputTooSmall(f"input {h}x{w} below the minimum side {self.config.min_input_size}")
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        y = relu(self._conv_gn(x, self._stem))
        for block in self._blocks:
            out = relu(self._conv_gn(y, block.conv1))
            out = self._conv_gn(out, block.conv2)
            shortcut = y if block.proj is None else self._conv_gn(y, block.proj)
            y = relu(out + shortcut)
        pooled = global_avg_pool(y)
        logits = linear(pooled, self.params["head.weight"], self.params["head.bias"])
        return ModelOutput(y, logits)

    __call__ = forward

    # -- compute accounting ---------------------------------------------

    def flop_breakdown(self, input_h: int, input_w: int) -> List[Tuple[str, int]]:
        """FLOPs per layer for one forward pass of a single image.

        Convolutions cost ``2*K^2*C_in*C_out*h_out*w_out``, the linear head
        ``2*D_in*D_out``; group norm, ReLU, the residual add and global
        pooling cost one FLOP per element they touch.
        """
        if min(input_h, input_w) < self.config.min_input_size:
            raise InputTooSmall(f"input {input_h}x{input_w} below the minimum side {self.config.min_input_size}")
        rows: List[Tuple[str, int]] = []

        def conv(c: _Conv, h: int, w: int) -> Tuple[int, int]:
            ho, wo = _out_size(h, c), _out_size(w, c)
            rows.append((c.name, conv_flops(c.k, c.c_in, c.c_out, ho, wo)))
            rows.append((c.name + ".gn", c.c_out * ho * wo))
            return ho, wo

        h, w = conv(self._stem, input_h, input_w)
        rows.append(("stem.relu", self._stem.c_out * h * w))
        for b in self._blocks:
            h1, w1 = conv(b.conv1, h, w)
            rows.append((b.conv1.name + ".relu", b.conv1.c_out * h1 * w1))
            h2, w2 = conv(b.conv2, h1, w1)
            if b.proj is not None:
                conv(b.proj, h, w)
            n = b.conv2.c_out * h2 * w2
            rows.append((b.conv2.name + ".add", n))
            rows.append((b.conv2.name + ".relu", n))
            h, w = h2, w2
        c_last = self.config.stage_widths[-1]
        rows.append(("pool", c_last * h * w))
        rows.append(("head", 2 * c_last * self.config.num_classes))
        return rows

    def feature_map_size(self, input_h: int, input_w: int) -> Tuple[int, int]:
        h, w = _out_size(input_h, self._stem), _out_size(input_w, self._stem)
        for b in self._blocks:
            h, w = _out_size(h, b.conv1), _out_size(w, b.conv1)
        return h, w


def conv_flops(k: int, c_in: int, c_out: int, h_out: int, w_out: int) -> int:
    return 2 * k * k * c_in * c_out * h_out * w_out


def count_flops(model: Model, input_h: int, input_w: int) -> int:
    return int(sum(f for _, f in model.flop_breakdown(input_h, input_w)))


def build_model(cfg: ModelConfig, rng_seed: SeedLike = 0, dtype=np.float64) -> Model:
    """He-initialised convolutions and head weights, unit GN gains, zero shifts and bias."""
    rng = as_generator(rng_seed)
    stem, blocks = _layout(cfg)
    params: Dict[str, Parameter] = {}

    def add_conv(c: _Conv):
        w = he_init((c.c_out, c.c_in, c.k, c.k), c.c_in * c.k * c.k, rng, dtype)
        params[c.name + ".weight"] = Parameter(w.data, name=c.name + ".weight")
        params[c.name + ".gn.gamma"] = Parameter(np.ones(c.c_out, dtype=dtype), name=c.name + ".gn.gamma")
        params[c.name + ".gn.beta"] = Parameter(np.zeros(c.c_out, dtype=dtype), name=c.name + ".gn.beta")

    add_conv(stem)
    for b in blocks:
        add_conv(b.conv1)
        add_conv(b.conv2)
        if b.proj is not None:
            add_conv(b.proj)
    d = cfg.stage_widths[-1]
    params["head.weight"] = Parameter(he_init((cfg.num_classes, d), d, rng, dtype).data, name="head.weight")
    params["head.bias"] = Parameter(np.zeros(cfg.num_classes, dtype=dtype), name="head.bias")
    return Model(cfg, params)


def forward(model: Model, x) -> ModelOutput:
    return model.forward(x)


def freeze_except_fc(model: Model) -> None:
    """Exclude everything but the linear head from gradients and updates."""
    for name, p in model.params.items():
        if not name.startswith(HEAD_PREFIX):
            p.requires_grad = False
            p.grad = None


def unfreeze(model: Model) -> None:
    for p in model.params.values():
        p.requires_grad = True


# ---------------------------------------------------------------------------
# checkpoint container
#
#   magic  b"RDCK"   | u32 version
#   u32 config_len   | config JSON (utf-8)
#   u32 n_tensors
#   per tensor: u16 name_len, name, u8 dtype code, u8 ndim, u32*ndim shape,
#               raw little-endian values
# ---------------------------------------------------------------------------

MAGIC = b"RDCK"
CHECKPOINT_VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: Model, path, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    header = {"model_config": model.config.to_dict()}
    if extra:
        header["extra"] = extra
    cfg_bytes = json.dumps(header, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<I", len(cfg_bytes)), cfg_bytes,
              struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        arr = np.ascontiguousarray(p.data)
        code = _CODES[arr.dtype]
        nb = name.encode()
        chunks.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype(_DTYPES[code]).tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))
    return path


def _parse_body(buf: bytes):
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (clen,) = struct.unpack_from("<I", buf, 8)
    header = json.loads(buf[12 : 12 + clen])
    off = 12 + clen
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    params: Dict[str, Parameter] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off : off + nlen].decode()
        off += nlen
        code, ndim = struct.unpack_from("<BB", buf, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        dt = _DTYPES[code]
        n = int(math.prod(shape))
        arr = np.frombuffer(buf, dtype=dt, count=n, offset=off).reshape(shape)
        off += n * dt.itemsize
        params[name] = Parameter(arr.astype(dt.newbyteorder("="), copy=True), name=name)
    if off != len(buf):
        raise ValueError(f"{len(buf) - off} trailing bytes")
    return header, params


def load_checkpoint(path) -> Tuple[Model, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        header, params = _parse_body(buf)
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    cfg = ModelConfig.from_dict(header["model_config"])
    model = Model(cfg, params)
    expected = build_model(cfg, 0)
    if set(expected.params) != set(params):
        raise CheckpointError(f"{path}: parameter names do not match the stored config")
    return model, header.get("extra", {})
