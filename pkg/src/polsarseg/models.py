"""Model assembly and checkpoint serialization.

Two variants share one trunk (stem + stages 1-2) with identical parameter
names and, for equal seeds, bit-identical initial values:

* ``mp_resnet``: after the trunk the network splits into three parallel
  branches running stages 3-4 at full, half and quarter resolution.  A
  decoder of bottleneck deconvolution blocks merges them coarse-to-fine by
  elementwise addition, and a small head produces per-pixel class logits at
  input resolution.
* ``fcn_baseline``: a single dilated encoder (stages 3-4 at dilation 2 and 4,
  stride 1) followed by a 1x1 classifier and 8x bilinear upsampling.

Checkpoints are a single binary file: magic ``MPRSNET1``, a length-prefixed
UTF-8 ``key = value`` config document, then each parameter in insertion order
as (name, dtype tag, rank, extents, float32 payload), all little endian.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import blocks
from .blocks import ParamSet
from .engine import ConvSpec, Tensor, add, conv2d, no_grad, relu, upsample_bilinear
from .errors import (BadMagicError, ConfigError, ExtentOverflowError, FileFormatError,
                     ShapeError, TruncatedPayloadError)

CHECKPOINT_MAGIC = b"MPRSNET1"
DTYPE_TAG_F32 = 1
MAX_EXTENT = 1 << 20
MAX_PAYLOAD_BYTES = 1 << 31

VARIANTS = ("mp_resnet", "fcn_baseline")
HEAD_MODES = ("bilinear8x", "progressive")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "mp_resnet"
    num_input_channels: int = 4
    num_classes: int = 6
    stem_width: int = 64
    stage_blocks: tuple = (3, 4, 6, 3)
    branch_scales: tuple = (8, 16, 32)
    branch_widths: tuple = (512, 512, 512)
    branch_width_multiplier: float = 0.9375
    decoder_width: int = 96
    head: str = "bilinear8x"
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.head not in HEAD_MODES:
            raise ConfigError(f"unknown head mode {self.head!r}")
        for name in ("num_input_channels", "num_classes", "stem_width", "decoder_width"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if len(self.stage_blocks) != 4 or any(b < 1 for b in self.stage_blocks):
            raise ConfigError(f"stage_blocks must be four positive counts, got {self.stage_blocks}")
        if tuple(self.branch_scales) != (8, 16, 32):
            raise ConfigError(f"branch_scales must be (8, 16, 32), got {self.branch_scales}")
        if len(self.branch_widths) != 3 or any(w < 4 or w % 4 for w in self.branch_widths):
            raise ConfigError(
                f"branch_widths must be three multiples of 4, got {self.branch_widths}")
        if not (0.0 < self.branch_width_multiplier <= 4.0):
            raise ConfigError(
                f"branch_width_multiplier out of range: {self.branch_width_multiplier}")
        if not (0.0 < self.bn_momentum < 1.0):
            raise ConfigError(f"bn_momentum out of range: {self.bn_momentum}")
        if self.bn_eps <= 0:
            raise ConfigError(f"bn_eps must be positive: {self.bn_eps}")

    def to_kv(self) -> str:
        def fmt(v):
            if isinstance(v, tuple):
                return ",".join(str(e) for e in v)
            return repr(v) if isinstance(v, float) else str(v)

        lines = []
        for name in _CONFIG_FIELDS:
            lines.append(f"{name} = {fmt(getattr(self, name))}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_kv(doc: str) -> "ModelConfig":
        values = {}
        for lineno, raw in enumerate(doc.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"config line {lineno} is not 'key = value': {raw!r}")
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in _CONFIG_FIELDS:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _CONFIG_FIELDS[key](val)
        cfg = ModelConfig(**values)
        cfg.validate()
        return cfg


def _parse_int_tuple(s: str) -> tuple:
    try:
        return tuple(int(p) for p in s.split(","))
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {s!r}") from None


def _parse_int(s: str) -> int:
    try:
        return int(s)
    except ValueError:
        raise ConfigError(f"expected an integer, got {s!r}") from None


def _parse_float(s: str) -> float:
    try:
        return float(s)
    except ValueError:
        raise ConfigError(f"expected a number, got {s!r}") from None


_CONFIG_FIELDS = {
    "variant": str,
    "num_input_channels": _parse_int,
    "num_classes": _parse_int,
    "stem_width": _parse_int,
    "stage_blocks": _parse_int_tuple,
    "branch_scales": _parse_int_tuple,
    "branch_widths": _parse_int_tuple,
    "branch_width_multiplier": _parse_float,
    "decoder_width": _parse_int,
    "head": str,
    "bn_momentum": _parse_float,
    "bn_eps": _parse_float,
}


def snap4(value: float) -> int:
    """Round to the nearest multiple of 4, at least 4."""
    return max(4, int(round(value / 4.0)) * 4)


def branch_stage_widths(config: ModelConfig) -> list:
    """Per-branch (stage3_width, stage4_width) after the width multiplier."""
    out = []
    for w in config.branch_widths:
        s4 = snap4(w * config.branch_width_multiplier)
        s3 = snap4(w * config.branch_width_multiplier / 2.0)
        out.append((s3, s4))
    return out


@dataclass
class Model:
    config: ModelConfig
    params: ParamSet
    mode: str = "eval"

    def train(self) -> "Model":
        self.mode = "train"
        return self

    def eval(self) -> "Model":
        self.mode = "eval"
        return self


# -- construction -----------------------------------------------------------

def _init_stage(params: ParamSet, prefix: str, count: int, in_ch: int, out_ch: int,
                entry_stride: int, seed: int, dtype, dilation: int = 1) -> None:
    for i in range(count):
        blocks.init_basic_block(params, f"{prefix}.block{i}",
                                in_ch if i == 0 else out_ch, out_ch,
                                entry_stride if i == 0 else 1, seed, dtype,
                                dilation=dilation)


def _init_trunk(params: ParamSet, config: ModelConfig, seed: int, dtype) -> None:
    w = config.stem_width
    blocks.init_stem(params, config.num_input_channels, w, seed, dtype)
    _init_stage(params, "stage1", config.stage_blocks[0], w, w, 1, seed, dtype)
    _init_stage(params, "stage2", config.stage_blocks[1], w, 2 * w, 2, seed, dtype)


def build_mp_resnet(config: ModelConfig = None, seed: int = 0, dtype=np.float32) -> Model:
    config = replace(config or ModelConfig(), variant="mp_resnet")
    config.validate()
    params = ParamSet()
    _init_trunk(params, config, seed, dtype)
    trunk_ch = 2 * config.stem_width
    widths = branch_stage_widths(config)
    for b, (s3w, s4w) in enumerate(widths):
        _init_stage(params, f"branch{b}.stage3", config.stage_blocks[2], trunk_ch, s3w,
                    2 if b >= 1 else 1, seed, dtype)
        _init_stage(params, f"branch{b}.stage4", config.stage_blocks[3], s3w, s4w,
                    2 if b >= 2 else 1, seed, dtype)
    s4 = [w for _, w in widths]
    blocks.init_deconv_block(params, "decoder.deconv0", s4[2], s4[1], seed, dtype)
    blocks.init_deconv_block(params, "decoder.deconv1", s4[1], s4[0], seed, dtype)
    blocks.init_conv(params, "head.conv", ConvSpec(s4[0], config.decoder_width, 3, 3, padding=1),
                     seed, dtype)
    blocks.init_bn(params, "head.bn", config.decoder_width, dtype)
    blocks.init_conv(params, "head.cls",
                     ConvSpec(config.decoder_width, config.num_classes, 1, 1, has_bias=True),
                     seed, dtype)
    return Model(config, params)


def build_fcn_baseline(config: ModelConfig = None, seed: int = 0, dtype=np.float32) -> Model:
    config = replace(config or ModelConfig(), variant="fcn_baseline")
    config.validate()
    params = ParamSet()
    _init_trunk(params, config, seed, dtype)
    w = config.stem_width
    _init_stage(params, "stage3", config.stage_blocks[2], 2 * w, 4 * w, 1, seed, dtype,
                dilation=2)
    _init_stage(params, "stage4", config.stage_blocks[3], 4 * w, 8 * w, 1, seed, dtype,
                dilation=4)
    blocks.init_conv(params, "head.cls",
                     ConvSpec(8 * w, config.num_classes, 1, 1, has_bias=True), seed, dtype)
    return Model(config, params)


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    if config.variant == "fcn_baseline":
        return build_fcn_baseline(config, seed, dtype)
    return build_mp_resnet(config, seed, dtype)


# -- forward ----------------------------------------------------------------

def _stage_forward(x: Tensor, model: Model, prefix: str, count: int, entry_stride: int,
                   dilation: int = 1) -> Tensor:
    cfg = model.config
    for i in range(count):
        x = blocks.basic_block_forward(x, model.params, f"{prefix}.block{i}",
                                       entry_stride if i == 0 else 1, model.mode,
                                       cfg.bn_momentum, cfg.bn_eps, dilation=dilation)
    return x


def _trunk_forward(x: Tensor, model: Model) -> Tensor:
    cfg = model.config
    x = blocks.stem_forward(x, model.params, model.mode, cfg.bn_momentum, cfg.bn_eps)
    x = _stage_forward(x, model, "stage1", cfg.stage_blocks[0], 1)
    return _stage_forward(x, model, "stage2", cfg.stage_blocks[1], 2)


def _upsample_to(x: Tensor, h: int, w: int, head: str) -> Tensor:
    if head == "progressive":
        while x.shape[2] < h or x.shape[3] < w:
            x = upsample_bilinear(x, min(2 * x.shape[2], h), min(2 * x.shape[3], w))
        return x
    return upsample_bilinear(x, h, w)


def forward_segment(model: Model, x: Tensor, return_branches: bool = False):
    """Class logits (N, num_classes, H, W) for a preprocessed image batch.

    With ``return_branches`` the mp_resnet variant also returns a dict of the
    three pre-decoder branch feature tensors keyed "branch0".."branch2".
    """
    cfg = model.config
    if model.mode not in ("train", "eval"):
        raise ConfigError(f"model mode must be 'train' or 'eval', got {model.mode!r}")
    if x.ndim != 4 or x.shape[1] != cfg.num_input_channels:
        raise ShapeError(
            f"forward_segment: expected (N, {cfg.num_input_channels}, H, W) input, "
            f"got {tuple(x.shape)}")
    n, _, h, w = x.shape
    if h % 32 or w % 32:
        raise ConfigError(
            f"forward_segment: input extents {h}x{w} must be divisible by 32 "
            f"(no implicit padding)")

    feats = _trunk_forward(x, model)
    cfg_b = cfg.stage_blocks
    if cfg.variant == "fcn_baseline":
        out = _stage_forward(feats, model, "stage3", cfg_b[2], 1, dilation=2)
        out = _stage_forward(out, model, "stage4", cfg_b[3], 1, dilation=4)
        wc = model.params["head.cls.weight"]
        logits = conv2d(out, wc, model.params["head.cls.bias"],
                        ConvSpec(wc.shape[1], wc.shape[0], 1, 1, has_bias=True))
        logits = _upsample_to(logits, h, w, cfg.head)
        if return_branches:
            return logits, {}
        return logits

    branch_out = []
    for b in range(3):
        out = _stage_forward(feats, model, f"branch{b}.stage3", cfg_b[2], 2 if b >= 1 else 1)
        out = _stage_forward(out, model, f"branch{b}.stage4", cfg_b[3], 2 if b >= 2 else 1)
        branch_out.append(out)

    mp = model.params
    mm, eps = cfg.bn_momentum, cfg.bn_eps
    out = blocks.deconv_block_forward(branch_out[2], mp, "decoder.deconv0", model.mode, mm, eps)
    out = add(out, branch_out[1])
    out = blocks.deconv_block_forward(out, mp, "decoder.deconv1", model.mode, mm, eps)
    out = add(out, branch_out[0])

    wh = mp["head.conv.weight"]
    out = conv2d(out, wh, None, ConvSpec(wh.shape[1], wh.shape[0], 3, 3, padding=1))
    out = relu(blocks.bn_forward(out, mp, "head.bn", model.mode, mm, eps))
    wc = mp["head.cls.weight"]
    logits = conv2d(out, wc, mp["head.cls.bias"],
                    ConvSpec(wc.shape[1], wc.shape[0], 1, 1, has_bias=True))
    logits = _upsample_to(logits, h, w, cfg.head)
    if return_branches:
        return logits, {f"branch{b}": t for b, t in enumerate(branch_out)}
    return logits


# -- checkpoint i/o ---------------------------------------------------------

def _read_exact(f, n: int, what: str) -> bytes:
    chunk = f.read(n)
    if len(chunk) != n:
        raise TruncatedPayloadError(
            f"checkpoint truncated: wanted {n} bytes for {what}, got {len(chunk)}")
    return chunk


def save_checkpoint(model: Model, path: str) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    doc = model.config.to_kv().encode("utf-8")
    buf.write(struct.pack("<I", len(doc)))
    buf.write(doc)
    for name, tensor in model.params.items():
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<BB", DTYPE_TAG_F32, tensor.ndim))
        buf.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        buf.write(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path: str, dtype=np.float32) -> Model:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise BadMagicError(
                f"not a checkpoint file: magic {magic!r} != {CHECKPOINT_MAGIC!r}")
        (doc_len,) = struct.unpack("<I", _read_exact(f, 4, "config length"))
        if doc_len > 1 << 20:
            raise ExtentOverflowError(f"config document length {doc_len} is implausible")
        doc = _read_exact(f, doc_len, "config document").decode("utf-8")
        config = ModelConfig.from_kv(doc)
        model = build_model(config, seed=0, dtype=dtype)
        seen = set()
        for name, tensor in model.params.items():
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "parameter name length"))
            stored = _read_exact(f, name_len, "parameter name").decode("utf-8")
            if stored != name:
                raise FileFormatError(
                    f"checkpoint parameter order mismatch: expected {name!r}, found {stored!r}")
            tag, rank = struct.unpack("<BB", _read_exact(f, 2, "dtype tag and rank"))
            if tag != DTYPE_TAG_F32:
                raise FileFormatError(f"unsupported dtype tag {tag} for {name!r}")
            extents = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "extents"))
            nbytes = 4 * int(np.prod(extents, dtype=np.int64)) if rank else 4
            if any(e > MAX_EXTENT for e in extents) or nbytes > MAX_PAYLOAD_BYTES:
                raise ExtentOverflowError(
                    f"parameter {name!r} extents {extents} exceed plausible bounds")
            if extents != tensor.shape:
                raise FileFormatError(
                    f"parameter {name!r} shape mismatch: checkpoint {extents}, "
                    f"model {tensor.shape}")
            raw = _read_exact(f, nbytes, f"payload of {name!r}")
            tensor.data = np.frombuffer(raw, dtype="<f4").reshape(extents).astype(dtype)
            seen.add(name)
        trailing = f.read(1)
        if trailing:
            raise FileFormatError("checkpoint has trailing bytes after last parameter")
    model.eval()
    return model


def logits_for(model: Model, x: np.ndarray) -> np.ndarray:
    """Logits for a raw array, without building a gradient graph."""
    with no_grad():
        out = forward_segment(model, Tensor(np.asarray(x)))
    return out.data
