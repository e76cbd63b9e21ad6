"""Reusable architecture blocks: stem, basic residual block, bottleneck
deconvolution block.

Blocks are stateless functions over an explicit ParamSet.  Parameter names are
hierarchical dotted paths ("stage1.block0.conv1.weight"); every name is unique
within a model and each tensor's initial value is derived from (seed, name)
alone, so identically named parameters are bit-identical across model variants
built with the same seed.
"""

from __future__ import annotations

import zlib

import numpy as np

from .engine import ConvSpec, Tensor, add, batchnorm2d, conv2d, conv_transpose2d, maxpool2d, relu
from .errors import ConfigError

STEM_KERNEL = 7
STEM_POOL = 3


class ParamSet:
    """Ordered, uniquely named parameter tensors."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._tensors:
            raise ConfigError(f"duplicate parameter name {name!r}")
        self._tensors[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def trainable(self):
        return [(n, t) for n, t in self._tensors.items() if t.requires_grad]

    def trainable_size(self) -> int:
        return sum(t.size for _, t in self.trainable())


def _param_rng(seed: int, name: str) -> np.random.Generator:
    # (seed, name) -> independent stream; creation order never matters
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def init_conv(params: ParamSet, prefix: str, spec: ConvSpec, seed: int, dtype,
              transposed: bool = False) -> None:
    """He-normal conv weight (+ zero bias when spec.has_bias)."""
    if transposed:
        shape = (spec.in_channels, spec.out_channels, spec.kernel_h, spec.kernel_w)
    else:
        shape = (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w)
    fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w
    std = np.sqrt(2.0 / fan_in)
    rng = _param_rng(seed, f"{prefix}.weight")
    params.add(f"{prefix}.weight",
               Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True))
    if spec.has_bias:
        params.add(f"{prefix}.bias", Tensor(np.zeros(spec.out_channels, dtype=dtype),
                                            requires_grad=True))


def init_bn(params: ParamSet, prefix: str, channels: int, dtype) -> None:
    params.add(f"{prefix}.gamma", Tensor(np.ones(channels, dtype=dtype), requires_grad=True))
    params.add(f"{prefix}.beta", Tensor(np.zeros(channels, dtype=dtype), requires_grad=True))
    params.add(f"{prefix}.running_mean", Tensor(np.zeros(channels, dtype=dtype)))
    params.add(f"{prefix}.running_var", Tensor(np.ones(channels, dtype=dtype)))


def bn_forward(x: Tensor, params: ParamSet, prefix: str, mode: str,
               momentum: float, eps: float) -> Tensor:
    return batchnorm2d(x, params[f"{prefix}.gamma"], params[f"{prefix}.beta"],
                       params[f"{prefix}.running_mean"], params[f"{prefix}.running_var"],
                       mode, momentum, eps)


# -- stem -------------------------------------------------------------------

def init_stem(params: ParamSet, in_channels: int, width: int, seed: int, dtype,
              prefix: str = "stem") -> None:
    spec = ConvSpec(in_channels, width, STEM_KERNEL, STEM_KERNEL, stride=2, padding=3)
    init_conv(params, f"{prefix}.conv", spec, seed, dtype)
    init_bn(params, f"{prefix}.bn", width, dtype)


def stem_forward(x: Tensor, params: ParamSet, mode: str = "eval",
                 momentum: float = 0.1, eps: float = 1e-5, prefix: str = "stem") -> Tensor:
    """7x7 stride-2 conv, BN, relu, 3x3 stride-2 max pool: quarter resolution."""
    n, c, h, w = x.shape
    if h % 32 or w % 32:
        raise ConfigError(
            f"stem_forward: input extents {h}x{w} must be divisible by 32 (no implicit padding)"
        )
    weight = params[f"{prefix}.conv.weight"]
    width, cin = weight.shape[0], weight.shape[1]
    spec = ConvSpec(cin, width, STEM_KERNEL, STEM_KERNEL, stride=2, padding=3)
    out = conv2d(x, weight, None, spec)
    out = relu(bn_forward(out, params, f"{prefix}.bn", mode, momentum, eps))
    return maxpool2d(out, STEM_POOL, 2, padding=1)


# -- basic residual block ---------------------------------------------------

def init_basic_block(params: ParamSet, prefix: str, in_channels: int, out_channels: int,
                     stride: int, seed: int, dtype, dilation: int = 1) -> None:
    c1 = ConvSpec(in_channels, out_channels, 3, 3, stride=stride, padding=dilation,
                  dilation=dilation)
    c2 = ConvSpec(out_channels, out_channels, 3, 3, stride=1, padding=dilation,
                  dilation=dilation)
    init_conv(params, f"{prefix}.conv1", c1, seed, dtype)
    init_bn(params, f"{prefix}.bn1", out_channels, dtype)
    init_conv(params, f"{prefix}.conv2", c2, seed, dtype)
    init_bn(params, f"{prefix}.bn2", out_channels, dtype)
    if stride != 1 or in_channels != out_channels:
        down = ConvSpec(in_channels, out_channels, 1, 1, stride=stride)
        init_conv(params, f"{prefix}.down", down, seed, dtype)
        init_bn(params, f"{prefix}.down_bn", out_channels, dtype)


def basic_block_forward(x: Tensor, params: ParamSet, prefix: str, stride: int,
                        mode: str = "eval", momentum: float = 0.1, eps: float = 1e-5,
                        dilation: int = 1) -> Tensor:
    """conv3x3(stride)-BN-relu-conv3x3-BN plus shortcut, final relu."""
    if stride not in (1, 2):
        raise ConfigError(f"basic_block_forward: stride must be 1 or 2, got {stride}")
    w1 = params[f"{prefix}.conv1.weight"]
    w2 = params[f"{prefix}.conv2.weight"]
    out_ch, in_ch = w1.shape[0], w1.shape[1]
    c1 = ConvSpec(in_ch, out_ch, 3, 3, stride=stride, padding=dilation, dilation=dilation)
    c2 = ConvSpec(out_ch, out_ch, 3, 3, stride=1, padding=dilation, dilation=dilation)
    out = relu(bn_forward(conv2d(x, w1, None, c1), params, f"{prefix}.bn1", mode, momentum, eps))
    out = bn_forward(conv2d(out, w2, None, c2), params, f"{prefix}.bn2", mode, momentum, eps)
    if f"{prefix}.down.weight" in params:
        wd = params[f"{prefix}.down.weight"]
        shortcut = conv2d(x, wd, None, ConvSpec(in_ch, out_ch, 1, 1, stride=stride))
        shortcut = bn_forward(shortcut, params, f"{prefix}.down_bn", mode, momentum, eps)
    else:
        shortcut = x
    return relu(add(out, shortcut))


# -- bottleneck deconvolution block ----------------------------------------

def init_deconv_block(params: ParamSet, prefix: str, in_channels: int, out_channels: int,
                      seed: int, dtype) -> None:
    if in_channels % 4:
        raise ConfigError(
            f"deconv block {prefix!r}: in_channels {in_channels} not divisible by 4"
        )
    mid = in_channels // 4
    init_conv(params, f"{prefix}.reduce", ConvSpec(in_channels, mid, 1, 1), seed, dtype)
    init_bn(params, f"{prefix}.reduce_bn", mid, dtype)
    init_conv(params, f"{prefix}.up",
              ConvSpec(mid, mid, 3, 3, stride=2, padding=1, output_padding=1),
              seed, dtype, transposed=True)
    init_bn(params, f"{prefix}.up_bn", mid, dtype)
    init_conv(params, f"{prefix}.expand", ConvSpec(mid, out_channels, 1, 1), seed, dtype)
    init_bn(params, f"{prefix}.expand_bn", out_channels, dtype)


def deconv_block_forward(x: Tensor, params: ParamSet, prefix: str, mode: str = "eval",
                         momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Reduce channels /4, transposed-conv 2x enlargement, expand to Cout."""
    wr = params[f"{prefix}.reduce.weight"]
    wu = params[f"{prefix}.up.weight"]
    we = params[f"{prefix}.expand.weight"]
    cin, mid, cout = wr.shape[1], wr.shape[0], we.shape[0]
    out = conv2d(x, wr, None, ConvSpec(cin, mid, 1, 1))
    out = relu(bn_forward(out, params, f"{prefix}.reduce_bn", mode, momentum, eps))
    out = conv_transpose2d(out, wu, ConvSpec(mid, mid, 3, 3, stride=2, padding=1,
                                             output_padding=1))
    out = relu(bn_forward(out, params, f"{prefix}.up_bn", mode, momentum, eps))
    out = conv2d(out, we, None, ConvSpec(mid, cout, 1, 1))
    return relu(bn_forward(out, params, f"{prefix}.expand_bn", mode, momentum, eps))
