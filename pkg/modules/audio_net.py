"""
Audio Network Module
Waveform encoder/decoder with global visual conditioning.

Every encoder and decoder convolution receives V h as an extra per-channel
offset, folded into the convolution bias. The recurrent bottleneck of the
original source-separation network is not used; the deepest encoder output
feeds the deepest decoder directly.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Tuple, Union

import numpy as np

from modules.audio import AudioClip
from modules.config import AudioNetConfig
from modules.error_handler import ShapeError
from modules.tensor import (
    Tensor,
    add,
    conv1d,
    conv1d_transpose,
    glu,
    matvec,
    pad_time,
    relu,
    trim_time,
    uniform_param,
)

logger = logging.getLogger(__name__)


@dataclass
class AudioNetParams:
    config: AudioNetConfig
    tensors: Dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def initialize(cls, config: AudioNetConfig, seed: int = 0) -> "AudioNetParams":
        config.validate()
        rng = np.random.default_rng(seed)
        params = cls(config)
        k = config.kernel
        for level in range(1, config.depth + 1):
            c_prev, c = config.channels(level - 1), config.channels(level)
            prefix = f"encoder.{level}"
            params._add(f"{prefix}.conv1.weight", rng, (c, c_prev, k), c_prev * k)
            params._add(f"{prefix}.conv1.bias", rng, (c,), c_prev * k)
            params._add(f"{prefix}.cond1", rng, (c, config.cond_dim), config.cond_dim)
            params._add(f"{prefix}.conv2.weight", rng, (2 * c, c, 1), c)
            params._add(f"{prefix}.conv2.bias", rng, (2 * c,), c)
            params._add(f"{prefix}.cond2", rng, (2 * c, config.cond_dim), config.cond_dim)

            c_out = config.output_channels if level == 1 else c_prev
            prefix = f"decoder.{level}"
            params._add(f"{prefix}.conv1.weight", rng, (2 * c, c, 1), c)
            params._add(f"{prefix}.conv1.bias", rng, (2 * c,), c)
            params._add(f"{prefix}.cond1", rng, (2 * c, config.cond_dim), config.cond_dim)
            params._add(f"{prefix}.conv2.weight", rng, (c, c_out, k), c * k)
            params._add(f"{prefix}.conv2.bias", rng, (c_out,), c * k)
            params._add(f"{prefix}.cond2", rng, (c_out, config.cond_dim), config.cond_dim)
        return params

    def _add(self, name: str, rng, shape: Tuple[int, ...], fan_in: int) -> None:
        self.tensors[name] = uniform_param(rng, shape, fan_in, name)

    def level(self, side: str, level: int) -> Dict[str, Tensor]:
        prefix = f"{side}.{level}."
        return {name[len(prefix):]: t for name, t in self.tensors.items() if name.startswith(prefix)}

    def named_tensors(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.tensors.items())


def valid_length(length: int, depth: int, kernel: int = 8, stride: int = 4) -> int:
    """Smallest length >= ``length`` for which every level divides exactly"""
    if length < 1:
        raise ShapeError("Audio length must be >= 1")
    size = length
    for _ in range(depth):
        size = max(int(np.ceil((size - kernel) / stride)) + 1, 1)
    for _ in range(depth):
        size = (size - 1) * stride + kernel
    return int(size)


def _conditioned_bias(bias: Tensor, projection: Tensor, h: Tensor) -> Tensor:
    return add(bias, matvec(projection, h))


def encoder_block(x: Tensor, h: Tensor, params_k: Dict[str, Tensor], stride: int = 4) -> Tensor:
    """GLU(W2 * ReLU(W1 * x + V1 h) + V2 h)"""
    w1 = params_k["conv1.weight"]
    if x.shape[0] != w1.shape[1]:
        raise ShapeError(f"encoder block expects {w1.shape[1]} channels, got {x.shape[0]}")
    if x.shape[1] < w1.shape[2]:
        raise ShapeError(f"encoder block input length {x.shape[1]} shorter than kernel {w1.shape[2]}")
    y = conv1d(x, w1, _conditioned_bias(params_k["conv1.bias"], params_k["cond1"], h), stride)
    y = relu(y)
    y = conv1d(y, params_k["conv2.weight"], _conditioned_bias(params_k["conv2.bias"], params_k["cond2"], h), 1)
    return glu(y)


def decoder_block(x: Tensor, skip: Tensor, h: Tensor, params_k: Dict[str, Tensor], stride: int = 4,
                  final: bool = False) -> Tensor:
    """ReLU(W2 *T GLU(W1 * (skip + x) + V1 h) + V2 h); the final level keeps signed output"""
    if x.shape != skip.shape:
        raise ShapeError(f"decoder input {x.shape} and skip {skip.shape} differ")
    y = add(x, skip)
    y = conv1d(y, params_k["conv1.weight"], _conditioned_bias(params_k["conv1.bias"], params_k["cond1"], h), 1)
    y = glu(y)
    y = conv1d_transpose(y, params_k["conv2.weight"],
                         _conditioned_bias(params_k["conv2.bias"], params_k["cond2"], h), stride)
    return y if final else relu(y)


def audionet_forward(mono: Union[AudioClip, Tensor], h: Tensor, params: AudioNetParams) -> Tensor:
    """Mono [1, T] -> [output_channels, T] conditioned on h [K]"""
    config = params.config
    if isinstance(mono, AudioClip):
        if not mono.is_mono:
            raise ShapeError(f"Audio network input must be mono, got {mono.channels} channels")
        mono = Tensor(mono.samples)
    if mono.ndim != 2 or mono.shape[0] != 1:
        raise ShapeError(f"Audio network input must be [1, T], got {mono.shape}")
    if h.shape != (config.cond_dim,):
        raise ShapeError(f"Conditioning vector must have {config.cond_dim} entries, got {h.shape}")

    length = mono.shape[1]
    x = pad_time(mono, valid_length(length, config.depth, config.kernel, config.stride))

    skips: List[Tensor] = []
    for level in range(1, config.depth + 1):
        x = encoder_block(x, h, params.level("encoder", level), config.stride)
        skips.append(x)

    for level in range(config.depth, 0, -1):
        skip = skips.pop()
        x = decoder_block(x, skip, h, params.level("decoder", level), config.stride, final=level == 1)

    return trim_time(x, length)

