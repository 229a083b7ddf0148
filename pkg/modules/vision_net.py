"""
Vision Network Module
Sparse ResNet18 mapping a voxelized scene to the conditioning vector h.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, Tuple

import numpy as np

from modules.config import VisionConfig
from modules.error_handler import ShapeError
from modules.sparse import (
    BatchNormState,
    SparseConvParams,
    SparseTensor,
    global_max_pool,
    sparse_add,
    sparse_batch_norm,
    sparse_conv,
    sparse_relu,
)
from modules.tensor import Tensor, get_dtype, uniform_param

logger = logging.getLogger(__name__)

INPUT_WIDTH = 3
BLOCKS_PER_STAGE = 2


@dataclass
class VisionParams:
    config: VisionConfig
    tensors: Dict[str, Tensor] = field(default_factory=dict)
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def initialize(cls, config: VisionConfig, seed: int = 0) -> "VisionParams":
        config.validate()
        rng = np.random.default_rng(seed)
        params = cls(config)
        c_in = INPUT_WIDTH
        params._add_conv("stem.conv", rng, 3, c_in, config.stage_channels[0])
        params._add_bn("stem.bn", config.stage_channels[0])
        c_in = config.stage_channels[0]
        for stage, c_out in enumerate(config.stage_channels, start=1):
            for block in range(1, BLOCKS_PER_STAGE + 1):
                prefix = f"stage{stage}.block{block}"
                stride = block_stride(stage, block)
                params._add_conv(f"{prefix}.conv1", rng, 3, c_in, c_out)
                params._add_bn(f"{prefix}.bn1", c_out)
                params._add_conv(f"{prefix}.conv2", rng, 3, c_out, c_out)
                params._add_bn(f"{prefix}.bn2", c_out)
                if stride != 1 or c_in != c_out:
                    params._add_conv(f"{prefix}.downsample.conv", rng, 1, c_in, c_out)
                    params._add_bn(f"{prefix}.downsample.bn", c_out)
                c_in = c_out
        params._add_conv("head.conv", rng, 3, c_in, config.head_channels, bias=True)
        return params

    def _add_conv(self, name: str, rng, kernel: int, c_in: int, c_out: int, bias: bool = False) -> None:
        volume = kernel ** 3
        fan_in = volume * c_in
        self.tensors[f"{name}.weight"] = uniform_param(rng, (volume, c_in, c_out), fan_in, f"{name}.weight")
        if bias:
            self.tensors[f"{name}.bias"] = uniform_param(rng, (c_out,), fan_in, f"{name}.bias")

    def _add_bn(self, name: str, channels: int) -> None:
        dtype = get_dtype()
        self.tensors[f"{name}.gamma"] = Tensor(np.ones(channels, dtype=dtype), requires_grad=True, name=f"{name}.gamma")
        self.tensors[f"{name}.beta"] = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True, name=f"{name}.beta")
        self.buffers[f"{name}.running_mean"] = np.zeros(channels, dtype=np.float64)
        self.buffers[f"{name}.running_var"] = np.ones(channels, dtype=np.float64)

    def conv(self, name: str, stride: int = 1) -> SparseConvParams:
        return SparseConvParams(self.tensors[f"{name}.weight"], self.tensors.get(f"{name}.bias"), stride)

    def bn(self, name: str) -> BatchNormState:
        return BatchNormState(
            gamma=self.tensors[f"{name}.gamma"],
            beta=self.tensors[f"{name}.beta"],
            running_mean=self.buffers[f"{name}.running_mean"],
            running_var=self.buffers[f"{name}.running_var"],
        )

    def has(self, name: str) -> bool:
        return f"{name}.weight" in self.tensors

    def named_tensors(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.tensors.items())


def block_stride(stage: int, block: int) -> int:
    """First block of stages 2-4 halves the resolution"""
    return 2 if stage > 1 and block == 1 else 1


def residual_block(tensor: SparseTensor, params: VisionParams, prefix: str, stride: int,
                   training: bool) -> SparseTensor:
    """conv-BN-ReLU-conv-BN plus identity or strided 1x1x1 projection, ReLU after the sum"""
    conv1 = params.conv(f"{prefix}.conv1", stride)
    if conv1.weight.shape[1] != tensor.width:
        raise ShapeError(f"{prefix}: block expects width {conv1.weight.shape[1]}, got {tensor.width}")

    out = sparse_conv(tensor, conv1)
    out = sparse_relu(sparse_batch_norm(out, params.bn(f"{prefix}.bn1"), training))
    out = sparse_conv(out, params.conv(f"{prefix}.conv2", 1))
    out = sparse_batch_norm(out, params.bn(f"{prefix}.bn2"), training)

    if params.has(f"{prefix}.downsample.conv"):
        shortcut = sparse_conv(tensor, params.conv(f"{prefix}.downsample.conv", stride))
        shortcut = sparse_batch_norm(shortcut, params.bn(f"{prefix}.downsample.bn"), training)
    else:
        shortcut = tensor
    return sparse_relu(sparse_add(out, shortcut))


def vision_forward(scene: SparseTensor, params: VisionParams, training: bool = False) -> Tensor:
    """Scene -> conditioning vectors h, one row of K entries per batch item"""
    if len(scene) == 0:
        raise ShapeError("Cannot run the vision network on an empty scene")
    if scene.width != INPUT_WIDTH:
        raise ShapeError(f"Scene features must be {INPUT_WIDTH} wide, got {scene.width}")

    x = sparse_conv(scene, params.conv("stem.conv", 1))
    x = sparse_relu(sparse_batch_norm(x, params.bn("stem.bn"), training))
    for stage in range(1, len(params.config.stage_channels) + 1):
        for block in range(1, BLOCKS_PER_STAGE + 1):
            x = residual_block(x, params, f"stage{stage}.block{block}", block_stride(stage, block), training)
    x = sparse_conv(x, params.conv("head.conv", 1))
    return global_max_pool(x)

