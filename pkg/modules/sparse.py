"""
Sparse Voxel Module
Sparse tensors of voxelized point clouds and the generalized sparse convolution engine.

Coordinates are (batch, x, y, z) integer rows kept in lexicographic order.
Each row is packed into one int64 key (batch in the top 16 bits, each
spatial component biased by 2**15 into 16 bits), so key order equals
lexicographic coordinate order and neighbor lookups become binary searches
on the sorted key array.
"""

import hashlib
import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from modules.error_handler import ConfigError, DataFormatError, ShapeError
from modules.performance import PerformanceManager
from modules.pointcloud import PointCloud
from modules.tensor import Tensor, add, record_op, relu

logger = logging.getLogger(__name__)

COORD_BIAS = 1 << 15
COORD_LIMIT = 1 << 15

FEATURE_MODES = ("rgb-depth", "depth")

kernel_map_cache = PerformanceManager(max_entries=512)


def encode_coords(coords: np.ndarray) -> np.ndarray:
    """Pack [N, 4] integer coordinates into sortable int64 keys"""
    coords = np.asarray(coords, dtype=np.int64)
    spatial = coords[:, 1:]
    if coords.size and (
        coords[:, 0].min() < 0 or coords[:, 0].max() >= COORD_LIMIT
        or spatial.min() < -COORD_LIMIT or spatial.max() >= COORD_LIMIT
    ):
        raise ShapeError("Voxel coordinates outside the supported +/-32768 range")
    shifted = spatial + COORD_BIAS
    return (coords[:, 0] << 48) | (shifted[:, 0] << 32) | (shifted[:, 1] << 16) | shifted[:, 2]


class SparseTensor:
    """Unique sorted coordinates with one feature row per coordinate"""

    def __init__(self, coords: np.ndarray, feats: Tensor, batch_size: Optional[int] = None,
                 tensor_stride: int = 1, keys: Optional[np.ndarray] = None):
        coords = np.ascontiguousarray(coords, dtype=np.int64).reshape(-1, 4)
        if feats.ndim != 2 or feats.shape[0] != len(coords):
            raise ShapeError(f"{len(coords)} coordinates but feature shape {feats.shape}")
        if keys is None:
            keys = encode_coords(coords)
            if len(keys) > 1 and not np.all(keys[1:] > keys[:-1]):
                raise ShapeError("Coordinates must be unique and lexicographically sorted")
        self.coords = coords
        self.feats = feats
        self.keys = keys
        self.tensor_stride = tensor_stride
        if batch_size is None:
            batch_size = int(coords[:, 0].max()) + 1 if len(coords) else 0
        self.batch_size = batch_size
        self._coord_index: Optional[Dict[Tuple[int, ...], int]] = None
        self._digest: Optional[str] = None

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def width(self) -> int:
        return self.feats.shape[1]

    @property
    def coord_index(self) -> Dict[Tuple[int, ...], int]:
        """Map from coordinate tuple to feature row"""
        if self._coord_index is None:
            self._coord_index = {tuple(int(v) for v in row): i for i, row in enumerate(self.coords)}
        return self._coord_index

    @property
    def digest(self) -> str:
        if self._digest is None:
            self._digest = hashlib.sha1(self.keys.tobytes()).hexdigest()
        return self._digest

    def with_feats(self, feats: Tensor) -> "SparseTensor":
        """Same coordinates, new features"""
        out = SparseTensor(self.coords, feats, self.batch_size, self.tensor_stride, keys=self.keys)
        out._digest = self._digest
        return out

    @classmethod
    def from_arrays(cls, coords: np.ndarray, feats: np.ndarray,
                    batch_size: Optional[int] = None) -> "SparseTensor":
        """Build from unordered unique coordinates, sorting rows into canonical order"""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 4)
        keys = encode_coords(coords)
        order = np.argsort(keys, kind="stable")
        keys = keys[order]
        if len(keys) > 1 and not np.all(keys[1:] > keys[:-1]):
            raise ShapeError("Duplicate coordinates in sparse tensor")
        return cls(coords[order], Tensor(np.asarray(feats)[order]), batch_size, keys=keys)


@dataclass
class KernelMap:
    """Per kernel offset, the (input row, output row) pairs it connects"""

    kernel_size: int
    stride: int
    offsets: List[Tuple[int, int, int]]
    in_rows: List[np.ndarray] = field(default_factory=list)
    out_rows: List[np.ndarray] = field(default_factory=list)

    def pairs(self, offset: Tuple[int, int, int]) -> List[Tuple[int, int]]:
        idx = self.offsets.index(tuple(offset))
        return list(zip(self.in_rows[idx].tolist(), self.out_rows[idx].tolist()))

    def __len__(self) -> int:
        return sum(len(rows) for rows in self.in_rows)


def kernel_offsets(kernel_size: int) -> List[Tuple[int, int, int]]:
    half = kernel_size // 2
    return list(itertools.product(range(-half, half + 1), repeat=3))


def build_kernel_map(in_coords: np.ndarray, stride: int, kernel_size: int,
                     in_keys: Optional[np.ndarray] = None) -> Tuple[np.ndarray, KernelMap]:
    """Output coordinates and kernel map of a convolution.

    stride 1 keeps the input coordinates; stride s > 1 places outputs at the
    unique floor(c / s) on the coarser grid. A pair (i, o) at offset d exists
    iff coords[i] == coords_out[o] * s + d.
    """
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ConfigError(f"Kernel size must be odd, got {kernel_size}")
    if stride < 1:
        raise ConfigError(f"Stride must be >= 1, got {stride}")

    in_coords = np.asarray(in_coords, dtype=np.int64).reshape(-1, 4)
    if in_keys is None:
        in_keys = encode_coords(in_coords)
    sorter = np.argsort(in_keys, kind="stable")
    sorted_keys = in_keys[sorter]

    if stride == 1:
        out_coords = in_coords[sorter]
    else:
        coarse = in_coords.copy()
        coarse[:, 1:] = np.floor_divide(coarse[:, 1:], stride)
        out_coords = np.unique(coarse, axis=0)

    kmap = KernelMap(kernel_size, stride, kernel_offsets(kernel_size))
    base = out_coords.copy()
    base[:, 1:] *= stride
    for offset in kmap.offsets:
        target = base.copy()
        target[:, 1:] += offset
        inside = np.all((target[:, 1:] >= -COORD_LIMIT) & (target[:, 1:] < COORD_LIMIT), axis=1)
        found = np.zeros(len(target), dtype=bool)
        pos = np.zeros(len(target), dtype=np.int64)
        if inside.any() and len(sorted_keys):
            target_keys = encode_coords(target[inside])
            candidate = np.clip(np.searchsorted(sorted_keys, target_keys), 0, len(sorted_keys) - 1)
            hit = sorted_keys[candidate] == target_keys
            inside_rows = np.nonzero(inside)[0]
            found[inside_rows[hit]] = True
            pos[inside_rows[hit]] = candidate[hit]
        out_rows = np.nonzero(found)[0]
        kmap.in_rows.append(sorter[pos[out_rows]])
        kmap.out_rows.append(out_rows)
    return out_coords, kmap


def kernel_map_for(tensor: SparseTensor, stride: int, kernel_size: int) -> Tuple[np.ndarray, np.ndarray, KernelMap]:
    """Cached (out_coords, out_keys, kernel map) for a tensor's coordinate set"""
    cache_key = (tensor.digest, stride, kernel_size)
    cached = kernel_map_cache.get_cached_result(cache_key)
    if cached is not None:
        return cached
    out_coords, kmap = build_kernel_map(tensor.coords, stride, kernel_size, in_keys=tensor.keys)
    out_keys = tensor.keys if stride == 1 else encode_coords(out_coords)
    result = (out_coords, out_keys, kmap)
    kernel_map_cache.cache_result(cache_key, result)
    return result


@dataclass
class SparseConvParams:
    weight: Tensor                 # [(2L+1)^3, C_in, C_out]
    bias: Optional[Tensor] = None  # [C_out]
    stride: int = 1

    @property
    def kernel_size(self) -> int:
        volume = self.weight.shape[0]
        size = int(round(volume ** (1.0 / 3.0)))
        if size ** 3 != volume:
            raise ShapeError(f"Weight has {volume} offsets, not a cubic kernel volume")
        return size


def sparse_conv(tensor: SparseTensor, params: SparseConvParams) -> SparseTensor:
    """Gather-multiply-scatter over the kernel map"""
    weight = params.weight
    if weight.ndim != 3 or weight.shape[1] != tensor.width:
        raise ShapeError(f"sparse_conv: input width {tensor.width}, weight shape {weight.shape}")
    out_coords, out_keys, kmap = kernel_map_for(tensor, params.stride, params.kernel_size)
    x = tensor.feats.data
    w = weight.data
    out = np.zeros((len(out_coords), w.shape[2]), dtype=x.dtype)
    # a given offset never repeats an output row, so fancy-index accumulation is exact
    for idx, (in_rows, out_rows) in enumerate(zip(kmap.in_rows, kmap.out_rows)):
        if len(in_rows):
            out[out_rows] += x[in_rows] @ w[idx]
    bias = params.bias
    if bias is not None:
        out += bias.data

    def backward(g):
        grad_x = np.zeros_like(x)
        grad_w = np.zeros_like(w)
        for idx, (in_rows, out_rows) in enumerate(zip(kmap.in_rows, kmap.out_rows)):
            if len(in_rows):
                g_rows = g[out_rows]
                grad_x[in_rows] += g_rows @ w[idx].T
                grad_w[idx] = x[in_rows].T @ g_rows
        grad_b = g.sum(axis=0) if bias is not None else None
        return grad_x, grad_w, grad_b

    inputs = [tensor.feats, weight] + ([bias] if bias is not None else [])
    feats = record_op("sparse_conv", inputs, out, backward)
    result = SparseTensor(out_coords, feats, tensor.batch_size,
                          tensor.tensor_stride * params.stride, keys=out_keys)
    if params.stride == 1:
        result._digest = tensor._digest
    return result


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5


def batch_norm(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel normalization of an [N, C] feature matrix"""
    gamma, beta = state.gamma, state.beta
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: features {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    data = x.data
    if training:
        n = data.shape[0]
        if n < 2:
            raise ShapeError("batch_norm needs at least 2 rows in training mode")
        mu = data.mean(axis=0)
        var = data.var(axis=0)
        state.running_mean[...] = (1.0 - state.momentum) * state.running_mean + state.momentum * mu
        state.running_var[...] = (1.0 - state.momentum) * state.running_var + state.momentum * var * n / (n - 1)
    else:
        mu = state.running_mean.astype(data.dtype)
        var = state.running_var.astype(data.dtype)
    inv_std = 1.0 / np.sqrt(var + state.eps)
    x_hat = (data - mu) * inv_std
    out = gamma.data * x_hat + beta.data

    def backward(g):
        grad_gamma = (g * x_hat).sum(axis=0)
        grad_beta = g.sum(axis=0)
        d_hat = g * gamma.data
        if training:
            n = data.shape[0]
            grad_x = inv_std / n * (n * d_hat - d_hat.sum(axis=0) - x_hat * (d_hat * x_hat).sum(axis=0))
        else:
            grad_x = d_hat * inv_std
        return grad_x.astype(data.dtype), grad_gamma, grad_beta

    return record_op("batch_norm", [x, gamma, beta], out.astype(data.dtype), backward)


def sparse_batch_norm(tensor: SparseTensor, state: BatchNormState, training: bool) -> SparseTensor:
    return tensor.with_feats(batch_norm(tensor.feats, state, training))


def sparse_relu(tensor: SparseTensor) -> SparseTensor:
    return tensor.with_feats(relu(tensor.feats))


def sparse_add(a: SparseTensor, b: SparseTensor) -> SparseTensor:
    if len(a.keys) != len(b.keys) or not np.array_equal(a.keys, b.keys):
        raise ShapeError("sparse_add needs identical coordinate sets")
    return a.with_feats(add(a.feats, b.feats))


def global_max_pool(tensor: SparseTensor) -> Tensor:
    """Per batch item, per channel maximum over all rows -> [B, C]"""
    batch_ids = tensor.coords[:, 0]
    n_items = tensor.batch_size
    starts = np.searchsorted(batch_ids, np.arange(n_items), side="left")
    ends = np.searchsorted(batch_ids, np.arange(n_items), side="right")
    empty = np.nonzero(ends <= starts)[0]
    if len(empty):
        raise ShapeError(f"global_max_pool: batch item {int(empty[0])} has no coordinates")

    x = tensor.feats.data
    channels = np.arange(x.shape[1])
    argmax_rows = np.empty((n_items, x.shape[1]), dtype=np.int64)
    out = np.empty((n_items, x.shape[1]), dtype=x.dtype)
    for b in range(n_items):
        segment = x[starts[b]:ends[b]]
        first = segment.argmax(axis=0)
        argmax_rows[b] = starts[b] + first
        out[b] = segment[first, channels]

    def backward(g):
        grad = np.zeros_like(x)
        for b in range(n_items):
            grad[argmax_rows[b], channels] += g[b]
        return (grad,)

    return record_op("global_max_pool", [tensor.feats], out, backward)


def voxelize(cloud: PointCloud, voxel_size: float, feature_mode: str = "rgb-depth",
             batch_index: int = 0) -> SparseTensor:
    """Floor-quantize a cloud and average the features of points sharing a voxel.

    Features are colors in rgb-depth mode and the non-discretized coordinates
    in depth mode. Averages are taken in 64-bit before casting to the current
    precision.
    """
    if voxel_size <= 0:
        raise ConfigError(f"Voxel size must be positive, got {voxel_size}")
    if len(cloud) == 0:
        raise ShapeError("Cannot voxelize an empty cloud")
    if feature_mode not in FEATURE_MODES:
        raise ConfigError(f"Unknown feature mode {feature_mode!r}")
    if feature_mode == "rgb-depth":
        if not cloud.has_colors:
            raise DataFormatError("rgb-depth features need a colored point cloud")
        feats = cloud.colors
    else:
        feats = cloud.points

    grid = np.floor(cloud.points / voxel_size).astype(np.int64)
    coords = np.concatenate([np.full((len(grid), 1), batch_index, dtype=np.int64), grid], axis=1)
    keys = encode_coords(coords)

    # canonical order inside each voxel so averages do not depend on point order
    order = np.lexsort((cloud.points[:, 2], cloud.points[:, 1], cloud.points[:, 0],
                        feats[:, 2], feats[:, 1], feats[:, 0], keys))
    keys = keys[order]
    starts = np.concatenate([[0], np.nonzero(keys[1:] != keys[:-1])[0] + 1])
    counts = np.diff(np.append(starts, len(keys)))
    sums = np.add.reduceat(feats[order], starts, axis=0)
    return SparseTensor(coords[order][starts], Tensor(sums / counts[:, None]),
                        batch_size=batch_index + 1, keys=keys[starts])


def sparse_collate(items: List[SparseTensor]) -> SparseTensor:
    """Stack single-scene tensors into one batched tensor; item i gets batch index i"""
    if not items:
        raise ShapeError("Cannot collate an empty batch")
    coords, feats = [], []
    for b, item in enumerate(items):
        if len(item) == 0:
            raise ShapeError(f"Scene {b} is empty")
        c = item.coords.copy()
        c[:, 0] = b
        coords.append(c)
        feats.append(item.feats.data)
    coords = np.concatenate(coords, axis=0)
    return SparseTensor(coords, Tensor(np.concatenate(feats, axis=0)), batch_size=len(items))
