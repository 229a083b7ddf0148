"""
Checkpoint Module
Binary little-endian container for named tensors.

Layout: magic "P2SC", version u32, count u32, then per tensor
name length u16 + UTF-8 name, dtype tag u8 (0=f32, 1=f64), ndim u8,
dims as u64, raw data.
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from modules.error_handler import CheckpointError
from modules.tensor import AdamState

logger = logging.getLogger(__name__)

MAGIC = b"P2SC"
FORMAT_VERSION = 1

_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

ADAM_M_PREFIX = "adam.m."
ADAM_V_PREFIX = "adam.v."
ADAM_STEP = "adam.step"
ADAM_HYPERPARAMETERS = ("lr", "beta1", "beta2", "eps")


@dataclass
class Checkpoint:
    """Named arrays of both networks plus optional optimizer state"""

    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    adam: Optional[AdamState] = None

    def to_records(self) -> Dict[str, np.ndarray]:
        records = dict(self.tensors)
        if self.adam is not None:
            for name, value in self.adam.m.items():
                records[ADAM_M_PREFIX + name] = value
            for name, value in self.adam.v.items():
                records[ADAM_V_PREFIX + name] = value
            records[ADAM_STEP] = np.asarray(float(self.adam.step), dtype=np.float64)
            for key in ADAM_HYPERPARAMETERS:
                records[f"adam.{key}"] = np.asarray(float(getattr(self.adam, key)), dtype=np.float64)
        return records

    @classmethod
    def from_records(cls, records: Dict[str, np.ndarray]) -> "Checkpoint":
        """Checkpoints written without optimizer hyperparameters get the AdamState defaults"""
        tensors = {}
        adam = None
        m, v = {}, {}
        hyper = {}
        for name, value in records.items():
            if name.startswith(ADAM_M_PREFIX):
                m[name[len(ADAM_M_PREFIX):]] = value
            elif name.startswith(ADAM_V_PREFIX):
                v[name[len(ADAM_V_PREFIX):]] = value
            elif name == ADAM_STEP:
                adam = AdamState(step=int(value.reshape(-1)[0]))
            elif name.startswith("adam.") and name[len("adam."):] in ADAM_HYPERPARAMETERS:
                hyper[name[len("adam."):]] = float(value.reshape(-1)[0])
            else:
                tensors[name] = value
        if adam is not None:
            adam.m, adam.v = m, v
            for key, value in hyper.items():
                setattr(adam, key, value)
        return cls(tensors=tensors, adam=adam)

    def save(self, path: Union[str, Path]) -> None:
        write_checkpoint(path, self.to_records())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Checkpoint":
        return cls.from_records(read_checkpoint(path))


def encode_records(records: Dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(records))]
    for name, value in records.items():
        array = np.asarray(value)
        dtype = array.dtype.newbyteorder("<")
        if dtype not in _DTYPE_TAGS:
            raise CheckpointError(f"Unsupported dtype {array.dtype} for tensor {name}")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"Tensor name too long: {name[:40]}...")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", _DTYPE_TAGS[dtype], array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype=dtype).tobytes())
    return b"".join(chunks)


def decode_records(payload: bytes) -> Dict[str, np.ndarray]:
    if payload[:4] != MAGIC:
        raise CheckpointError("Not a checkpoint file (bad magic)")
    try:
        version, count = struct.unpack_from("<II", payload, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"Unsupported checkpoint version {version}")
        offset = 12
        records = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", payload, offset)
            offset += 2
            name = payload[offset:offset + name_len].decode("utf-8")
            offset += name_len
            tag, ndim = struct.unpack_from("<BB", payload, offset)
            offset += 2
            if tag not in _TAG_DTYPES:
                raise CheckpointError(f"Unknown dtype tag {tag} for tensor {name}")
            shape = struct.unpack_from(f"<{ndim}Q", payload, offset)
            offset += 8 * ndim
            dtype = _TAG_DTYPES[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if offset + nbytes > len(payload):
                raise CheckpointError(f"Truncated data for tensor {name}")
            records[name] = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize,
                                          offset=offset).reshape(shape).copy()
            offset += nbytes
    except struct.error as e:
        raise CheckpointError(f"Truncated checkpoint: {e}") from e
    return records


def write_checkpoint(path: Union[str, Path], records: Dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_records(records))
    logger.info(f"Checkpoint written: {path} ({len(records)} tensors)")


def read_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    return decode_records(path.read_bytes())
