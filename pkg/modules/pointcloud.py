"""
Point Cloud Module
Scene representation and the ASCII "p2s-cloud v1" file format.

Axis convention: the body faces +z, stature is +y, the side direction is x.
With a listener at the origin facing +z, +x points to the listener's left.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from modules.error_handler import DataFormatError, ShapeError

logger = logging.getLogger(__name__)

HEADER_TAG = "p2s-cloud"
HEADER_VERSION = "v1"


@dataclass
class PointCloud:
    points: np.ndarray                    # [P, 3] meters
    colors: Optional[np.ndarray] = None   # [P, 3] in [0, 1]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != len(self.points):
                raise ShapeError(
                    f"{len(self.colors)} colors for {len(self.points)} points"
                )

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_colors(self) -> bool:
        return self.colors is not None

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def transformed(self, matrix: np.ndarray, offset: Sequence[float] = (0.0, 0.0, 0.0)) -> "PointCloud":
        """Apply p -> matrix @ p + offset"""
        points = self.points @ np.asarray(matrix, dtype=np.float64).T + np.asarray(offset, dtype=np.float64)
        colors = None if self.colors is None else self.colors.copy()
        return PointCloud(points, colors)

    def rotated_y(self, angle: float) -> "PointCloud":
        """Rotate about the stature axis; positive angles are counterclockwise seen from above"""
        return self.transformed(rotation_y(angle))

    def permuted(self, order: np.ndarray) -> "PointCloud":
        colors = None if self.colors is None else self.colors[order]
        return PointCloud(self.points[order], colors)

    @staticmethod
    def merge(clouds: Sequence["PointCloud"]) -> "PointCloud":
        if not clouds:
            raise ShapeError("Cannot merge an empty list of clouds")
        points = np.concatenate([c.points for c in clouds], axis=0)
        if all(c.has_colors for c in clouds):
            colors = np.concatenate([c.colors for c in clouds], axis=0)
        else:
            colors = None
        return PointCloud(points, colors)


def rotation_y(angle: float) -> np.ndarray:
    """Rotation about +y that adds ``angle`` to the azimuth atan2(x, z)"""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s],
                     [0.0, 1.0, 0.0],
                     [-s, 0.0, c]])


def write_cloud(path: Union[str, Path], cloud: PointCloud) -> None:
    path = Path(path)
    has_rgb = 1 if cloud.has_colors else 0
    lines = [f"{HEADER_TAG} {HEADER_VERSION} {len(cloud)} {has_rgb}"]
    for i, (x, y, z) in enumerate(cloud.points):
        line = f"{x:.6f} {y:.6f} {z:.6f}"
        if has_rgb:
            r, g, b = cloud.colors[i]
            line += f" {r:.6f} {g:.6f} {b:.6f}"
        lines.append(line)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_cloud(path: Union[str, Path]) -> PointCloud:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Point cloud not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DataFormatError(f"{path}: empty file")

    header = lines[0].split()
    if len(header) != 4 or header[0] != HEADER_TAG or header[1] != HEADER_VERSION:
        raise DataFormatError(f"{path}: bad header {lines[0]!r}")
    try:
        count, has_rgb = int(header[2]), int(header[3])
    except ValueError as e:
        raise DataFormatError(f"{path}: bad header {lines[0]!r}") from e
    if has_rgb not in (0, 1):
        raise DataFormatError(f"{path}: has_rgb must be 0 or 1")

    body = [line for line in lines[1:] if line.strip()]
    if len(body) != count:
        raise DataFormatError(f"{path}: header declares {count} points, found {len(body)}")
    width = 6 if has_rgb else 3
    try:
        values = np.array([[float(v) for v in line.split()] for line in body], dtype=np.float64)
    except ValueError as e:
        raise DataFormatError(f"{path}: unparsable point line") from e
    if count and values.shape != (count, width):
        raise DataFormatError(f"{path}: expected {width} values per point")
    if not np.all(np.isfinite(values)):
        raise DataFormatError(f"{path}: NaN or Inf in point data")

    values = values.reshape(count, width)
    colors = values[:, 3:6] if has_rgb else None
    return PointCloud(values[:, :3], colors)
