"""Point clouds and their ASCII PLY representation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(eq=False)
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
            raise ValueError(f"point cloud must be a non-empty (N, 3) array, got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("point cloud contains non-finite coordinates")
        self.points = pts

    def __len__(self) -> int:
        return self.points.shape[0]


def write_ply(path, cloud) -> None:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    header = (
        "ply\nformat ascii 1.0\n"
        f"element vertex {pts.shape[0]}\n"
        "property double x\nproperty double y\nproperty double z\nend_header\n"
    )
    body = "\n".join(f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in pts)
    Path(path).write_text(header + body + "\n")


def read_ply(path) -> PointCloud:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n, props, start = None, [], None
    for i, line in enumerate(lines[1:], 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise ValueError(f"{path}: only ASCII PLY is supported")
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts[0] == "property" and n is not None:
            props.append(parts[-1])
        elif parts[0] == "end_header":
            start = i + 1
            break
    if n is None or start is None or not {"x", "y", "z"} <= set(props):
        raise ValueError(f"{path}: PLY header lacks vertex x/y/z")
    cols = [props.index(k) for k in "xyz"]
    rows = lines[start:start + n]
    if len(rows) != n:
        raise ValueError(f"{path}: expected {n} vertices, found {len(rows)}")
    data = np.array([[float(v) for v in r.split()] for r in rows])
    return PointCloud(data[:, cols])
