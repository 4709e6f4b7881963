"""Rigid transforms, pinhole projection and trajectory alignment.

Poses are camera-to-world. Quaternions follow the Hamilton convention and are
stored scalar-last ``(qx, qy, qz, qw)``, matching the trajectory text format.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

_QUAT_TOL = 1e-9


class DegenerateConfigurationError(ValueError):
    """Raised when a point configuration cannot determine a transform."""


def _check_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or abs(n - 1.0) > 1e-6:
        raise ValueError(f"quaternion must have unit norm, got |q| = {n}")
    if abs(n - 1.0) > _QUAT_TOL:
        q = q / n
    return q


@dataclass(frozen=True, eq=False)
class Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray  # (qx, qy, qz, qw)
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _check_quat(self.rotation))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> Pose:
        m = np.asarray(m, dtype=np.float64)
        return cls(Rotation.from_matrix(m[:3, :3]).as_quat(), m[:3, 3])

    @classmethod
    def from_rt(cls, r: np.ndarray, t: np.ndarray) -> Pose:
        return cls(Rotation.from_matrix(np.asarray(r, dtype=np.float64)).as_quat(), t)

    @property
    def R(self) -> np.ndarray:
        return Rotation.from_quat(self.rotation).as_matrix()

    @property
    def center(self) -> np.ndarray:
        return self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> Pose:
        return invert(self)

    def transform(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.translation

    def world_to_camera(self) -> tuple[np.ndarray, np.ndarray]:
        """Rotation and translation mapping world points into this camera."""
        r = self.R
        return r.T, -r.T @ self.translation

    def __matmul__(self, other: Pose) -> Pose:
        return compose(self, other)

    def __repr__(self) -> str:
        return f"Pose(q={self.rotation.tolist()}, t={self.translation.tolist()})"


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if int(self.width) != self.width or int(self.height) != self.height or self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive integers")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy])

    def unproject(self, pixels: np.ndarray) -> np.ndarray:
        """Camera-frame rays with unit z through the given pixels."""
        pixels = np.asarray(pixels, dtype=np.float64)
        x = (pixels[..., 0] - self.cx) / self.fx
        y = (pixels[..., 1] - self.cy) / self.fy
        return np.stack([x, y, np.ones_like(x)], axis=-1)


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    scale: float
    rotation: np.ndarray  # (qx, qy, qz, qw)
    translation: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "rotation", _check_quat(self.rotation))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @property
    def R(self) -> np.ndarray:
        return Rotation.from_quat(self.rotation).as_matrix()

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points, dtype=np.float64) @ self.R.T + self.translation

    def apply_pose(self, pose: Pose) -> Pose:
        r = self.R
        return Pose.from_rt(r @ pose.R, self.scale * r @ pose.translation + self.translation)


def project(point_world, pose: Pose, K: Intrinsics):
    """Project world points into a camera.

    Accepts a single 3-vector or an (N, 3) array. Returns ``(pixel, depth)``
    where depth is the camera-frame z; it may be non-positive, in which case
    the pixel is meaningless and the caller must check.
    """
    pts = np.asarray(point_world, dtype=np.float64)
    r_wc, t_wc = pose.world_to_camera()
    cam = pts @ r_wc.T + t_wc
    z = cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * cam[..., 0] / z + K.cx
        v = K.fy * cam[..., 1] / z + K.cy
    return np.stack([u, v], axis=-1), z


def compose(a: Pose, b: Pose) -> Pose:
    """``a ∘ b``: apply ``b`` first, then ``a``."""
    ra, rb = Rotation.from_quat(a.rotation), Rotation.from_quat(b.rotation)
    return Pose((ra * rb).as_quat(), ra.apply(b.translation) + a.translation)


def invert(a: Pose) -> Pose:
    q = a.rotation
    q_inv = np.array([-q[0], -q[1], -q[2], q[3]])
    return Pose(q_inv, -Rotation.from_quat(q_inv).apply(a.translation))


def compose_invert(a: Pose, b: Pose | None = None, mode: str = "compose") -> Pose:
    if mode == "compose":
        if b is None:
            raise ValueError("compose needs two poses")
        return compose(a, b)
    if mode == "invert":
        return invert(a)
    raise ValueError(f"unknown mode {mode!r}")


def rotation_angle(r: np.ndarray) -> float:
    """Geodesic angle (radians) of a rotation matrix."""
    # atan2 form stays accurate near 0 and pi, unlike arccos of the trace
    c = (np.trace(r) - 1.0) / 2.0
    s = 0.5 * np.linalg.norm([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return float(np.arctan2(s, c))


def rotation_error_deg(a: Pose, b: Pose) -> float:
    return float(np.degrees(rotation_angle(a.R.T @ b.R)))


def translation_error(a: Pose, b: Pose) -> float:
    return float(np.linalg.norm(a.translation - b.translation))


def umeyama_points(src: np.ndarray, dst: np.ndarray, with_scale: bool = True) -> SimilarityTransform:
    """Least-squares similarity taking ``src`` onto ``dst`` (Umeyama 1991)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("point sets must both be (N, 3)")
    if src.shape[0] < 3:
        raise DegenerateConfigurationError("alignment needs at least 3 positions")
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    spread = np.linalg.svd(xs, compute_uv=False)
    spread_d = np.linalg.svd(xd, compute_uv=False)
    if spread[1] <= 1e-9 * max(spread[0], 1.0) or spread_d[1] <= 1e-9 * max(spread_d[0], 1.0):
        raise DegenerateConfigurationError("positions are collinear or coincident")
    n = src.shape[0]
    cov = xd.T @ xs / n
    u, d, vt = np.linalg.svd(cov)
    s = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2] = -1.0
    r = u @ np.diag(s) @ vt
    var_s = (xs ** 2).sum() / n
    scale = float((d * s).sum() / var_s) if with_scale else 1.0
    t = mu_d - scale * r @ mu_s
    return SimilarityTransform(scale, Rotation.from_matrix(r).as_quat(), t)


def umeyama_align(traj_est, traj_gt, with_scale: bool = True) -> SimilarityTransform:
    if len(traj_est) != len(traj_gt):
        raise ValueError("trajectories must have equal length")
    src = np.array([p.translation for p in traj_est])
    dst = np.array([p.translation for p in traj_gt])
    return umeyama_points(src, dst, with_scale)


def alignment_residual(transform: SimilarityTransform, traj_est, traj_gt) -> float:
    """Root-mean-square position residual after applying ``transform``."""
    src = np.array([p.translation for p in traj_est])
    dst = np.array([p.translation for p in traj_gt])
    diff = transform.apply_points(src) - dst
    return float(np.sqrt((diff ** 2).sum(1).mean()))


def look_at(center, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose at ``center`` looking at ``target`` (x right, y down, z forward)."""
    center = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - center
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(x) < 1e-9:
        raise DegenerateConfigurationError("viewing direction parallel to up vector")
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose.from_rt(np.stack([x, y, z], axis=1), center)


# --- trajectory text format -------------------------------------------------


def format_pose_line(frame_id: int, pose: Pose) -> str:
    vals = list(pose.translation) + list(pose.rotation)
    return f"{int(frame_id)} " + " ".join(f"{v:.17g}" for v in vals)


def parse_pose_line(line: str, where: str = "<string>") -> tuple[int, Pose]:
    parts = line.split()
    if len(parts) != 8:
        raise ValueError(f"{where}: expected 8 fields 'frame_id tx ty tz qx qy qz qw', got {len(parts)}")
    try:
        fid = int(parts[0])
        vals = [float(v) for v in parts[1:]]
    except ValueError as exc:
        raise ValueError(f"{where}: {exc}") from None
    return fid, Pose(np.array(vals[3:]), np.array(vals[:3]))


def write_trajectory(path, frame_ids, poses) -> None:
    lines = [format_pose_line(f, p) for f, p in zip(frame_ids, poses)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path) -> tuple[list[int], list[Pose]]:
    path = Path(path)
    ids, poses = [], []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fid, pose = parse_pose_line(line, f"{path}:{n}")
        ids.append(fid)
        poses.append(pose)
    return ids, poses
