"""Synthetic indoor scenes with controllable texture-poor surfaces.

A scene is a box room (floor, ceiling and four walls, each split into panels)
plus axis-aligned furniture boxes standing on the floor. Every panel carries a
texture richness ``rho``; panels with ``rho < 0.1`` are texture-poor and render
a feature that depends on the panel id only, so all of their pixels look the
same from every viewpoint.

Rendering follows the output grid of a stride-8 regression network: a
640x480 camera yields an 80x60 feature map whose cell ``(i, j)`` sits on
pixel ``(stride * (j + 0.5), stride * (i + 0.5))``.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from . import kernels
from .geometry import Intrinsics, Pose, format_pose_line, parse_pose_line

logger = logging.getLogger(__name__)

TEXTURE_POOR_RHO = 0.1
BUNDLE_VERSION = 1


class InfeasibleSceneError(ValueError):
    pass


class TrajectoryError(RuntimeError):
    pass


class BundleFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Surface:
    sid: int
    kind: str
    origin: np.ndarray
    u: np.ndarray
    v: np.ndarray
    rho: float

    @property
    def area(self) -> float:
        return float(np.linalg.norm(np.cross(self.u, self.v)))

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.u, self.v)
        return n / np.linalg.norm(n)

    @property
    def texture_poor(self) -> bool:
        return self.rho < TEXTURE_POOR_RHO


@dataclass(frozen=True)
class SceneConfig:
    room_min: tuple[float, float, float] = (3.0, 3.0, 2.4)
    room_max: tuple[float, float, float] = (4.6, 4.6, 2.8)
    furniture_count: int = 3
    textureless_fraction: float = 0.0
    panel_size: float = 1.2

    def __post_init__(self):
        if any(lo <= 0 or hi < lo for lo, hi in zip(self.room_min, self.room_max)):
            raise ValueError("room size range must be positive and ordered")
        if not 0.0 <= self.textureless_fraction <= 1.0:
            raise ValueError("textureless_fraction must lie in [0, 1]")
        if self.furniture_count < 0:
            raise ValueError("furniture_count must be non-negative")
        if self.panel_size <= 0:
            raise ValueError("panel_size must be positive")


@dataclass(eq=False)
class SceneModel:
    extents: np.ndarray
    surfaces: list[Surface]
    seed: int
    boxes: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def surface_arrays(self):
        o = np.array([s.origin for s in self.surfaces])
        u = np.array([s.u for s in self.surfaces])
        v = np.array([s.v for s in self.surfaces])
        return o, u, v

    def texture_poor_fraction(self) -> float:
        areas = np.array([s.area for s in self.surfaces])
        poor = np.array([s.texture_poor for s in self.surfaces])
        return float(areas[poor].sum() / areas.sum())

    def contains(self, points: np.ndarray, margin: float = 0.0) -> np.ndarray:
        """True where points lie in free space at least ``margin`` from room walls and boxes."""
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        half = self.extents[:2] / 2
        ok = (np.abs(p[:, 0]) < half[0] - margin) & (np.abs(p[:, 1]) < half[1] - margin)
        ok &= (p[:, 2] > margin) & (p[:, 2] < self.extents[2] - margin)
        for lo, hi in self.boxes:
            inside = np.all((p > lo - margin) & (p < hi + margin), axis=1)
            ok &= ~inside
        return ok


# --- scene generation --------------------------------------------------------


def _panels(kind, origin, u, v, panel_size):
    nu = max(1, int(round(np.linalg.norm(u) / panel_size)))
    nv = max(1, int(round(np.linalg.norm(v) / panel_size)))
    out = []
    for a in range(nu):
        for b in range(nv):
            out.append((kind, origin + u * a / nu + v * b / nv, u / nu, v / nv))
    return out


def _room_faces(lx, ly, lz, panel_size):
    x0, y0 = -lx / 2, -ly / 2
    X, Y, Z = np.array([lx, 0, 0.0]), np.array([0, ly, 0.0]), np.array([0, 0, lz])
    faces = [
        ("floor", np.array([x0, y0, 0.0]), X, Y),
        ("ceiling", np.array([x0, y0, lz]), Y, X),
        ("wall", np.array([x0, y0, 0.0]), Y, Z),
        ("wall", np.array([-x0, y0, 0.0]), Z, Y),
        ("wall", np.array([x0, y0, 0.0]), Z, X),
        ("wall", np.array([x0, -y0, 0.0]), X, Z),
    ]
    out = []
    for kind, o, u, v in faces:
        out.extend(_panels(kind, o, u, v, panel_size))
    return out


def _box_faces(lo, hi):
    (x0, y0, _), (x1, y1, h) = lo, hi
    w, d = x1 - x0, y1 - y0
    W, D, H = np.array([w, 0, 0.0]), np.array([0, d, 0.0]), np.array([0, 0, h])
    return [
        ("furniture", np.array([x0, y0, h]), W, D),
        ("furniture", np.array([x1, y0, 0.0]), D, H),
        ("furniture", np.array([x0, y0, 0.0]), H, D),
        ("furniture", np.array([x0, y0, 0.0]), W, H),
        ("furniture", np.array([x0, y1, 0.0]), H, W),
    ]


def _place_boxes(rng, lx, ly, count):
    footprint_max = 1.2 * 1.2
    if count * 0.4 * 0.4 > 0.5 * lx * ly:
        raise InfeasibleSceneError(
            f"{count} furniture boxes cannot fit in a {lx:.2f} x {ly:.2f} m floor"
        )
    boxes = []
    for _ in range(count):
        for _attempt in range(500):
            w, d = rng.uniform(0.4, 1.2, size=2)
            h = rng.uniform(0.4, 1.0)
            # keep the centre of the room free for cameras
            side = rng.integers(4)
            gap = 0.05
            if side in (0, 1):
                x = -lx / 2 + gap if side == 0 else lx / 2 - gap - w
                y = rng.uniform(-ly / 2 + gap, ly / 2 - gap - d)
            else:
                y = -ly / 2 + gap if side == 2 else ly / 2 - gap - d
                x = rng.uniform(-lx / 2 + gap, lx / 2 - gap - w)
            lo, hi = np.array([x, y, 0.0]), np.array([x + w, y + d, h])
            clear = all(
                np.any(lo[:2] > bhi[:2] + 0.1) or np.any(hi[:2] < blo[:2] - 0.1) for blo, bhi in boxes
            )
            if clear:
                boxes.append((lo, hi))
                break
        else:
            raise InfeasibleSceneError(
                f"could not place {count} furniture boxes (max footprint {footprint_max} m^2)"
            )
    return boxes


def _choose_texture_poor(rng, areas, fraction):
    n = len(areas)
    target = fraction * areas.sum()
    if fraction <= 0:
        return np.zeros(n, dtype=bool)
    if fraction >= 1:
        return np.ones(n, dtype=bool)
    best, best_err = None, np.inf
    for _ in range(200):
        order = rng.permutation(n)
        chosen = np.zeros(n, dtype=bool)
        total = 0.0
        for i in order:
            if abs(total + areas[i] - target) < abs(total - target):
                chosen[i] = True
                total += areas[i]
        err = abs(total - target)
        if err < best_err:
            best, best_err = chosen, err
        if err < 0.01 * areas.sum():
            break
    return best


def generate_scene(seed: int, config: SceneConfig | None = None) -> SceneModel:
    config = config or SceneConfig()
    rng = np.random.default_rng([int(seed), 1])
    lx, ly, lz = rng.uniform(config.room_min, config.room_max)
    boxes = _place_boxes(rng, lx, ly, config.furniture_count)
    faces = _room_faces(lx, ly, lz, config.panel_size)
    for lo, hi in boxes:
        faces.extend(_box_faces(lo, hi))
    areas = np.array([np.linalg.norm(np.cross(u, v)) for _, _, u, v in faces])
    poor = _choose_texture_poor(rng, areas, config.textureless_fraction)
    rho = np.where(poor, rng.uniform(0.0, 0.09, len(faces)), rng.uniform(0.3, 1.0, len(faces)))
    surfaces = [
        Surface(i, kind, o, u, v, float(r)) for i, ((kind, o, u, v), r) in enumerate(zip(faces, rho))
    ]
    return SceneModel(np.array([lx, ly, lz]), surfaces, int(seed), boxes)


def surface_distance(points: np.ndarray, scene: SceneModel) -> np.ndarray:
    """Distance from each point to the nearest scene rectangle."""
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    best = np.full(p.shape[0], np.inf)
    for s in scene.surfaces:
        rel = p - s.origin
        a = np.clip(rel @ s.u / (s.u @ s.u), 0, 1)
        b = np.clip(rel @ s.v / (s.v @ s.v), 0, 1)
        closest = s.origin + a[:, None] * s.u + b[:, None] * s.v
        best = np.minimum(best, np.linalg.norm(p - closest, axis=1))
    return best


def sample_surface_points(scene: SceneModel, n: int, seed: int) -> np.ndarray:
    """Area-uniform samples on the scene surfaces (a dense 'scan')."""
    rng = np.random.default_rng([int(seed), 11])
    areas = np.array([s.area for s in scene.surfaces])
    idx = rng.choice(len(areas), size=n, p=areas / areas.sum())
    o, u, v = scene.surface_arrays()
    a, b = rng.random(n), rng.random(n)
    return o[idx] + a[:, None] * u[idx] + b[:, None] * v[idx]


# --- trajectories --------------------------------------------------------------


def _camera_pose(center, yaw, pitch, roll) -> Pose:
    # camera axes: x right, y down, z forward; world z is up
    base = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    r = Rotation.from_euler("ZYX", [yaw, -pitch, roll]).as_matrix() @ base
    return Pose.from_rt(r, center)


def _coarse_depth(scene, pose, K, step=32):
    us = np.arange(step / 2, K.width, step)
    vs = np.arange(step / 2, K.height, step)
    uu, vv = np.meshgrid(us, vs)
    rays = K.unproject(np.stack([uu.ravel(), vv.ravel()], -1)) @ pose.R.T
    t, _, _, _ = kernels.raycast_rectangles(pose.translation, rays, *scene.surface_arrays())
    return t


def _pose_ok(scene, pose, K, margin):
    if not scene.contains(pose.translation, margin)[0]:
        return False
    d = _coarse_depth(scene, pose, K)
    good = np.isfinite(d) & (d >= 0.3) & (d <= 10.0)
    return good.mean() >= 0.5


def generate_trajectory(scene: SceneModel, n_frames: int, seed: int, K: Intrinsics | None = None,
                        max_step: float = 0.12, max_retries: int = 200) -> list[Pose]:
    """Smooth handheld-style sweep: the camera wanders near the room centre while
    its heading turns steadily so the walls are covered."""
    if n_frames < 2:
        raise ValueError("n_frames must be at least 2")
    K = K or default_intrinsics()
    rng = np.random.default_rng([int(seed), 2])
    lx, ly, lz = scene.extents
    margin = 0.35
    yaw_rate = np.radians(np.clip(360.0 / max(n_frames, 24), 3.0, 10.0))

    def random_start():
        for _ in range(max_retries):
            c = np.array([rng.uniform(-lx / 3, lx / 3), rng.uniform(-ly / 3, ly / 3),
                          rng.uniform(1.2, min(1.6, lz - 0.5))])
            pose = _camera_pose(c, rng.uniform(-np.pi, np.pi), np.radians(-12.0), 0.0)
            if _pose_ok(scene, pose, K, margin):
                return c, pose
        raise TrajectoryError("could not place a starting camera inside free space")

    center, pose = random_start()
    # recover the heading of the start pose from its optical axis
    fwd = pose.R[:, 2]
    yaw = float(np.arctan2(fwd[1], fwd[0]))
    pitch, roll = np.radians(-20.0), 0.0
    vel = np.zeros(3)
    poses = [pose]
    while len(poses) < n_frames:
        for _ in range(max_retries):
            v = 0.7 * vel + rng.normal(0, [0.04, 0.04, 0.01])
            # pull gently toward the room centre so the walk stays away from walls
            v[:2] += -0.02 * center[:2] / np.array([lx / 2, ly / 2])
            v[2] += -0.05 * (center[2] - 1.4)
            step = np.linalg.norm(v)
            if step > max_step:
                v *= max_step / step
            d_yaw = yaw_rate + rng.normal(0, np.radians(1.5))
            new_pitch = np.clip(pitch + rng.normal(0, np.radians(2.5)), np.radians(-45), np.radians(0))
            new_roll = np.clip(roll + rng.normal(0, np.radians(0.5)), np.radians(-4), np.radians(4))
            cand = _camera_pose(center + v, yaw + d_yaw, new_pitch, new_roll)
            if _pose_ok(scene, cand, K, margin):
                center, vel = center + v, v
                yaw, pitch, roll = yaw + d_yaw, new_pitch, new_roll
                poses.append(cand)
                break
            vel = -0.5 * vel
        else:
            raise TrajectoryError(f"could not extend trajectory past frame {len(poses)}")
    return poses


# --- rendering -----------------------------------------------------------------


def default_intrinsics() -> Intrinsics:
    return Intrinsics(525.0, 525.0, 320.0, 240.0, 640, 480)


@dataclass(eq=False)
class FrameBundle:
    pose: Pose
    K: Intrinsics
    feature_map: np.ndarray  # (H, W, F) float32
    gt_coords: np.ndarray  # (H, W, 3)
    gt_depth: np.ndarray  # (H, W), NaN = invalid
    texture_mask: np.ndarray  # (H, W) bool
    frame_id: int
    stride: int = 8

    @property
    def shape(self) -> tuple[int, int]:
        return self.gt_depth.shape

    def pixel_grid(self) -> np.ndarray:
        return pixel_grid(self.shape[0], self.shape[1], self.stride)


def pixel_grid(h: int, w: int, stride: int) -> np.ndarray:
    """(H, W, 2) pixel positions of the output cells."""
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    return np.stack([(jj + 0.5) * stride, (ii + 0.5) * stride], axis=-1).astype(np.float64)


def backproject_depth(depth: np.ndarray, pose: Pose, K: Intrinsics, stride: int) -> np.ndarray:
    rays = K.unproject(pixel_grid(*depth.shape, stride))
    cam = rays * depth[..., None]
    return cam @ pose.R.T + pose.translation


class FeatureEmbedding:
    """Deterministic per-surface embedding of quantized surface positions.

    Texture-rich surfaces map a quantized 2D surface position through random
    Fourier features seeded by ``(scene seed, surface id)``; texture-poor
    surfaces get a single vector per surface.
    """

    def __init__(self, scene: SceneModel, dim: int, bandwidth: float = 3.0, quantum: float = 0.001):
        if dim < 8 or dim % 2:
            raise ValueError("feature dimension must be an even number >= 8")
        self.dim, self.quantum = dim, quantum
        n = len(scene.surfaces)
        self.freq = np.empty((n, dim, 2))
        self.phase = np.empty((n, dim))
        self.code = np.empty((n, dim))
        for s in scene.surfaces:
            rng = np.random.default_rng([scene.seed, s.sid, 7919])
            self.freq[s.sid] = rng.normal(0.0, bandwidth, size=(dim, 2))
            self.phase[s.sid] = rng.uniform(0.0, 2 * np.pi, size=dim)
            self.code[s.sid] = rng.normal(0.0, 1.0 / np.sqrt(dim), size=dim)
        self.poor = np.array([s.texture_poor for s in scene.surfaces])

    def __call__(self, sid: np.ndarray, local: np.ndarray) -> np.ndarray:
        q = (np.floor(local / self.quantum) + 0.5) * self.quantum
        q = np.where(self.poor[sid][:, None], 0.0, q)
        arg = np.einsum("nfk,nk->nf", self.freq[sid], q) + self.phase[sid]
        feat = 0.5 * self.code[sid] + np.sqrt(2.0 / self.dim) * np.cos(arg)
        return feat / np.linalg.norm(feat, axis=1, keepdims=True)


def render_frame(scene: SceneModel, pose: Pose, K: Intrinsics, F: int = 32, feature_noise_sigma: float = 0.0,
                 stride: int = 8, seed: int = 0, frame_id: int = 0,
                 embedding: FeatureEmbedding | None = None) -> FrameBundle:
    h, w = K.height // stride, K.width // stride
    grid = pixel_grid(h, w, stride).reshape(-1, 2)
    rays = K.unproject(grid) @ pose.R.T
    o, u, v = scene.surface_arrays()
    t, sid, a, b = kernels.raycast_rectangles(pose.translation, rays, o, u, v)
    valid = np.isfinite(t)
    # millimetre depth so the on-disk raster round-trips exactly
    depth = np.where(valid, np.round(np.where(valid, t, 0.0) * 1000.0) / 1000.0, np.nan)
    valid &= depth > 0
    depth = np.where(valid, depth, np.nan).reshape(h, w)
    coords = backproject_depth(depth, pose, K, stride)

    emb = embedding or FeatureEmbedding(scene, F)
    if emb.dim != F:
        raise ValueError("embedding dimension does not match F")
    feats = np.zeros((h * w, F))
    idx = np.flatnonzero(valid.ravel())
    if idx.size:
        ulen = np.linalg.norm(u[sid[idx]], axis=1)
        vlen = np.linalg.norm(v[sid[idx]], axis=1)
        local = np.stack([a[idx] * ulen, b[idx] * vlen], axis=1)
        feats[idx] = emb(sid[idx], local)
    if feature_noise_sigma > 0:
        rng = np.random.default_rng([scene.seed, int(seed), int(frame_id), 3])
        feats += rng.normal(0.0, feature_noise_sigma, size=feats.shape)
    rich = np.zeros(h * w, dtype=bool)
    rich[idx] = ~emb.poor[sid[idx]]
    return FrameBundle(pose, K, feats.reshape(h, w, F).astype(np.float32), coords, depth,
                       rich.reshape(h, w), int(frame_id), stride)


# --- datasets --------------------------------------------------------------------


@dataclass(eq=False)
class DatasetBundle:
    frames: list[FrameBundle]
    split: dict[str, list[int]]
    scene: SceneModel
    depth_sensor: bool = False

    def __post_init__(self):
        ids = {f.frame_id for f in self.frames}
        m, q = set(self.split.get("mapping", [])), set(self.split.get("query", []))
        if m & q:
            raise ValueError("mapping and query splits overlap")
        if not (m | q) <= ids:
            raise ValueError("split references unknown frame ids")

    def frame(self, fid: int) -> FrameBundle:
        for f in self.frames:
            if f.frame_id == fid:
                return f
        raise KeyError(fid)

    @property
    def mapping_frames(self) -> list[FrameBundle]:
        keep = set(self.split["mapping"])
        return [f for f in self.frames if f.frame_id in keep]

    @property
    def query_frames(self) -> list[FrameBundle]:
        keep = set(self.split.get("query", []))
        return [f for f in self.frames if f.frame_id in keep]


@dataclass(frozen=True)
class DatasetConfig:
    n_frames: int = 48
    feature_dim: int = 32
    feature_noise_sigma: float = 0.0
    stride: int = 8
    query_every: int = 4
    depth_sensor: bool = False


def make_dataset(seed: int, scene_config: SceneConfig | None = None,
                 config: DatasetConfig | None = None, K: Intrinsics | None = None) -> DatasetBundle:
    config = config or DatasetConfig()
    K = K or default_intrinsics()
    scene = generate_scene(seed, scene_config)
    poses = generate_trajectory(scene, config.n_frames, seed, K)
    emb = FeatureEmbedding(scene, config.feature_dim)
    frames = [
        render_frame(scene, p, K, config.feature_dim, config.feature_noise_sigma, config.stride,
                     seed=seed, frame_id=i, embedding=emb)
        for i, p in enumerate(poses)
    ]
    ids = list(range(len(frames)))
    if config.query_every > 0:
        query = [i for i in ids if i % config.query_every == config.query_every - 1]
    else:
        query = []
    mapping = [i for i in ids if i not in set(query)]
    return DatasetBundle(frames, {"mapping": mapping, "query": query}, scene, config.depth_sensor)


# --- on-disk bundle ----------------------------------------------------------------

_FEAT_MAGIC, _DEPTH_MAGIC, _MASK_MAGIC = b"SCRF", b"SCRD", b"SCRM"


def _write_raster(path: Path, magic: bytes, arr: np.ndarray, dtype: str):
    dims = arr.shape if arr.ndim == 3 else arr.shape + (1,)
    header = magic + struct.pack("<4I", BUNDLE_VERSION, *dims)
    path.write_bytes(header + np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _read_raster(path: Path, magic: bytes, dtype: str) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise BundleFormatError(f"{path}: cannot read ({exc.strerror})") from None
    if len(raw) < 20 or raw[:4] != magic:
        raise BundleFormatError(f"{path}: bad header (expected magic {magic!r})")
    version, h, w, c = struct.unpack("<4I", raw[4:20])
    if version != BUNDLE_VERSION:
        raise BundleFormatError(f"{path}: version {version} not supported (expected {BUNDLE_VERSION})")
    n = h * w * c
    itemsize = np.dtype(dtype).itemsize
    if len(raw) - 20 != n * itemsize:
        raise BundleFormatError(f"{path}: payload has {len(raw) - 20} bytes, header implies {n * itemsize}")
    data = np.frombuffer(raw, dtype=dtype, offset=20)
    arr = data.reshape(h, w, c).copy()
    return arr if c > 1 or magic == _FEAT_MAGIC else arr[..., 0]


def save_bundle(dataset: DatasetBundle, dir_path) -> None:
    root = Path(dir_path)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    sc = dataset.scene
    lines = [f"scrprior-scene {BUNDLE_VERSION}", f"seed {sc.seed}",
             "extents " + " ".join(f"{x:.17g}" for x in sc.extents),
             f"boxes {len(sc.boxes)}"]
    for lo, hi in sc.boxes:
        lines.append(" ".join(f"{x:.17g}" for x in (*lo, *hi)))
    lines.append(f"surfaces {len(sc.surfaces)}")
    for s in sc.surfaces:
        vals = " ".join(f"{x:.17g}" for x in (*s.origin, *s.u, *s.v))
        lines.append(f"{s.sid} {s.kind} {s.rho:.17g} {vals}")
    (root / "scene.txt").write_text("\n".join(lines) + "\n")
    (root / "trajectory.txt").write_text(
        "\n".join(format_pose_line(f.frame_id, f.pose) for f in dataset.frames) + "\n")
    (root / "split.txt").write_text(
        "mapping " + " ".join(map(str, dataset.split["mapping"])) + "\n"
        + "query " + " ".join(map(str, dataset.split.get("query", []))) + "\n")
    for f in dataset.frames:
        d = root / "frames" / str(f.frame_id)
        d.mkdir(exist_ok=True)
        _write_raster(d / "features.bin", _FEAT_MAGIC, f.feature_map, "<f4")
        mm = np.where(np.isnan(f.gt_depth), 0, np.round(np.nan_to_num(f.gt_depth) * 1000.0))
        if mm.max(initial=0) > 65535:
            raise ValueError(f"frame {f.frame_id}: depth exceeds the 16-bit millimetre range")
        _write_raster(d / "depth.u16", _DEPTH_MAGIC, mm, "<u2")
        _write_raster(d / "mask.u8", _MASK_MAGIC, f.texture_mask.astype(np.uint8), "u1")
        K = f.K
        meta = [f"scrprior-frame {BUNDLE_VERSION}", f"frame_id {f.frame_id}", f"stride {f.stride}",
                f"intrinsics {K.fx:.17g} {K.fy:.17g} {K.cx:.17g} {K.cy:.17g} {K.width} {K.height}",
                f"depth_sensor {int(dataset.depth_sensor)}"]
        (d / "meta.txt").write_text("\n".join(meta) + "\n")


def _kv_lines(path: Path) -> dict[str, str]:
    try:
        text = path.read_text()
    except OSError as exc:
        raise BundleFormatError(f"{path}: cannot read ({exc.strerror})") from None
    out = {}
    for line in text.splitlines():
        if line.strip():
            key, _, val = line.partition(" ")
            out[key] = val.strip()
    return out


def _load_scene(path: Path) -> SceneModel:
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise BundleFormatError(f"{path}: cannot read ({exc.strerror})") from None
    try:
        tag, ver = lines[0].split()
        if tag != "scrprior-scene":
            raise BundleFormatError(f"{path}: not a scene file")
        if int(ver) != BUNDLE_VERSION:
            raise BundleFormatError(f"{path}: version {ver} not supported")
        seed = int(lines[1].split()[1])
        extents = np.array([float(x) for x in lines[2].split()[1:]])
        nb = int(lines[3].split()[1])
        boxes = []
        for line in lines[4:4 + nb]:
            vals = np.array([float(x) for x in line.split()])
            boxes.append((vals[:3], vals[3:]))
        ns = int(lines[4 + nb].split()[1])
        surfaces = []
        for line in lines[5 + nb:5 + nb + ns]:
            parts = line.split()
            vals = np.array([float(x) for x in parts[3:]])
            surfaces.append(Surface(int(parts[0]), parts[1], vals[:3], vals[3:6], vals[6:9], float(parts[2])))
        if len(surfaces) != ns:
            raise BundleFormatError(f"{path}: expected {ns} surfaces, found {len(surfaces)}")
    except (IndexError, ValueError) as exc:
        if isinstance(exc, BundleFormatError):
            raise
        raise BundleFormatError(f"{path}: malformed scene file ({exc})") from None
    return SceneModel(extents, surfaces, seed, boxes)


def load_bundle(dir_path) -> DatasetBundle:
    root = Path(dir_path)
    if not root.is_dir():
        raise BundleFormatError(f"{root}: not a bundle directory")
    scene = _load_scene(root / "scene.txt")
    traj_path = root / "trajectory.txt"
    try:
        traj_lines = traj_path.read_text().splitlines()
    except OSError as exc:
        raise BundleFormatError(f"{traj_path}: cannot read ({exc.strerror})") from None
    poses = {}
    for n, line in enumerate(traj_lines, 1):
        if line.strip():
            try:
                fid, pose = parse_pose_line(line, f"{traj_path}:{n}")
            except ValueError as exc:
                raise BundleFormatError(str(exc)) from None
            poses[fid] = pose
    split_kv = _kv_lines(root / "split.txt")
    try:
        split = {k: [int(x) for x in split_kv.get(k, "").split()] for k in ("mapping", "query")}
    except ValueError:
        raise BundleFormatError(f"{root / 'split.txt'}: malformed id list") from None
    frames, depth_sensor = [], False
    for fid in sorted(poses):
        d = root / "frames" / str(fid)
        meta_path = d / "meta.txt"
        meta = _kv_lines(meta_path)
        try:
            tag_ver = meta["scrprior-frame"]
            if int(tag_ver) != BUNDLE_VERSION:
                raise BundleFormatError(f"{meta_path}: version {tag_ver} not supported")
            intr = meta["intrinsics"].split()
            K = Intrinsics(*(float(x) for x in intr[:4]), int(intr[4]), int(intr[5]))
            stride = int(meta["stride"])
            depth_sensor = bool(int(meta.get("depth_sensor", "0")))
        except (KeyError, ValueError, IndexError) as exc:
            if isinstance(exc, BundleFormatError):
                raise
            raise BundleFormatError(f"{meta_path}: malformed frame metadata ({exc})") from None
        feats = _read_raster(d / "features.bin", _FEAT_MAGIC, "<f4").astype(np.float32)
        mm = _read_raster(d / "depth.u16", _DEPTH_MAGIC, "<u2")
        mask = _read_raster(d / "mask.u8", _MASK_MAGIC, "u1").astype(bool)
        depth = np.where(mm == 0, np.nan, mm.astype(np.float64) / 1000.0)
        coords = backproject_depth(depth, poses[fid], K, stride)
        frames.append(FrameBundle(poses[fid], K, feats, coords, depth, mask, fid, stride))
    return DatasetBundle(frames, split, scene, depth_sensor)
