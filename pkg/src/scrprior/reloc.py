"""Camera pose from 2D-3D correspondences: P3P hypotheses, RANSAC, refinement,
registration test and relocalization scoring."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from . import kernels
from .geometry import Intrinsics, Pose, rotation_error_deg, translation_error

POSE_T_THRESHOLD_CM = 5.0
POSE_R_THRESHOLD_DEG = 5.0


@dataclass(frozen=True)
class RansacConfig:
    inlier_threshold: float = 10.0  # px
    hypotheses: int = 64
    refine_iterations: int = 3
    registration_cutoff: int = 1000
    min_depth: float = 0.1
    max_sample_attempts: int = 20
    seed: int = 0

    def __post_init__(self):
        if not self.inlier_threshold > 0:
            raise ValueError("inlier threshold must be positive")
        if self.registration_cutoff < 1:
            raise ValueError("registration cutoff must be >= 1")
        if self.hypotheses < 1 or self.refine_iterations < 0:
            raise ValueError("hypotheses must be >= 1, refine_iterations >= 0")


@dataclass(frozen=True, eq=False)
class PoseEstimate:
    pose: Pose  # camera-to-world
    inlier_count: int
    success: bool
    inliers: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool), repr=False)


# --- minimal solver ---------------------------------------------------------------------


def _bearings(pixels, K: Intrinsics) -> np.ndarray:
    rays = K.unproject(pixels)
    return rays / np.linalg.norm(rays, axis=-1, keepdims=True)


def _kabsch(src, dst):
    """Rotation and translation with ``dst ≈ R src + t`` (no scale)."""
    ms, md = src.mean(0), dst.mean(0)
    u, _, vt = np.linalg.svd((dst - md).T @ (src - ms))
    d = np.sign(np.linalg.det(u @ vt)) or 1.0
    r = u @ np.diag([1.0, 1.0, d]) @ vt
    return r, md - r @ ms


def p3p_grunert(bearings: np.ndarray, points: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """All world-to-camera solutions ``(R, t)`` for three unit bearings and
    three world points, from Grunert's quartic in the depth ratio ``s3/s1``."""
    x1, x2, x3 = points
    a2 = float(np.sum((x2 - x3) ** 2))
    b2 = float(np.sum((x1 - x3) ** 2))
    c2 = float(np.sum((x1 - x2) ** 2))
    if min(a2, b2, c2) < 1e-18:
        return []
    ca = float(bearings[1] @ bearings[2])
    cb = float(bearings[0] @ bearings[2])
    cg = float(bearings[0] @ bearings[1])
    p = (a2 - c2) / b2
    q = (a2 + c2) / b2
    coeffs = [
        (p - 1.0) ** 2 - 4.0 * c2 / b2 * ca * ca,
        4.0 * (p * (1.0 - p) * cb - (1.0 - q) * ca * cg + 2.0 * c2 / b2 * ca * ca * cb),
        2.0 * (p * p - 1.0 + 2.0 * p * p * cb * cb + 2.0 * (b2 - c2) / b2 * ca * ca
               - 4.0 * q * ca * cb * cg + 2.0 * (b2 - a2) / b2 * cg * cg),
        4.0 * (-p * (1.0 + p) * cb + 2.0 * a2 / b2 * cg * cg * cb - (1.0 - q) * ca * cg),
        (1.0 + p) ** 2 - 4.0 * a2 / b2 * cg * cg,
    ]
    if not np.all(np.isfinite(coeffs)) or max(abs(c) for c in coeffs) == 0.0:
        return []
    roots = np.roots(coeffs)
    cos = np.array([[1.0, cg, cb], [cg, 1.0, ca], [cb, ca, 1.0]])
    d2 = np.array([a2, b2, c2])
    out = []
    for v in roots:
        # near-double roots come back as complex pairs with a small imaginary part;
        # Newton polishing below decides whether they are genuine
        if abs(v.imag) > 1e-3 * max(1.0, abs(v.real)):
            continue
        v = v.real
        if v <= 0:
            continue
        den = 2.0 * (cg - v * ca)
        if abs(den) < 1e-14:
            continue
        u = ((p - 1.0) * v * v - 2.0 * p * cb * v + 1.0 + p) / den
        if u <= 0:
            continue
        s1sq = b2 / (1.0 + v * v - 2.0 * v * cb)
        if not s1sq > 0:
            continue
        s1 = np.sqrt(s1sq)
        depths = _polish_depths(np.array([s1, u * s1, v * s1]), cos, d2)
        if depths is None:
            continue
        r, t = _kabsch(points, depths[:, None] * bearings)
        out.append((r, t))
    return out


_PAIRS = ((1, 2), (0, 2), (0, 1))  # opposite sides a, b, c


def _polish_depths(s, cos, d2, iterations: int = 6):
    """Newton on the three law-of-cosines equations in the depths; ``None`` if
    the polished depths do not satisfy them or are not all positive."""
    for _ in range(iterations):
        f = np.array([s[i] ** 2 + s[j] ** 2 - 2 * s[i] * s[j] * cos[i, j] - d2[k]
                      for k, (i, j) in enumerate(_PAIRS)])
        jac = np.zeros((3, 3))
        for k, (i, j) in enumerate(_PAIRS):
            jac[k, i] = 2 * s[i] - 2 * s[j] * cos[i, j]
            jac[k, j] = 2 * s[j] - 2 * s[i] * cos[i, j]
        try:
            s = s - np.linalg.solve(jac, f)
        except np.linalg.LinAlgError:
            break
    f = np.array([s[i] ** 2 + s[j] ** 2 - 2 * s[i] * s[j] * cos[i, j] - d2[k] for k, (i, j) in enumerate(_PAIRS)])
    if not (np.all(np.isfinite(s)) and np.all(s > 0)) or np.abs(f).max() > 1e-8 * d2.max():
        return None
    return s


def _reproj_err(r, t, K: Intrinsics, points, pixels):
    cam = points @ r.T + t
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([K.fx * cam[:, 0] / z + K.cx, K.fy * cam[:, 1] / z + K.cy], axis=1)
    err = np.linalg.norm(uv - pixels, axis=1)
    return np.where(z > 0, err, np.inf)


def p4p_hypothesis(pixels, points, K: Intrinsics, min_depth: float = 0.0):
    """Solve P3P on the first three correspondences and keep the solution
    with the smallest error on the fourth; all four must lie in front."""
    bearings = _bearings(pixels[:3], K)
    best, best_err = None, np.inf
    for r, t in p3p_grunert(bearings, points[:3]):
        if np.any((points @ r.T + t)[:, 2] <= min_depth):
            continue
        e = _reproj_err(r, t, K, points[3:4], pixels[3:4])[0]
        if e < best_err:
            best, best_err = (r, t), e
    return best


def _non_degenerate(points) -> bool:
    x1, x2, x3 = points[:3]
    area = np.linalg.norm(np.cross(x2 - x1, x3 - x1))
    scale = max(np.linalg.norm(x2 - x1), np.linalg.norm(x3 - x1), 1e-12)
    return area > 1e-6 * scale * scale


# --- RANSAC + refinement --------------------------------------------------------------


def refine_pose(r, t, K: Intrinsics, points, pixels, iterations: int = 10):
    """Huber-robust Gauss-Newton on reprojection error (scipy trust region)."""
    x0 = np.concatenate([Rotation.from_matrix(r).as_rotvec(), t])
    k = K.as_array()

    def residuals(x):
        cam = Rotation.from_rotvec(x[:3]).apply(points) + x[3:]
        z = np.maximum(cam[:, 2], 1e-6)
        return np.concatenate([k[0] * cam[:, 0] / z + k[2] - pixels[:, 0],
                               k[1] * cam[:, 1] / z + k[3] - pixels[:, 1]])

    sol = least_squares(residuals, x0, loss="huber", f_scale=1.0, method="trf",
                        max_nfev=50 * max(iterations, 1), xtol=1e-15, ftol=1e-15, gtol=1e-15)
    return Rotation.from_rotvec(sol.x[:3]).as_matrix(), sol.x[3:]


def estimate_pose(pixels, coords, K: Intrinsics, cfg: RansacConfig | None = None) -> PoseEstimate:
    cfg = cfg or RansacConfig()
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    n = pixels.shape[0]
    if coords.shape[0] != n:
        raise ValueError("pixels and coords must have equal length")
    if n < 4:
        raise ValueError(f"estimate_pose needs at least 4 correspondences, got {n}")
    finite = np.isfinite(coords).all(1) & np.isfinite(pixels).all(1)
    rng = np.random.default_rng(cfg.seed)
    idx_pool = np.flatnonzero(finite)
    failure = PoseEstimate(Pose.identity(), 0, False, np.zeros(n, dtype=bool))
    if idx_pool.size < 4:
        return failure

    rots, trans = [], []
    for _ in range(cfg.hypotheses):
        for _ in range(cfg.max_sample_attempts):
            s = rng.choice(idx_pool, 4, replace=False)
            if not _non_degenerate(coords[s]):
                continue
            hyp = p4p_hypothesis(pixels[s], coords[s], K, cfg.min_depth)
            if hyp is not None:
                rots.append(hyp[0])
                trans.append(hyp[1])
                break
    if not rots:
        return failure
    counts = kernels.count_inliers(np.array(rots), np.array(trans), K.as_array(), coords[finite],
                                   pixels[finite], cfg.inlier_threshold, cfg.min_depth)
    best = int(np.argmax(counts))
    r, t = rots[best], trans[best]
    inl = _inlier_mask(r, t, K, coords, pixels, cfg)
    for _ in range(cfg.refine_iterations):
        if inl.sum() < 4:
            break
        r2, t2 = refine_pose(r, t, K, coords[inl], pixels[inl])
        inl2 = _inlier_mask(r2, t2, K, coords, pixels, cfg)
        # a refined pose may shed lucky outliers, but a collapse means divergence
        if inl2.sum() < max(4, 0.5 * inl.sum()):
            break
        converged = np.array_equal(inl2, inl)
        r, t, inl = r2, t2, inl2
        if converged:
            break
    count = int(inl.sum())
    return PoseEstimate(Pose.from_rt(r.T, -r.T @ t), count, count >= 4, inl)


def _inlier_mask(r, t, K, coords, pixels, cfg):
    cam = coords @ r.T + t
    err = _reproj_err(r, t, K, coords, pixels)
    with np.errstate(invalid="ignore"):
        return (cam[:, 2] > cfg.min_depth) & (err < cfg.inlier_threshold)


# --- registration and scoring ---------------------------------------------------------


def is_registered(inlier_count: int, cutoff: int) -> bool:
    return int(inlier_count) >= int(cutoff)


def register_image(head, frame, cfg: RansacConfig | None = None):
    from .scr import predict_frame

    cfg = cfg or RansacConfig()
    coords = predict_frame(head, frame).reshape(-1, 3)
    pixels = frame.pixel_grid().reshape(-1, 2)
    est = estimate_pose(pixels, coords, frame.K, cfg)
    return est.success and is_registered(est.inlier_count, cfg.registration_cutoff), est


@dataclass(frozen=True)
class RelocReport:
    accuracy_5cm5deg: float  # percent
    median_t_cm: float
    median_r_deg: float
    reg_rate: float  # fraction
    n_frames: int
    t_errors_cm: tuple = ()
    r_errors_deg: tuple = ()

    def to_text(self) -> str:
        return (f"accuracy_5cm5deg {self.accuracy_5cm5deg:.4f}\nmedian_t_cm {self.median_t_cm:.6g}\n"
                f"median_r_deg {self.median_r_deg:.6g}\nreg_rate {self.reg_rate:.6g}\n"
                f"n_frames {self.n_frames}\n")


def score_poses(est_poses, gt_poses, registered=None) -> RelocReport:
    """Relocalization scores; unregistered frames count as failures with
    infinite error."""
    n = len(gt_poses)
    if n == 0 or len(est_poses) != n:
        raise ValueError("need equally many (>= 1) estimated and ground-truth poses")
    registered = np.ones(n, dtype=bool) if registered is None else np.asarray(registered, dtype=bool)
    t_err = np.full(n, np.inf)
    r_err = np.full(n, np.inf)
    for i, (e, g) in enumerate(zip(est_poses, gt_poses)):
        if registered[i] and e is not None:
            t_err[i] = 100.0 * translation_error(e, g)
            r_err[i] = rotation_error_deg(e, g)
    ok = (t_err < POSE_T_THRESHOLD_CM) & (r_err < POSE_R_THRESHOLD_DEG)
    return RelocReport(100.0 * ok.mean(), float(np.median(t_err)), float(np.median(r_err)),
                       float(registered.mean()), n, tuple(t_err), tuple(r_err))


def evaluate_reloc(head, frames, cfg: RansacConfig | None = None) -> RelocReport:
    frames = list(frames)
    if not frames:
        raise ValueError("evaluate_reloc needs at least one query frame")
    est, flags = [], []
    for f in frames:
        reg, e = register_image(head, f, cfg)
        est.append(e.pose)
        flags.append(reg)
    return score_poses(est, [f.pose for f in frames], flags)


