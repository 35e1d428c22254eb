"""Trajectory, depth and image-quality metrics.

Trajectories are (N, 4, 4) camera-to-world matrices.  ``ate`` also accepts
(N, 3) camera centres.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from npnf import geom


class DegenerateConfiguration(ValueError):
    pass


class EmptyMask(ValueError):
    pass


@dataclass(frozen=True)
class Sim3:
    s: float
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError("Sim3 scale must be positive")
        if not geom.RigidTransform(self.R, self.t).is_valid():
            raise ValueError("Sim3 rotation is not a rotation matrix")

    @classmethod
    def identity(cls) -> "Sim3":
        return cls(1.0, np.eye(3), np.zeros(3))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.s * np.asarray(x) @ self.R.T + self.t

    def apply_poses(self, c2w: np.ndarray) -> np.ndarray:
        """Map camera-to-world poses; rotations compose, centres scale."""
        out = np.array(c2w, dtype=np.float64, copy=True)
        out[:, :3, :3] = self.R @ out[:, :3, :3]
        out[:, :3, 3] = self.apply(out[:, :3, 3])
        return out


@dataclass
class PoseMetrics:
    ate_rmse: float
    rpe_t: float   # already multiplied by 100
    rpe_r: float   # degrees

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float

    def to_dict(self) -> dict:
        return asdict(self)


def _check_rank(X: np.ndarray, name: str) -> None:
    sv = np.linalg.svd(X - X.mean(0), compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-10 * sv[0]:
        raise DegenerateConfiguration(f"{name} points are collinear or coincident")


def umeyama_sim3(source, target) -> Sim3:
    """Least-squares similarity with ``s R source + t ~ target``."""
    X = np.asarray(source, dtype=np.float64)
    Y = np.asarray(target, dtype=np.float64)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[1] != 3:
        raise ValueError("source and target must both be (N, 3)")
    if len(X) < 3:
        raise DegenerateConfiguration("need at least 3 point pairs")
    _check_rank(X, "source")
    _check_rank(Y, "target")
    mx, my = X.mean(0), Y.mean(0)
    Xc, Yc = X - mx, Y - my
    cov = Yc.T @ Xc / len(X)
    U, S, Vt = np.linalg.svd(cov)
    D = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2] = -1.0
    R = U @ np.diag(D) @ Vt
    var_x = (Xc ** 2).sum() / len(X)
    s = float((S * D).sum() / var_x)
    return Sim3(s, R, my - s * R @ mx)


def _centres(traj) -> np.ndarray:
    traj = np.asarray(traj, dtype=np.float64)
    if traj.ndim == 3:
        return traj[:, :3, 3]
    return traj


def align(est, gt) -> Sim3:
    return umeyama_sim3(_centres(est), _centres(gt))


def ate(est, gt, sim: Sim3 | None = None) -> float:
    """RMSE of camera centres after Sim3 alignment of ``est`` onto ``gt``."""
    ce, cg = _centres(est), _centres(gt)
    if len(ce) != len(cg):
        raise ValueError(f"trajectory lengths differ: {len(ce)} vs {len(cg)}")
    if len(ce) < 3:
        raise ValueError("ATE needs at least 3 poses")
    sim = umeyama_sim3(ce, cg) if sim is None else sim
    res = sim.apply(ce) - cg
    return float(np.sqrt((res ** 2).sum(1).mean()))


def _inv(T: np.ndarray) -> np.ndarray:
    out = np.eye(4)
    R = T[:3, :3]
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ T[:3, 3]
    return out


def rpe_pairs(est, gt, delta: int = 1, scale: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Per-pair translation error norms and rotation error angles (degrees)."""
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if len(est) != len(gt):
        raise ValueError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    if len(est) < delta + 1:
        raise ValueError(f"RPE with delta={delta} needs at least {delta + 1} poses")
    est = est.copy()
    est[:, :3, 3] *= scale
    trans, rot = [], []
    for i in range(len(est) - delta):
        rel_gt = _inv(gt[i]) @ gt[i + delta]
        rel_est = _inv(est[i]) @ est[i + delta]
        E = _inv(rel_gt) @ rel_est
        trans.append(np.linalg.norm(E[:3, 3]))
        rot.append(math.degrees(geom.rotation_angle(E[:3, :3])))
    return np.array(trans), np.array(rot)


def rpe(est, gt, delta: int = 1, scale: float = 1.0) -> tuple[float, float]:
    """(rpe_t, rpe_r) as RMSEs over consecutive pairs; rpe_t is not yet x100."""
    trans, rot = rpe_pairs(est, gt, delta, scale)
    return float(np.sqrt(np.mean(trans ** 2))), float(np.sqrt(np.mean(rot ** 2)))


def pose_metrics(est, gt) -> PoseMetrics:
    sim = align(est, gt)
    t, r = rpe(est, gt, scale=sim.s)
    return PoseMetrics(ate(est, gt, sim), 100.0 * t, r)


def depth_metrics(pred, gt, mask=None) -> DepthMetrics:
    """Median-scaled depth errors over ``mask`` (defaults to gt > 0)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth differ in shape")
    mask = gt > 0 if mask is None else np.asarray(mask, dtype=bool) & (gt > 0)
    if not mask.any():
        raise EmptyMask("no valid pixels in the evaluation mask")
    d, g = pred[mask], gt[mask]
    med = np.median(d)
    if med <= 0:
        raise ValueError("median predicted depth is not positive")
    d = d * (np.median(g) / med)
    # a handful of empty rays can render zero depth; keep the log finite
    d = np.maximum(d, 1e-6)
    err = d - g
    ratio = np.maximum(d / g, g / d)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(err) / g)),
        sq_rel=float(np.mean(err ** 2 / g)),
        rmse=float(np.sqrt(np.mean(err ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(d) - np.log(g)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
    )


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("images differ in shape")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _local_mean(x: np.ndarray, g: np.ndarray, norm: np.ndarray) -> np.ndarray:
    # zero padding renormalised by the window mass inside the image
    out = ndimage.correlate1d(x, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    return out / norm


def ssim(a, b) -> float:
    """Mean SSIM over pixels and channels with a Gaussian window."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("images differ in shape")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    g = gaussian_window()
    norm = _local_mean(np.ones(a.shape[:2]), g, 1.0)
    vals = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mx, my = _local_mean(x, g, norm), _local_mean(y, g, norm)
        vx = _local_mean(x * x, g, norm) - mx * mx
        vy = _local_mean(y * y, g, norm) - my * my
        cxy = _local_mean(x * y, g, norm) - mx * my
        num = (2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)
        den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)
        vals.append(num / den)
    return float(np.mean(vals))
