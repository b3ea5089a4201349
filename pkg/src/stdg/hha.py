"""HHA encoding of depth maps.

Three channels, each scaled to [0, 1]: horizontal disparity, height above
the floor, and the angle between the local surface normal and the inferred
up direction. The camera is a pinhole with a fixed focal length whose
principal point sits at the image centre.

Camera coordinates follow the image: +X right, +Y down, +Z forward.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CameraModel:
    focal_px: float
    cx: float
    cy: float

    def __post_init__(self):
        if not self.focal_px > 0:
            raise ValueError(f"focal length must be positive, got {self.focal_px}")

    @classmethod
    def default(cls, width: int, height: int, focal_px: float | None = None) -> "CameraModel":
        """Principal point at the image centre; focal length ``max(W, H)`` unless given."""
        f = float(max(width, height)) if focal_px is None else float(focal_px)
        return cls(f, (width - 1) / 2.0, (height - 1) / 2.0)

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(u, v) pixel coordinates of camera-frame points ``[3, ...]``."""
        x, y, z = points
        return self.focal_px * x / z + self.cx, self.focal_px * y / z + self.cy


@dataclass
class DepthMap:
    values: np.ndarray  # [H, W], depth along the optical axis
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"depth must be 2-D, got shape {self.values.shape}")
        ok = np.isfinite(self.values) & (self.values > 0)
        self.valid = ok if self.valid is None else (np.asarray(self.valid, dtype=bool) & ok)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_inverse_relative(cls, values: np.ndarray, near: float = 1.0, far: float = 10.0) -> "DepthMap":
        """Relative inverse depth (larger = nearer) mapped affinely onto ``[1/far, 1/near]`` then inverted."""
        v = np.asarray(values, dtype=np.float64)
        ok = np.isfinite(v)
        if not ok.any():
            return cls(np.zeros_like(v), np.zeros_like(v, dtype=bool))
        lo, hi = v[ok].min(), v[ok].max()
        t = (v - lo) / (hi - lo) if hi > lo else np.ones_like(v)
        inv = 1.0 / far + t * (1.0 / near - 1.0 / far)
        z = np.where(ok, 1.0 / np.where(ok, inv, 1.0), 0.0)
        return cls(z, ok)


@dataclass
class GravityEstimate:
    vector: np.ndarray  # unit, pointing down, camera frame
    residual_deg: float
    low_confidence: bool = False
    inlier_fraction: float = 1.0
    iterations: int = 0


@dataclass
class HhaParams:
    window: int = 5
    stages: tuple[tuple[float, int], ...] = ((45.0, 5), (15.0, 5))
    h_max: float | None = None
    floor_percentile: float = 1.0
    top_percentile: float = 99.0
    min_inlier_fraction: float = 0.5


@dataclass
class HhaImage:
    data: np.ndarray  # [3, H, W]: disparity, height, angle, all in [0, 1]
    valid: np.ndarray  # [H, W]
    height_m: np.ndarray  # height above the floor in depth units, NaN where invalid
    angle_deg: np.ndarray  # angle to up in degrees, NaN where invalid
    gravity: GravityEstimate
    h_max: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def hori(self) -> np.ndarray:
        return self.data[0]

    @property
    def height(self) -> np.ndarray:
        return self.data[1]

    @property
    def angle(self) -> np.ndarray:
        return self.data[2]

    def to_uint8(self) -> np.ndarray:
        """``[H, W, 3]`` 8-bit image for inspection."""
        return np.rint(np.clip(self.data, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def backproject(depth: DepthMap, cam: CameraModel) -> tuple[np.ndarray, np.ndarray, dict]:
    """Camera-frame points ``[3, H, W]`` and the validity mask."""
    z = depth.values
    H, W = z.shape
    v, u = np.mgrid[0:H, 0:W].astype(np.float64)
    valid = depth.valid.copy()
    pts = np.stack([(u - cam.cx) * z / cam.focal_px, (v - cam.cy) * z / cam.focal_px, z])
    pts[:, ~valid] = 0.0
    diag = {"invalid_depth": int((~valid).sum())}
    return pts, valid, diag


def _box_sum(a: np.ndarray, r: int) -> np.ndarray:
    """Sum over the (2r+1)^2 window around each pixel, zero outside the image."""
    p = np.pad(a, ((r + 1, r), (r + 1, r)))
    c = p.cumsum(0).cumsum(1)
    k = 2 * r + 1
    return c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k]


def estimate_normals(points: np.ndarray, valid: np.ndarray, window: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel least-squares plane normals over the valid pixels in a window.

    Normals face the camera (against the viewing ray). Pixels with fewer than three valid
    neighbours or a degenerate (collinear) neighbourhood are invalid.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be an odd integer >= 3, got {window}")
    r = window // 2
    m = valid.astype(np.float64)
    x, y, z = (points * m)
    n = _box_sum(m, r)
    s = [_box_sum(c, r) for c in (x, y, z)]
    ss = [_box_sum(a * b, r) for a, b in ((x, x), (x, y), (x, z), (y, y), (y, z), (z, z))]
    with np.errstate(invalid="ignore", divide="ignore"):
        nn = np.where(n > 0, n, 1.0)
        mean = [c / nn for c in s]
        cxx = ss[0] / nn - mean[0] * mean[0]
        cxy = ss[1] / nn - mean[0] * mean[1]
        cxz = ss[2] / nn - mean[0] * mean[2]
        cyy = ss[3] / nn - mean[1] * mean[1]
        cyz = ss[4] / nn - mean[1] * mean[2]
        czz = ss[5] / nn - mean[2] * mean[2]
    cov = np.stack([np.stack([cxx, cxy, cxz], -1), np.stack([cxy, cyy, cyz], -1), np.stack([cxz, cyz, czz], -1)], -2)
    H, W = valid.shape
    ok = valid & (n >= 3)
    normals = np.zeros((3, H, W))
    if ok.any():
        evals, evecs = np.linalg.eigh(cov[ok])
        scale = np.maximum(evals[:, 2], 1e-300)
        nondegenerate = evals[:, 1] > 1e-10 * scale
        nv = evecs[:, :, 0]
        idx = np.nonzero(ok)
        # face the camera: against the viewing ray, or Z <= 0 when the ray grazes the plane
        p = points[:, idx[0], idx[1]]
        toward = np.einsum("nc,cn->n", nv, p)
        grazing = np.abs(toward) <= 1e-9 * np.linalg.norm(p, axis=0)
        flip = np.where(grazing, nv[:, 2] > 0, toward > 0)
        nv = np.where(flip[:, None], -nv, nv)
        nv /= np.linalg.norm(nv, axis=1, keepdims=True)
        keep = nondegenerate
        normals[:, idx[0][keep], idx[1][keep]] = nv[keep].T
        ok[idx[0][~keep], idx[1][~keep]] = False
    return normals, ok


def estimate_gravity(
    normals: np.ndarray,
    valid: np.ndarray | None = None,
    stages: tuple[tuple[float, int], ...] = ((45.0, 5), (15.0, 5)),
    min_inlier_fraction: float = 0.5,
) -> GravityEstimate:
    """Iteratively align a down vector with floor-like normals and orthogonal to wall-like ones.

    ``normals`` may be ``[3, H, W]`` (with ``valid``) or ``[N, 3]``.
    """
    if normals.ndim == 3:
        N = normals[:, valid].T if valid is not None else normals.reshape(3, -1).T
    else:
        N = normals if valid is None else normals[valid]
    if len(N) < 100:
        raise ValueError(f"gravity estimation needs at least 100 valid normals, got {len(N)}")
    g = np.array([0.0, 1.0, 0.0])
    residual = 0.0
    iterations = 0
    frac = 1.0
    for thr, iters in stages:
        cos_t, sin_t = math.cos(math.radians(thr)), math.sin(math.radians(thr))
        for _ in range(iters):
            c = N @ g
            par = np.abs(c) >= cos_t
            perp = np.abs(c) <= sin_t
            if not par.any() and not perp.any():
                return GravityEstimate(g, residual, True, 0.0, iterations)
            Np, Nq = N[perp], N[par]
            M = Np.T @ Np - Nq.T @ Nq
            # tiny pull toward the current estimate settles directions the data leave free
            M -= 1e-9 * (np.abs(M).sum() + 1.0) * np.outer(g, g)
            _, vecs = np.linalg.eigh(M)
            g_new = vecs[:, 0]
            if g_new @ g < 0:
                g_new = -g_new
            g_new /= np.linalg.norm(g_new)
            residual = math.degrees(math.acos(float(np.clip(g_new @ g, -1.0, 1.0))))
            g = g_new
            iterations += 1
        c = N @ g
        frac = float(np.mean((np.abs(c) >= cos_t) | (np.abs(c) <= sin_t)))
    return GravityEstimate(g, residual, frac < min_inlier_fraction, frac, iterations)


def compute_hha(depth: DepthMap, cam: CameraModel | None = None, params: HhaParams | None = None) -> HhaImage:
    params = params or HhaParams()
    cam = cam or CameraModel.default(depth.width, depth.height)
    pts, valid, diag = backproject(depth, cam)
    if not valid.any():
        raise ValueError("depth map has no valid pixels")
    normals, nvalid = estimate_normals(pts, valid, params.window)
    diag["invalid_normals"] = int((valid & ~nvalid).sum())
    try:
        grav = estimate_gravity(normals, nvalid, params.stages, params.min_inlier_fraction)
    except ValueError as exc:
        grav = GravityEstimate(np.array([0.0, 1.0, 0.0]), 0.0, True, 0.0, 0)
        diag["gravity_error"] = str(exc)
    if grav.low_confidence:
        log.info("gravity estimate is low-confidence (inlier fraction %.2f)", grav.inlier_fraction)
    diag["gravity_low_confidence"] = grav.low_confidence
    up = -grav.vector
    ok = nvalid

    z = depth.values
    disp = np.zeros_like(z)
    disp[ok] = 1.0 / z[ok]
    lo, hi = disp[ok].min(), disp[ok].max()
    hori = np.where(ok, (disp - lo) / (hi - lo) if hi > lo else 1.0, 0.0)

    raw_h = np.einsum("c,chw->hw", up, pts)
    floor = np.percentile(raw_h[ok], params.floor_percentile)
    height_m = np.where(ok, raw_h - floor, np.nan)
    h_max = params.h_max if params.h_max is not None else 2.0 * float(np.percentile(height_m[ok], params.top_percentile))
    if h_max > 0:
        hgt = np.where(ok, np.clip(height_m, 0.0, h_max) / h_max, 0.0)
    else:
        hgt = np.zeros_like(z)

    cosang = np.clip(np.einsum("c,chw->hw", up, normals), -1.0, 1.0)
    angle_deg = np.where(ok, np.degrees(np.arccos(cosang)), np.nan)
    ang = np.where(ok, angle_deg / 180.0, 0.0)

    data = np.stack([hori, hgt, ang])
    data[:, ~ok] = 0.0
    return HhaImage(np.clip(data, 0.0, 1.0), ok, height_m, angle_deg, grav, float(h_max), diag)


def teacher_input(hha: HhaImage | None, depth: DepthMap | None, encoding: str) -> np.ndarray:
    """Three-channel teacher input for one of the supported depth encodings."""
    if encoding == "raw_depth":
        if depth is None:
            raise ValueError("raw_depth encoding needs a depth map")
        z = np.where(depth.valid, depth.values, 0.0)
        mx = z.max()
        zn = z / mx if mx > 0 else z
        return np.stack([zn, zn, zn])
    if hha is None:
        raise ValueError(f"{encoding} encoding needs an HHA image")
    x = hha.data.copy()
    if encoding == "hha":
        return x
    if encoding == "h_only":
        x[1:] = 0.0
        return x
    if encoding == "hh_only":
        x[2] = 0.0
        return x
    raise ValueError(f"unknown teacher encoding {encoding!r}")
