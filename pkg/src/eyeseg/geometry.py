"""Parametric eye shapes, mask rasterization, and a procedural patch generator.

Coordinates are patch pixels with y increasing downward; pixel (row, col) is
sampled at its center (col + 0.5, row + 0.5). Masks carry one label per
pixel: 0 background, 1 sclera, 2 iris. The eye region is bounded above and
below by two parabolic lid curves that meet at the eye corners, with the
iris modeled as a rotated ellipse clipped by the lids.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
from scipy.interpolate import CubicSpline
from scipy.ndimage import gaussian_filter

BACKGROUND, SCLERA, IRIS = 0, 1, 2
NUM_CLASSES = 3

# Salt that separates per-subject parameter streams from per-sample streams.
_SUBJECT_STREAM_SALT = 0x5EED


class DegenerateGeometryError(ValueError):
    """A geometric fit collapsed (singular or non-elliptical conic)."""


@dataclass
class EyeMask:
    """Per-pixel 3-class label grid (background / sclera / iris)."""

    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ValueError(f"mask labels must be a 2-D grid, got shape {labels.shape}")
        if labels.size and not np.isin(labels, (BACKGROUND, SCLERA, IRIS)).all():
            raise ValueError("mask labels must be in {0, 1, 2}")
        self.labels = labels.astype(np.uint8)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels.reshape(-1), minlength=NUM_CLASSES)

    def one_hot(self) -> np.ndarray:
        """(3, H, W) float32 encoding, channel order (background, sclera, iris)."""
        return np.eye(NUM_CLASSES, dtype=np.float32)[self.labels].transpose(2, 0, 1)


@dataclass(frozen=True)
class EyeShapeParams:
    """Parametric eye: two parabolic lids, corner x-range, iris ellipse.

    Lid parabolas are (a, b, c) for y = a*x^2 + b*x + c in pixel coordinates;
    with y down, the upper lid must satisfy upper(x) <= lower(x) between the
    corners. The iris is (center_x, center_y, radius_x, radius_y,
    rotation_radians).
    """

    upper_lid: tuple[float, float, float]
    lower_lid: tuple[float, float, float]
    eye_corners: tuple[float, float]
    iris: tuple[float, float, float, float, float]

    def validate(self) -> None:
        left, right = self.eye_corners
        if not left < right:
            raise ValueError(f"eye corners must satisfy left < right, got {self.eye_corners}")
        _, _, rx, ry, _ = self.iris
        if rx <= 0 or ry <= 0:
            raise ValueError(f"iris radii must be positive, got rx={rx}, ry={ry}")


@dataclass(frozen=True)
class LandmarkSet:
    """Annotated control points: ordered lid points plus iris boundary points."""

    upper_lid_points: np.ndarray
    lower_lid_points: np.ndarray
    iris_points: np.ndarray

    def __post_init__(self):
        for name in ("upper_lid_points", "lower_lid_points", "iris_points"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))

    def validate(self) -> None:
        for name, pts in (("upper lid", self.upper_lid_points), ("lower lid", self.lower_lid_points)):
            if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
                raise ValueError(f"{name} needs at least 3 (x, y) points")
            if not np.all(np.diff(pts[:, 0]) > 0):
                raise ValueError(f"{name} x-coordinates must be strictly increasing")
        if self.iris_points.ndim != 2 or self.iris_points.shape[1] != 2 or self.iris_points.shape[0] < 5:
            raise ValueError("iris needs at least 5 (x, y) points")


def _ellipse_inside(xs: np.ndarray, ys: np.ndarray, ellipse) -> np.ndarray:
    cx, cy, rx, ry, rot = ellipse
    dx = xs[None, :] - cx
    dy = ys[:, None] - cy
    c, s = np.cos(rot), np.sin(rot)
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v <= 1.0


def _label_grid(upper_y, lower_y, corners, ellipse, width, height) -> np.ndarray:
    """Shared region rule: iris inside ellipse, both classes clipped by lids/corners."""
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    left, right = corners
    open_cols = (xs >= left) & (xs <= right)
    between = (ys[:, None] >= upper_y[None, :]) & (ys[:, None] <= lower_y[None, :])
    between &= open_cols[None, :]
    labels = np.zeros((height, width), dtype=np.uint8)
    labels[between] = SCLERA
    labels[between & _ellipse_inside(xs, ys, ellipse)] = IRIS
    return labels


def rasterize_eye(params: EyeShapeParams, width: int, height: int) -> EyeMask:
    """Rasterize a parametric eye into a 3-class mask, sampled at cell centers.

    Lids that never open within the patch yield an all-background mask; that
    is a valid (closed-eye) result, not an error.
    """
    if width < 4 or height < 4:
        raise ValueError(f"mask dimensions must be at least 4x4, got {width}x{height}")
    params.validate()
    xs = np.arange(width) + 0.5
    upper_y = np.polyval(params.upper_lid, xs)
    lower_y = np.polyval(params.lower_lid, xs)
    return EyeMask(_label_grid(upper_y, lower_y, params.eye_corners, params.iris, width, height))


def fit_ellipse(points) -> tuple[float, float, float, float, float]:
    """Direct least-squares conic fit constrained to an ellipse.

    Returns (center_x, center_y, radius_x, radius_y, rotation_radians). The
    fit is algebraic (Halir-Flusser scatter-matrix form), so exact inputs are
    recovered to machine precision.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 5:
        raise ValueError("ellipse fit needs at least 5 (x, y) points")
    mean = pts.mean(axis=0)
    x = pts[:, 0] - mean[0]
    y = pts[:, 1] - mean[1]
    d1 = np.column_stack([x * x, x * y, y * y])
    d2 = np.column_stack([x, y, np.ones_like(x)])
    s1 = d1.T @ d1
    s2 = d1.T @ d2
    s3 = d2.T @ d2
    try:
        t = -np.linalg.solve(s3, s2.T)
    except np.linalg.LinAlgError as exc:
        raise DegenerateGeometryError("singular ellipse fit (degenerate point set)") from exc
    m = s1 + s2 @ t
    # Premultiply by inv(C1) for the constraint matrix C1 = [[0,0,2],[0,-1,0],[2,0,0]].
    m = np.stack([m[2] / 2.0, -m[1], m[0] / 2.0])
    eigval, eigvec = np.linalg.eig(m)
    cond = 4.0 * np.real(eigvec[0]) * np.real(eigvec[2]) - np.real(eigvec[1]) ** 2
    candidates = np.flatnonzero(np.isfinite(np.real(eigval)) & (cond > 0))
    if candidates.size == 0:
        raise DegenerateGeometryError("conic fit did not produce an ellipse")
    a1 = np.real(eigvec[:, candidates[0]])
    conic = np.concatenate([a1, t @ a1])
    params = _conic_to_ellipse(conic)
    cx, cy, rx, ry, rot = params
    return (cx + mean[0], cy + mean[1], rx, ry, rot)


def _conic_to_ellipse(conic) -> tuple[float, float, float, float, float]:
    """Convert conic coefficients (A,B,C,D,E,F) to center/axes/rotation."""
    a, b, c, d, e, f = conic
    q = np.array([[a, b / 2.0], [b / 2.0, c]])
    lin = np.array([d, e])
    try:
        center = np.linalg.solve(2.0 * q, -lin)
    except np.linalg.LinAlgError as exc:
        raise DegenerateGeometryError("conic has no finite center") from exc
    k = 0.5 * lin @ center + f
    eigval, eigvec = np.linalg.eigh(q)
    if eigval[0] * eigval[1] <= 0:
        raise DegenerateGeometryError("conic is not an ellipse")
    radii_sq = -k / eigval
    if not np.all(radii_sq > 0) or not np.all(np.isfinite(radii_sq)):
        raise DegenerateGeometryError("conic is not a real ellipse")
    radii = np.sqrt(radii_sq)
    rot = float(np.arctan2(eigvec[1, 0], eigvec[0, 0]))
    return (float(center[0]), float(center[1]), float(radii[0]), float(radii[1]), rot)


def landmarks_to_mask(lms: LandmarkSet, width: int, height: int) -> EyeMask:
    """Rasterize annotated landmarks: natural cubic splines for the lids,
    least-squares ellipse for the iris, then the shared region rule."""
    lms.validate()
    if width < 4 or height < 4:
        raise ValueError(f"mask dimensions must be at least 4x4, got {width}x{height}")
    xu, yu = lms.upper_lid_points.T
    xl, yl = lms.lower_lid_points.T
    upper = CubicSpline(xu, yu, bc_type="natural")
    lower = CubicSpline(xl, yl, bc_type="natural")
    ellipse = fit_ellipse(lms.iris_points)
    corners = (max(xu[0], xl[0]), min(xu[-1], xl[-1]))
    xs = np.arange(width) + 0.5
    labels = _label_grid(upper(xs), lower(xs), corners, ellipse, width, height)
    return EyeMask(labels)


def landmarks_from_params(params: EyeShapeParams, num_lid: int = 9, num_iris: int = 12) -> LandmarkSet:
    """Sample exact control points from a parametric eye (spline/ellipse targets)."""
    left, right = params.eye_corners
    xs = np.linspace(left, right, num_lid)
    upper = np.column_stack([xs, np.polyval(params.upper_lid, xs)])
    lower = np.column_stack([xs, np.polyval(params.lower_lid, xs)])
    cx, cy, rx, ry, rot = params.iris
    t = np.linspace(0.0, 2.0 * np.pi, num_iris, endpoint=False)
    c, s = np.cos(rot), np.sin(rot)
    px = cx + rx * np.cos(t) * c - ry * np.sin(t) * s
    py = cy + rx * np.cos(t) * s + ry * np.sin(t) * c
    return LandmarkSet(upper, lower, np.column_stack([px, py]))


def mirror_params(params: EyeShapeParams, width: int) -> EyeShapeParams:
    """Reflect a parameter set about the patch's vertical centerline x = width/2,
    matching the pixel mirror column c -> width-1-c at cell centers."""
    w = float(width)

    def flip_parabola(coeffs):
        a, b, c = coeffs
        return (a, -(2.0 * a * w) - b, a * w * w + b * w + c)

    left, right = params.eye_corners
    cx, cy, rx, ry, rot = params.iris
    return EyeShapeParams(
        upper_lid=flip_parabola(params.upper_lid),
        lower_lid=flip_parabola(params.lower_lid),
        eye_corners=(w - right, w - left),
        iris=(w - cx, cy, rx, ry, -rot),
    )


@dataclass(frozen=True)
class SynthConfig:
    """Procedural generator settings.

    Shape ranges are fractions of the patch size; each subject in the pool
    owns one base shape and samples perturb it, so subject-independent
    splitting is meaningful. `native_height` simulates the capture size: a
    sample whose simulated native height is below the patch height is
    down/up-sampled to fake a low-resolution source.
    """

    width: int = 64
    height: int = 32
    channels: int = 1
    num_subjects: int = 40
    subject_jitter: float = 0.07
    corner_inset: tuple[float, float] = (0.03, 0.15)
    upper_apex: tuple[float, float] = (0.10, 0.38)
    lower_apex: tuple[float, float] = (0.62, 0.92)
    corner_level: tuple[float, float] = (0.40, 0.60)
    iris_offset: tuple[float, float] = (-0.12, 0.12)
    iris_depth: tuple[float, float] = (0.35, 0.65)
    iris_radius: tuple[float, float] = (0.30, 0.55)
    iris_aspect: tuple[float, float] = (0.90, 1.30)
    iris_tilt: tuple[float, float] = (-0.25, 0.25)
    base_intensities: tuple[float, float, float] = (0.55, 0.92, 0.15)
    shade_amplitude: float = 0.12
    noise_std: float = 0.05
    blur_sigma: tuple[float, float] = (0.0, 1.0)
    native_height: tuple[int, int] = (16, 88)

    _RANGES = (
        "corner_inset", "upper_apex", "lower_apex", "corner_level", "iris_offset",
        "iris_depth", "iris_radius", "iris_aspect", "iris_tilt", "blur_sigma",
        "native_height",
    )

    def validate(self) -> None:
        if self.width < 4 or self.height < 4:
            raise ValueError("synthesis size must be at least 4x4")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        if self.num_subjects < 1:
            raise ValueError("subject pool must be nonempty")
        for name in self._RANGES:
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"empty parameter range for {name}: ({lo}, {hi})")
        if self.native_height[0] < 4:
            raise ValueError("native height must be at least 4")


@dataclass
class SynthSample:
    """One generated sample: degraded image, exact pre-degradation mask."""

    image: np.ndarray
    mask: EyeMask
    params: EyeShapeParams
    subject_id: int
    native_area: int


def _lerp(span: tuple[float, float], t: float) -> float:
    lo, hi = span
    return lo + t * (hi - lo)


def _params_from_unit(unit: np.ndarray, cfg: SynthConfig) -> EyeShapeParams:
    w, h = float(cfg.width), float(cfg.height)
    left = _lerp(cfg.corner_inset, unit[0]) * w
    right = w - _lerp(cfg.corner_inset, unit[1]) * w
    x0 = 0.5 * (left + right)
    half = x0 - left
    y_up = _lerp(cfg.upper_apex, unit[2]) * h
    y_lo = _lerp(cfg.lower_apex, unit[3]) * h
    y_corner = _lerp(cfg.corner_level, unit[4]) * h

    def parabola(apex_y):
        a = (y_corner - apex_y) / (half * half)
        return (a, -2.0 * a * x0, apex_y + a * x0 * x0)

    cy = y_up + _lerp(cfg.iris_depth, unit[6]) * (y_lo - y_up)
    ry = _lerp(cfg.iris_radius, unit[7]) * h
    rx = _lerp(cfg.iris_aspect, unit[8]) * ry
    return EyeShapeParams(
        upper_lid=parabola(y_up),
        lower_lid=parabola(y_lo),
        eye_corners=(left, right),
        iris=(x0 + _lerp(cfg.iris_offset, unit[5]) * w, cy, rx, ry, _lerp(cfg.iris_tilt, unit[9])),
    )


def _subject_unit(subject_id: int) -> np.ndarray:
    return np.random.default_rng((_SUBJECT_STREAM_SALT, subject_id)).random(10)


def synth_sample(rng_seed: int, config: SynthConfig) -> SynthSample:
    """Deterministically synthesize one (image, mask) pair from a seed.

    The image is rendered from per-region base intensities plus a smooth
    shading gradient, Gaussian noise, optional blur, and a down/up-sampling
    round trip when the simulated native size is below the patch size. The
    mask is the exact rasterization before any degradation.
    """
    config.validate()
    rng = np.random.default_rng(rng_seed)
    subject_id = int(rng.integers(config.num_subjects))
    unit = np.clip(_subject_unit(subject_id) + config.subject_jitter * rng.standard_normal(10), 0.0, 1.0)
    params = _params_from_unit(unit, config)
    mask = rasterize_eye(params, config.width, config.height)

    image = np.asarray(config.base_intensities, dtype=np.float64)[mask.labels]
    gx, gy = rng.uniform(-1.0, 1.0, size=2)
    xs = (np.arange(config.width) + 0.5) / config.width - 0.5
    ys = (np.arange(config.height) + 0.5) / config.height - 0.5
    image = image + config.shade_amplitude * (gx * xs[None, :] + gy * ys[:, None])
    image = image + config.noise_std * rng.standard_normal(image.shape)
    sigma = rng.uniform(*config.blur_sigma)
    if sigma > 1e-3:
        image = gaussian_filter(image, sigma)
    lo, hi = config.native_height
    native_h = int(rng.integers(lo, hi + 1))
    native_area = 2 * native_h * native_h
    if native_h < config.height:
        small = cv2.resize(image.astype(np.float32), (2 * native_h, native_h), interpolation=cv2.INTER_AREA)
        image = cv2.resize(small, (config.width, config.height), interpolation=cv2.INTER_LINEAR)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    if config.channels == 3:
        image = np.repeat(image[:, :, None], 3, axis=2)
    return SynthSample(image, mask, params, subject_id, native_area)
