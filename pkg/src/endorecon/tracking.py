"""Direct photometric pose tracking over grayscale-plus-depth frames.

Per-frame motion is estimated by multiscale brightness-constancy
alignment against a keyframe: a rotation-only dog-leg fit at the
coarsest pyramid level seeds a full rigid-body fit that walks the finer
levels, warm-starting each from the last. Estimated world poses are then
smoothed with a weighted exponential moving average whose strength grows
with the accumulated frame count.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .depth_scale import valid_depth_mask
from .dogleg import TrustRegionState, minimize_dogleg
from .errors import EndoreconError, TrackingError
from .errors import InputError
from .geometry import (
    PinholeCamera,
    bilinear_sample,
    bilinear_sample_with_gradient,
    reorthonormalize,
    se3_exp,
    se3_inverse,
    se3_log,
    so3_exp,
)

# Fewer simultaneous constraints than pose parameters cannot pin down a
# rigid-body motion.
MIN_VALID_RESIDUALS = 6

# Residual magnitude (intensity units) past which the Huber loss switches
# from quadratic to linear growth.
HUBER_DELTA = 0.1

# Stand-in residual for a trial pose that lost the image overlap; large
# enough that the trial can never be accepted.
_LOST_RESIDUAL = 1e3

# A warped point deeper than the reference depth at its projection by
# more than this (relative, with an absolute floor in meters) is hidden
# behind the reference surface and must not contribute a residual.
_OCCLUSION_REL_TOL = 0.01
_OCCLUSION_ABS_TOL = 1e-3

_STEP_TOL = 1e-8
_COST_TOL = 1e-10
_MAX_ITERS = 50


class AlignmentFailure(EndoreconError):
    """Too little image overlap to constrain the pose at some level."""


@dataclass(frozen=True)
class PseudoRGBDFrame:
    """One grayscale-plus-depth frame with its intrinsics.

    color is optional (H, W, 3) data carried through for fusion; it takes
    no part in alignment.
    """

    image: np.ndarray
    depth: np.ndarray
    camera: PinholeCamera
    index: int
    color: np.ndarray | None = None

    def __post_init__(self):
        shape = (self.camera.height, self.camera.width)
        if self.image.shape != shape or self.depth.shape != shape:
            raise InputError(
                f"frame {self.index}: image {self.image.shape} and depth "
                f"{self.depth.shape} must both match intrinsics {shape}"
            )
        if self.color is not None and self.color.shape[:2] != shape:
            raise InputError(f"frame {self.index}: color shape {self.color.shape}")


@dataclass(frozen=True)
class PyramidLevel:
    image: np.ndarray
    depth: np.ndarray
    camera: PinholeCamera


def _downsample_image(img):
    """Mean over 2x2 blocks, truncated at the borders (ceil-sized output)."""
    h, w = img.shape
    oh, ow = (h + 1) // 2, (w + 1) // 2
    out = np.zeros((oh, ow))
    cnt = np.zeros((oh, ow))
    for dy in (0, 1):
        for dx in (0, 1):
            part = img[dy::2, dx::2]
            out[: part.shape[0], : part.shape[1]] += part
            cnt[: part.shape[0], : part.shape[1]] += 1.0
    return out / cnt


def _downsample_depth(depth):
    """Median of the valid entries in each 2x2 block; 0 where none."""
    h, w = depth.shape
    oh, ow = (h + 1) // 2, (w + 1) // 2
    vals = np.full((oh, ow, 4), np.nan)
    k = 0
    for dy in (0, 1):
        for dx in (0, 1):
            part = np.where(depth[dy::2, dx::2] > 0.0, depth[dy::2, dx::2], np.nan)
            vals[: part.shape[0], : part.shape[1], k] = part
            k += 1
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN blocks
        med = np.nanmedian(vals, axis=-1)
    return np.where(np.isfinite(med), med, 0.0)


def build_pyramid(frame: PseudoRGBDFrame, levels: int = 5, factor: float = 0.5):
    """Coarse-to-fine level list; level 0 is coarsest, the last is the input.

    Images shrink by 2x2 block averaging, depth by the median of valid
    block entries, and the intrinsics scale with the accumulated factor.
    Only factor = 0.5 is supported; the parameter is kept explicit because
    the level count and factor travel together through configuration.
    """
    if levels < 1:
        raise InputError(f"need at least one pyramid level, got {levels}")
    if not 0.0 < factor < 1.0:
        raise InputError(f"downsampling factor must be in (0, 1), got {factor}")
    if factor != 0.5:
        raise InputError("only factor 0.5 (2x2 block averaging) is supported")
    min_side = 2 ** (levels - 1)
    if frame.camera.width < min_side or frame.camera.height < min_side:
        raise InputError(
            f"{frame.camera.width}x{frame.camera.height} image cannot support "
            f"{levels} pyramid levels (needs {min_side} pixels per side)"
        )

    finest = PyramidLevel(
        image=np.asarray(frame.image, dtype=np.float64),
        depth=np.asarray(frame.depth, dtype=np.float64),
        camera=frame.camera,
    )
    out = [finest]
    for _ in range(levels - 1):
        prev = out[-1]
        img = _downsample_image(prev.image)
        dep = _downsample_depth(prev.depth)
        h, w = img.shape
        out.append(PyramidLevel(img, dep, prev.camera.scaled(factor, w, h)))
    out.reverse()
    return out


def _prepare_level(level: PyramidLevel):
    """Pose-independent per-level data: valid pixels, their 3D points, intensities."""
    mask = valid_depth_mask(level.depth)
    v, u = np.nonzero(mask)
    z = level.depth[mask]
    pts = level.camera.backproject(u.astype(np.float64), v.astype(np.float64), z)
    return pts, level.image[mask]


def _warp(ref: PyramidLevel, pts_track, pose):
    """Transform track-frame points by pose and sample ref at the projections."""
    pose = np.asarray(pose, dtype=np.float64)
    pts_ref = pts_track @ pose[:3, :3].T + pose[:3, 3]
    uv = ref.camera.project(pts_ref)
    return pts_ref, uv


def _visible_in_ref(ref: PyramidLevel, pts_ref, uv):
    """Points in front of the ref camera, observed near the ref surface.

    Samples the ref depth map at the projections (invalid depth masked
    out) and rejects points lying behind the observed surface; those are
    occluded in the reference view, so the intensity there belongs to a
    different surface patch.
    """
    masked = np.where(valid_depth_mask(ref.depth), ref.depth, np.nan)
    z_ref, ok = bilinear_sample(masked, uv[:, 0], uv[:, 1])
    z = pts_ref[:, 2]
    tol = np.maximum(_OCCLUSION_REL_TOL * z, _OCCLUSION_ABS_TOL)
    return ok & (z > 0.0) & (z - z_ref <= tol)


def photometric_residuals(ref: PyramidLevel, track: PyramidLevel, pose):
    """Signed brightness differences ref(p') - track(p) over valid pixels.

    p runs over the track frame's valid-depth pixels; p' is p's
    backprojection carried through pose (track camera to ref camera) and
    projected into the ref frame. Pixels whose projection leaves the ref
    image, lands behind the camera, samples invalid data, or is occluded
    by the reference surface are dropped. Raises AlignmentFailure when
    fewer than MIN_VALID_RESIDUALS remain.
    """
    pts_track, intens_track = _prepare_level(track)
    pts_ref, uv = _warp(ref, pts_track, pose)
    vals, ok = bilinear_sample(ref.image, uv[:, 0], uv[:, 1])
    ok = ok & _visible_in_ref(ref, pts_ref, uv)
    n = int(ok.sum())
    if n < MIN_VALID_RESIDUALS:
        raise AlignmentFailure(f"only {n} valid residuals at this level")
    return vals[ok] - intens_track[ok], n


def residual_jacobian(ref: PyramidLevel, track: PyramidLevel, pose, parameterization="se3"):
    """Derivative of each photometric residual in a right-multiplied twist.

    Rows follow the residual order of photometric_residuals at the same
    pose. Columns are [rotation(3), translation(3)] for "se3"; "so3"
    keeps the rotational block only. The image derivative is the exact
    gradient of the bilinear interpolant at the warped position, so the
    product chain matches finite differences of the sampled residuals.
    """
    if parameterization not in ("se3", "so3"):
        raise InputError(f"unknown parameterization {parameterization!r}")
    _r, _J, _n = _residuals_and_jacobian(ref, track, pose)
    return _J[:, :3] if parameterization == "so3" else _J


def _residuals_and_jacobian(ref: PyramidLevel, track: PyramidLevel, pose):
    """Residuals and their full 6-column Jacobian in one pass."""
    pts_track, intens_track = _prepare_level(track)
    pose = np.asarray(pose, dtype=np.float64)
    pts_ref, uv = _warp(ref, pts_track, pose)
    vals, gx, gy, ok = bilinear_sample_with_gradient(ref.image, uv[:, 0], uv[:, 1])
    ok = ok & _visible_in_ref(ref, pts_ref, uv)
    n = int(ok.sum())
    if n < MIN_VALID_RESIDUALS:
        raise AlignmentFailure(f"only {n} valid residuals at this level")

    X = pts_track[ok]
    Y = pts_ref[ok]
    gx = gx[ok]
    gy = gy[ok]
    cam = ref.camera
    z = Y[:, 2]
    # Chain rule: image gradient times projection derivative gives the
    # sensitivity dI/dY of each residual to its ref-camera point.
    didy = np.empty_like(Y)
    didy[:, 0] = gx * cam.fx / z
    didy[:, 1] = gy * cam.fy / z
    didy[:, 2] = -(gx * cam.fx * Y[:, 0] + gy * cam.fy * Y[:, 1]) / (z * z)
    # Right perturbation T exp(xi): dY/dw = -R [X]x and dY/dv = R, so the
    # rotational block contracts to -(R^T dI/dY) x X.
    q = didy @ pose[:3, :3]
    J = np.hstack([-np.cross(q, X), q])
    return vals[ok] - intens_track[ok], J, n


def _huber_sqrt_weights(r):
    """Square roots of Huber IRLS weights: 1 inside delta, delta/|r| outside."""
    a = np.abs(r)
    with np.errstate(divide="ignore"):
        w = np.where(a <= HUBER_DELTA, 1.0, HUBER_DELTA / a)
    return np.sqrt(w)


def _run_level(ref, track, pose0, *, rotation_only, loss="huber"):
    """Dog-leg alignment at one pyramid level from pose0.

    Returns the OptimizeResult; its x is the refined pose. Raises
    AlignmentFailure when pose0 itself has too little overlap. Trial
    poses that lose the overlap mid-optimization are rejected through a
    large stand-in cost instead.
    """
    dim = 3 if rotation_only else 6
    # One-slot evaluation cache keyed by object identity; holding the pose
    # reference keeps its id from being recycled while the entry lives.
    cache = [None, None]
    started = [False]

    def evaluate(pose):
        if cache[0] is not pose:
            try:
                r, J, n = _residuals_and_jacobian(ref, track, pose)
            except AlignmentFailure:
                if not started[0]:
                    raise
                cache[0] = pose
                cache[1] = (
                    np.full(MIN_VALID_RESIDUALS, _LOST_RESIDUAL),
                    np.zeros((MIN_VALID_RESIDUALS, dim)),
                )
                return cache[1]
            started[0] = True
            if rotation_only:
                J = J[:, :3]
            scale = 1.0 / math.sqrt(n)
            if loss == "huber":
                sw = _huber_sqrt_weights(r)
                r = sw * r
                J = sw[:, None] * J
            cache[0] = pose
            cache[1] = (r * scale, J * scale)
        return cache[1]

    def residual_fn(pose):
        return evaluate(pose)[0]

    def jacobian_fn(pose):
        return evaluate(pose)[1]

    if rotation_only:
        def retract(pose, dx):
            out = pose.copy()
            out[:3, :3] = pose[:3, :3] @ so3_exp(dx)
            return out
    else:
        def retract(pose, dx):
            return pose @ se3_exp(dx)

    return minimize_dogleg(
        residual_fn,
        jacobian_fn,
        np.asarray(pose0, dtype=np.float64),
        retract=retract,
        state=TrustRegionState(),
        max_iters=_MAX_ITERS,
        step_tol=_STEP_TOL,
        cost_tol=_COST_TOL,
    )


def optimize_rotation_so3(ref_pyr, track_pyr, *, loss="huber"):
    """Rotation-only alignment at the coarsest pyramid level.

    Returns the 3x3 rotation taking track-camera directions into the ref
    camera. Textureless input leaves the gradient flat; that returns the
    identity with a warning rather than failing.
    """
    result = _run_level(
        ref_pyr[0], track_pyr[0], np.eye(4), rotation_only=True, loss=loss
    )
    # A zero gradient with near-zero cost means the frames already agree;
    # only a flat nonzero cost signals unusable (textureless) content.
    if result.status == "flat_gradient" and result.cost > 1e-12:
        warnings.warn("flat photometric cost; returning identity rotation")
    return np.asarray(result.x)[:3, :3]


def optimize_se3(ref_pyr, track_pyr, init_rot, *, loss="huber", stats=None):
    """Full rigid-body alignment over the finer pyramid levels.

    Starts from init_rot with zero translation and runs the dog-leg loop
    at every level after the coarsest, each warm-started from the last
    and with a fresh trust radius. Returns the pose taking track-camera
    points into the ref camera. When stats is a dict, per-level iteration
    counts are recorded under "iterations". Raises TrackingError when no
    level retains enough overlap to constrain the pose.
    """
    pose = np.eye(4)
    pose[:3, :3] = np.asarray(init_rot, dtype=np.float64)
    iters = []
    succeeded = False
    for level in range(1, len(ref_pyr)):
        try:
            result = _run_level(
                ref_pyr[level], track_pyr[level], pose, rotation_only=False, loss=loss
            )
        except AlignmentFailure:
            iters.append(0)
            continue
        pose = np.asarray(result.x)
        iters.append(result.iterations)
        succeeded = True
    if len(ref_pyr) > 1 and not succeeded:
        raise TrackingError("alignment failed at every pyramid level")
    if stats is not None:
        stats["iterations"] = iters
    pose[:3, :3] = reorthonormalize(pose[:3, :3])
    return pose


def align_frames(ref: PseudoRGBDFrame, track: PseudoRGBDFrame, *, levels=5,
                 loss="huber", stats=None):
    """Relative pose of track with respect to ref (ref <- track).

    Builds both pyramids, seeds with the coarsest-level rotation fit, and
    refines over the remaining levels.
    """
    ref_pyr = build_pyramid(ref, levels)
    track_pyr = build_pyramid(track, levels)
    rot = optimize_rotation_so3(ref_pyr, track_pyr, loss=loss)
    return optimize_se3(ref_pyr, track_pyr, rot, loss=loss, stats=stats)


# ---------------------------------------------------------------------------
# Sequence tracking


@dataclass(frozen=True)
class KeyframeSchedule:
    """Every alpha-th frame anchors alignment for the frames after it."""

    alpha: int = 2

    def __post_init__(self):
        if self.alpha < 1:
            raise InputError(f"keyframe spacing must be >= 1, got {self.alpha}")

    def reference_index(self, i: int) -> int:
        """Index of the keyframe that frame i aligns against."""
        if i % self.alpha == 0:
            return i - self.alpha
        return (i // self.alpha) * self.alpha


@dataclass(frozen=True)
class WemaParams:
    """Weights and decay rate of the pose moving average.

    a weighs the current pose, b and g the two previous ones; they must
    be non-negative and sum to one. omega sets how fast the smoothing
    strength saturates with the frame count; dynamic=False pins the
    strength at its saturated value instead.
    """

    a: float = 0.5
    b: float = 0.3
    g: float = 0.2
    omega: float = 0.05
    dynamic: bool = True

    def __post_init__(self):
        if self.a < 0.0 or self.b < 0.0 or self.g < 0.0:
            raise InputError("moving-average weights must be non-negative")
        if abs(self.a + self.b + self.g - 1.0) > 1e-12:
            raise InputError(
                f"weights must sum to 1, got {self.a + self.b + self.g!r}"
            )
        if not self.omega > 0.0:
            raise InputError(f"decay rate must be positive, got {self.omega}")

    def strength(self, i: int) -> float:
        """Smoothing strength for frame count i, in [0, 1)."""
        if not self.dynamic:
            return 1.0
        return 1.0 - math.exp(-i * self.omega)


def wema_regularize(x_i, x_im1, x_im2, params: WemaParams, i: int):
    """Pull pose x_i toward a weighted blend with the two previous poses.

    The blend happens in the tangent space at x_i, where x_i itself
    contributes nothing, and the result interpolates from x_i toward the
    blend with strength 1 - exp(-i * omega). Frames earlier than i = 2
    have no complete history and pass through unchanged.
    """
    x_i = np.asarray(x_i, dtype=np.float64)
    if i < 2:
        return x_i
    s = params.strength(i)
    inv = se3_inverse(x_i)
    offset = params.b * se3_log(inv @ np.asarray(x_im1, dtype=np.float64))
    offset += params.g * se3_log(inv @ np.asarray(x_im2, dtype=np.float64))
    out = x_i @ se3_exp(s * offset)
    out[:3, :3] = reorthonormalize(out[:3, :3])
    return out


def regularize_trajectory(poses, params: WemaParams | None):
    """Apply the moving average to a world-pose sequence, in frame order.

    The history fed to each frame is the raw estimated poses, matching
    the recurrence this implements; None switches the pass off and
    returns the input unchanged.
    """
    if params is None:
        return [np.asarray(p, dtype=np.float64) for p in poses]
    out = []
    for i, p in enumerate(poses):
        if i < 2:
            out.append(np.asarray(p, dtype=np.float64))
        else:
            out.append(wema_regularize(p, poses[i - 1], poses[i - 2], params, i))
    return out


def track_sequence(frames, schedule: KeyframeSchedule | None = None, *,
                   levels=5, loss="huber", wema: WemaParams | None = None):
    """World poses for a frame sequence, anchored at frame 0.

    Keyframes (indices divisible by the schedule spacing) align to the
    previous keyframe; other frames align to the keyframe before them.
    Each world pose is the reference keyframe's world pose composed with
    the estimated relative pose. A failed alignment raises TrackingError
    carrying the frame index (attribute frame_index) and the world poses
    estimated so far (attribute poses). When wema is given, the finished
    trajectory is smoothed with the moving average before being returned.
    """
    if len(frames) < 1:
        raise InputError("need at least one frame")
    schedule = schedule or KeyframeSchedule()
    poses = [np.eye(4)]
    pyramids = {0: build_pyramid(frames[0], levels)}

    for i in range(1, len(frames)):
        ref_idx = max(schedule.reference_index(i), 0)
        if ref_idx not in pyramids:
            pyramids[ref_idx] = build_pyramid(frames[ref_idx], levels)
        track_pyr = build_pyramid(frames[i], levels)
        try:
            rot = optimize_rotation_so3(pyramids[ref_idx], track_pyr, loss=loss)
            rel = optimize_se3(pyramids[ref_idx], track_pyr, rot, loss=loss)
        except (TrackingError, AlignmentFailure) as exc:
            err = TrackingError(f"tracking lost at frame {frames[i].index}: {exc}")
            err.frame_index = frames[i].index
            err.poses = poses
            raise err from exc
        world = poses[ref_idx] @ rel
        world[:3, :3] = reorthonormalize(world[:3, :3])
        poses.append(world)
        if i % schedule.alpha == 0:
            pyramids = {i: track_pyr}

    return regularize_trajectory(poses, wema)
