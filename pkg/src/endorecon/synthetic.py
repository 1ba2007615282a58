"""Synthetic benchmark sequences with exact ground truth.

Scenes are analytic surfaces (sphere, plane, rippled heightfield) with a
procedural multi-octave value-noise albedo and headlight Lambertian
shading, rendered by per-pixel ray casting. Because intersections are
closed-form (or bisected to machine precision), the emitted depth, flow,
and poses are mutually consistent to rounding error, which makes the
datasets usable as oracles for every downstream stage. Output file sets
are byte-identical for a fixed seed.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .depth_scale import valid_depth_mask
from .errors import InputError
from .geometry import PinholeCamera, se3_inverse, so3_exp, so3_log, transform_points
from .io_formats import (
    FLOW_INVALID_VALUE,
    read_pfm,
    write_flo,
    write_image_rgb,
    write_mask,
    write_pfm,
    write_scores_csv,
    write_trajectory,
)
from .temporal import similarity_proxy

MANIFEST_SCHEMA_VERSION = 1

# Color tint applied to the grayscale render for the RGB output.
_TINT = (1.0, 0.62, 0.55)

# Path sanity limits: consecutive motion beyond these leaves the basin of
# direct photometric alignment.
_MAX_STEP_ROT_DEG = 5.0
_MAX_STEP_TRANS_FRACTION = 0.05


# ---------------------------------------------------------------------------
# Procedural texture


def _hash01(ix, iy, iz, seed):
    """Deterministic lattice hash to [0, 1), vectorized over int arrays."""
    c1 = np.uint64(0x9E3779B185EBCA87)
    c2 = np.uint64(0xC2B2AE3D27D4EB4F)
    c3 = np.uint64(0x165667B19E3779F9)
    # Seed term wraps in Python ints; numpy warns on scalar uint64 overflow.
    s4 = np.uint64((int(seed) * 0x27D4EB2F165667C5) & 0xFFFFFFFFFFFFFFFF)
    h = (
        ix.astype(np.int64).astype(np.uint64) * c1
        ^ iy.astype(np.int64).astype(np.uint64) * c2
        ^ iz.astype(np.int64).astype(np.uint64) * c3
        ^ s4
    )
    h ^= h >> np.uint64(33)
    h *= np.uint64(0xFF51AFD7ED558CCD)
    h ^= h >> np.uint64(33)
    h *= np.uint64(0xC4CEB9FE1A85EC53)
    h ^= h >> np.uint64(33)
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / float(1 << 53))


def _value_noise(pts, seed):
    """Smoothstep-interpolated lattice noise at (N, 3) points, in [0, 1)."""
    base = np.floor(pts)
    frac = pts - base
    s = frac * frac * (3.0 - 2.0 * frac)
    ix, iy, iz = base[:, 0], base[:, 1], base[:, 2]
    out = np.zeros(len(pts))
    for dx in (0, 1):
        wx = s[:, 0] if dx else 1.0 - s[:, 0]
        for dy in (0, 1):
            wy = s[:, 1] if dy else 1.0 - s[:, 1]
            for dz in (0, 1):
                wz = s[:, 2] if dz else 1.0 - s[:, 2]
                out += wx * wy * wz * _hash01(ix + dx, iy + dy, iz + dz, seed)
    return out


def texture_albedo(pts, seed, octaves=4, base_freq=8.0):
    """Multi-octave value-noise albedo at (N, 3) world points, in [0.25, 0.95].

    Octave frequencies double while amplitudes halve, so there is gradient
    signal from coarse pyramid levels down to pixel scale.
    """
    pts = np.asarray(pts, dtype=np.float64)
    total = np.zeros(len(pts))
    norm = 0.0
    for k in range(octaves):
        amp = 0.5**k
        total += amp * _value_noise(pts * (base_freq * 2.0**k), seed + k)
        norm += amp
    return 0.25 + 0.7 * (total / norm)


# ---------------------------------------------------------------------------
# Scenes


@dataclass(frozen=True)
class SceneSpec:
    """Analytic surface plus texture and lighting parameters.

    surface selects which geometric fields apply: 'sphere' uses center and
    radius; 'plane' uses normal and offset (n . X = offset); 'heightfield'
    is the plane z = offset rippled by amplitude * sin(2 pi f x) *
    sin(2 pi f y). All coordinates are in the first camera's frame (the
    world frame).
    """

    surface: str = "sphere"
    center: tuple = (0.0, 0.0, 0.35)
    radius: float = 0.15
    normal: tuple = (0.0, 0.0, 1.0)
    offset: float = 0.3
    amplitude: float = 0.01
    frequency: float = 8.0
    # Finest octave is base_freq * 2^(octaves-1) cycles/m; keep it a few
    # pixels per cycle at working distance or warped-image consistency
    # degrades to interpolation noise.
    texture_seed: int = 0
    texture_octaves: int = 4
    texture_base_freq: float = 8.0
    light_ref_depth: float = 0.3

    def __post_init__(self):
        if self.surface not in ("sphere", "plane", "heightfield"):
            raise InputError(f"unknown surface kind {self.surface!r}")


def _intersect_rays(scene, origins, dirs):
    """Ray lengths t (>=0) where origin + t*dir meets the surface.

    Returns (t, hit); t is meaningful only where hit is True. dirs must be
    unit length.
    """
    n = len(origins)
    t = np.zeros(n)
    hit = np.zeros(n, dtype=bool)

    if scene.surface == "sphere":
        c = np.asarray(scene.center)
        oc = origins - c
        b = np.einsum("ij,ij->i", oc, dirs)
        q = np.einsum("ij,ij->i", oc, oc) - scene.radius**2
        disc = b * b - q
        ok = disc >= 0.0
        root = np.sqrt(np.where(ok, disc, 0.0))
        t_near = -b - root
        hit = ok & (t_near > 1e-9)
        t = np.where(hit, t_near, 0.0)
        return t, hit

    if scene.surface == "plane":
        nrm = np.asarray(scene.normal, dtype=np.float64)
        nrm = nrm / np.linalg.norm(nrm)
        denom = dirs @ nrm
        ok = np.abs(denom) > 1e-12
        t = np.where(ok, (scene.offset - origins @ nrm) / np.where(ok, denom, 1.0), 0.0)
        hit = ok & (t > 1e-9)
        return np.where(hit, t, 0.0), hit

    # Heightfield: bracket around the base plane, then bisect. The ripple
    # displaces the surface by at most `amplitude` along z, so the true
    # root lies within that band around the plane hit.
    def g(tv):
        p = origins + tv[:, None] * dirs
        return p[:, 2] - (
            scene.offset
            + scene.amplitude
            * np.sin(2.0 * np.pi * scene.frequency * p[:, 0])
            * np.sin(2.0 * np.pi * scene.frequency * p[:, 1])
        )

    dz = dirs[:, 2]
    ok = dz > 1e-6
    t_plane = np.where(ok, (scene.offset - origins[:, 2]) / np.where(ok, dz, 1.0), 0.0)
    band = 2.0 * scene.amplitude / np.where(ok, dz, 1.0) + 1e-6
    lo = np.maximum(t_plane - band, 1e-6)
    hi = t_plane + band

    # March a fixed grid across the band to find the first sign change.
    steps = 32
    t_lo = lo.copy()
    t_hi = hi.copy()
    found = np.zeros(n, dtype=bool)
    g_prev = g(lo)
    for k in range(1, steps + 1):
        tk = lo + (hi - lo) * (k / steps)
        gk = g(tk)
        cross = ok & ~found & (g_prev <= 0.0) & (gk > 0.0)
        t_lo = np.where(cross, lo + (hi - lo) * ((k - 1) / steps), t_lo)
        t_hi = np.where(cross, tk, t_hi)
        found |= cross
        g_prev = gk
    for _ in range(60):
        mid = 0.5 * (t_lo + t_hi)
        gm = g(mid)
        below = gm <= 0.0
        t_lo = np.where(found & below, mid, t_lo)
        t_hi = np.where(found & ~below, mid, t_hi)
    t_mid = 0.5 * (t_lo + t_hi)
    hit = found & (t_mid > 1e-9)
    return np.where(hit, t_mid, 0.0), hit


def _surface_normals(scene, pts, incoming_dirs):
    """Unit normals at surface points, oriented against the incoming rays."""
    if scene.surface == "sphere":
        nrm = (pts - np.asarray(scene.center)) / scene.radius
    elif scene.surface == "plane":
        base = np.asarray(scene.normal, dtype=np.float64)
        base = base / np.linalg.norm(base)
        nrm = np.tile(base, (len(pts), 1))
    else:
        two_pi_f = 2.0 * np.pi * scene.frequency
        sx = np.sin(two_pi_f * pts[:, 0])
        cx = np.cos(two_pi_f * pts[:, 0])
        sy = np.sin(two_pi_f * pts[:, 1])
        cy = np.cos(two_pi_f * pts[:, 1])
        nrm = np.stack(
            [
                -scene.amplitude * two_pi_f * cx * sy,
                -scene.amplitude * two_pi_f * sx * cy,
                np.ones(len(pts)),
            ],
            axis=-1,
        )
        nrm /= np.linalg.norm(nrm, axis=-1, keepdims=True)
    # Flip normals pointing along the incoming direction.
    facing = np.einsum("ij,ij->i", nrm, incoming_dirs)
    return np.where(facing[:, None] > 0.0, -nrm, nrm)


def _cast(scene, camera, pose, us, vs):
    """Cast rays through pixel coords; returns (t, hit, pts_world, dirs_world).

    us/vs are flat arrays of (sub)pixel coordinates; pose is camera-to-world.
    """
    pose = np.asarray(pose, dtype=np.float64)
    dirs_cam = np.stack(
        [
            (us - camera.cx) / camera.fx,
            (vs - camera.cy) / camera.fy,
            np.ones_like(us),
        ],
        axis=-1,
    )
    dirs_cam /= np.linalg.norm(dirs_cam, axis=-1, keepdims=True)
    dirs_world = dirs_cam @ pose[:3, :3].T
    origin = pose[:3, 3]
    origins = np.broadcast_to(origin, dirs_world.shape)
    t, hit = _intersect_rays(scene, origins, dirs_world)
    pts = origins + t[:, None] * dirs_world
    return t, hit, pts, dirs_world


def analytic_depth(scene, camera, pose, us=None, vs=None):
    """Exact z-depth of the surface seen through pixels; 0 where rays miss.

    Without us/vs the full (H, W) pixel grid is used; otherwise flat arrays
    of subpixel coordinates give a flat result.
    """
    grid = us is None
    if grid:
        u2, v2 = camera.pixel_grid()
        us, vs = u2.ravel(), v2.ravel()
    else:
        us = np.asarray(us, dtype=np.float64).ravel()
        vs = np.asarray(vs, dtype=np.float64).ravel()
    pose = np.asarray(pose, dtype=np.float64)
    t, hit, pts, _dirs = _cast(scene, camera, pose, us, vs)
    cam_pts = transform_points(se3_inverse(pose), pts)
    depth = np.where(hit, cam_pts[:, 2], 0.0)
    depth = np.where(depth > 0.0, depth, 0.0)
    if grid:
        return depth.reshape(camera.height, camera.width)
    return depth


def render_frame(scene, camera, pose):
    """Render one frame; returns (gray float64 [0,1], depth float64, hit mask).

    The Lambertian cos(theta)/dist^2 light sits at the world origin (the
    entry pose's camera center, where pose 0 renders exactly as a
    headlight would). Keeping the light fixed makes shading a property of
    the surface alone, so images of a rigid scene obey brightness
    constancy across the whole sequence: moving the light with the camera
    would inject a per-frame illumination change that direct photometric
    alignment then absorbs into a systematic pose bias.
    """
    u2, v2 = camera.pixel_grid()
    us, vs = u2.ravel(), v2.ravel()
    t, hit, pts, dirs = _cast(scene, camera, pose, us, vs)

    gray = np.zeros(len(us))
    if hit.any():
        albedo = texture_albedo(
            pts[hit], scene.texture_seed, scene.texture_octaves, scene.texture_base_freq
        )
        light_dist = np.linalg.norm(pts[hit], axis=-1)
        light_dirs = pts[hit] / light_dist[:, None]
        normals = _surface_normals(scene, pts[hit], light_dirs)
        cos_term = np.einsum("ij,ij->i", normals, -light_dirs)
        cos_term = np.clip(cos_term, 0.0, 1.0)
        falloff = (scene.light_ref_depth / light_dist) ** 2
        gray[hit] = np.clip(albedo * cos_term * falloff, 0.0, 1.0)

    cam_pts = transform_points(se3_inverse(np.asarray(pose, dtype=np.float64)), pts)
    depth = np.where(hit & (cam_pts[:, 2] > 0.0), cam_pts[:, 2], 0.0)
    shape = (camera.height, camera.width)
    return gray.reshape(shape), depth.reshape(shape), hit.reshape(shape)


# ---------------------------------------------------------------------------
# Camera paths


@dataclass(frozen=True)
class CameraPathSpec:
    """Pose sequence generator plus intrinsics. Pose 0 is the identity.

    kind selects the generator: 'static' repeats the identity; 'arc'
    sweeps arc_degrees around arc_axis through arc_center while aiming at
    it (standoff stays constant); 'dolly' translates by dolly_step (camera
    coords) each frame; 'jitter' draws small random motions around the
    origin (sigma_rot_deg, sigma_trans, seeded).
    """

    camera: PinholeCamera = PinholeCamera(
        fx=220.0, fy=220.0, cx=100.0, cy=75.0, width=200, height=150
    )
    kind: str = "arc"
    n_frames: int = 30
    # ~0.4 deg/step default: per-frame motion stays far inside the
    # alignment basin and the per-frame translation under 2% of the mean
    # scene depth.
    arc_degrees: float = 12.0
    arc_center: tuple = (0.0, 0.0, 0.35)
    arc_axis: tuple = (0.0, 1.0, 0.0)
    dolly_step: tuple = (0.0, 0.0, 0.002)
    sigma_rot_deg: float = 0.3
    sigma_trans: float = 0.001
    seed: int = 0
    fps: float = 30.0

    def __post_init__(self):
        if self.kind not in ("static", "arc", "dolly", "jitter"):
            raise InputError(f"unknown path kind {self.kind!r}")
        if self.n_frames < 1:
            raise InputError("need at least one frame")
        if self.fps <= 0.0:
            raise InputError("fps must be positive")


def generate_poses(path: CameraPathSpec):
    """Camera-to-world poses for a path spec, (N, 4, 4) with pose 0 = I."""
    n = path.n_frames
    poses = np.tile(np.eye(4), (n, 1, 1))
    if path.kind == "static" or n == 1:
        return poses

    if path.kind == "arc":
        center = np.asarray(path.arc_center, dtype=np.float64)
        axis = np.asarray(path.arc_axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        step = math.radians(path.arc_degrees) / (n - 1)
        for i in range(1, n):
            # Rotate the camera rigidly about the axis through the scene
            # center; aiming and standoff are inherited from frame 0.
            R = so3_exp(axis * (step * i))
            poses[i, :3, :3] = R
            poses[i, :3, 3] = center - R @ center
        return poses

    if path.kind == "dolly":
        step = np.asarray(path.dolly_step, dtype=np.float64)
        for i in range(1, n):
            poses[i, :3, 3] = step * i
        return poses

    rng = np.random.default_rng(path.seed)
    for i in range(1, n):
        w = rng.normal(scale=math.radians(path.sigma_rot_deg), size=3)
        v = rng.normal(scale=path.sigma_trans, size=3)
        poses[i, :3, :3] = so3_exp(w)
        poses[i, :3, 3] = v
    return poses


def look_at_pose(eye, target, up_hint=(0.0, 1.0, 0.0)):
    """Camera-to-world pose placing the camera at eye, aimed at target.

    The camera convention is +z forward, +y down in the image; up_hint
    only disambiguates the roll and is replaced when near-parallel to the
    viewing direction.
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm == 0.0:
        raise InputError("eye and target coincide")
    forward = forward / norm
    up = np.asarray(up_hint, dtype=np.float64)
    if abs(float(up @ forward)) > 0.99 * np.linalg.norm(up):
        up = np.array([1.0, 0.0, 0.0])
    right = np.cross(up, forward)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = down
    pose[:3, 2] = forward
    pose[:3, 3] = eye
    return pose


def surrounding_viewpoints(center, distance, n_frames):
    """Camera poses spread over a full sphere of directions around center.

    Viewing directions follow a Fibonacci spiral, so every surface patch
    of a convex object at the center is seen near-frontally by some
    frame. Used to fuse closed surfaces; a single arc only ever observes
    one side.
    """
    if n_frames < 1:
        raise InputError("need at least one viewpoint")
    center = np.asarray(center, dtype=np.float64)
    golden = math.pi * (3.0 - math.sqrt(5.0))
    poses = np.empty((n_frames, 4, 4))
    for i in range(n_frames):
        if n_frames == 1:
            y = 0.0
        else:
            y = 1.0 - 2.0 * i / (n_frames - 1)
            y = min(1.0, max(-1.0, y))
        r = math.sqrt(max(0.0, 1.0 - y * y))
        theta = golden * i
        direction = np.array([r * math.cos(theta), y, r * math.sin(theta)])
        poses[i] = look_at_pose(center + distance * direction, center)
    return poses


def _check_path_limits(poses, mean_depth):
    """Reject consecutive motions too large for direct alignment."""
    max_trans = _MAX_STEP_TRANS_FRACTION * mean_depth
    for i in range(1, len(poses)):
        rel = se3_inverse(poses[i - 1]) @ poses[i]
        angle = math.degrees(np.linalg.norm(so3_log(rel[:3, :3])))
        trans = float(np.linalg.norm(rel[:3, 3]))
        if angle >= _MAX_STEP_ROT_DEG:
            raise InputError(
                f"frame {i}: consecutive rotation {angle:.2f} deg exceeds "
                f"{_MAX_STEP_ROT_DEG} deg"
            )
        if trans >= max_trans:
            raise InputError(
                f"frame {i}: consecutive translation {trans:.4f} m exceeds "
                f"{max_trans:.4f} m (5% of mean depth)"
            )


# ---------------------------------------------------------------------------
# Ground-truth flow


def ground_truth_flow(scene, camera, pose_prev, pose_cur, depth_cur,
                      check_occlusion=True):
    """Flow on the current frame's grid pointing to each pixel's source
    position in the previous frame.

    flow(x) = project_prev(P_prev^-1 P_cur backproject_cur(x, D(x))) - x.
    Pixels without valid depth, projecting out of the previous view, or
    occluded there (checked against an exact ray cast) carry the unknown
    marker.
    """
    h, w = depth_cur.shape
    u2, v2 = camera.pixel_grid()
    us, vs = u2.ravel(), v2.ravel()
    depth = np.asarray(depth_cur, dtype=np.float64).ravel()
    ok = valid_depth_mask(depth)

    flow = np.full((h * w, 2), FLOW_INVALID_VALUE)
    if ok.any():
        pts_cam = camera.backproject(us[ok], vs[ok], depth[ok])
        rel = se3_inverse(np.asarray(pose_prev, dtype=np.float64)) @ np.asarray(
            pose_cur, dtype=np.float64
        )
        pts_prev = transform_points(rel, pts_cam)
        uv_prev = camera.project(pts_prev)
        inside = camera.in_bounds(uv_prev)
        if check_occlusion:
            vis = np.zeros(inside.sum(), dtype=bool)
            if inside.any():
                surf_z = analytic_depth(
                    scene, camera, pose_prev,
                    uv_prev[inside, 0], uv_prev[inside, 1],
                )
                z_here = pts_prev[inside, 2]
                vis = (surf_z > 0.0) & (z_here <= surf_z + 1e-6)
            visible = inside.copy()
            visible[inside] = vis
        else:
            visible = inside
        sub = np.where(ok)[0][visible]
        flow[sub, 0] = uv_prev[visible, 0] - us[sub]
        flow[sub, 1] = uv_prev[visible, 1] - vs[sub]
    return flow.reshape(h, w, 2)


# ---------------------------------------------------------------------------
# Depth perturbation


def perturb_depth(depth, model="gaussian", seed=0, sigma=0.02, k=1.0,
                  amplitude=0.1):
    """Deterministic degradation of a depth map.

    'gaussian' adds zero-mean noise with std sigma * depth per pixel;
    'scale' multiplies all depths by k; 'low-freq-warp' modulates by
    1 + amplitude * (smooth low-frequency pattern). Invalid pixels stay
    invalid; perturbed values that land non-positive become invalid.
    """
    depth = np.asarray(depth, dtype=np.float64)
    ok = valid_depth_mask(depth)
    if model == "gaussian":
        if not np.isfinite(sigma) or sigma < 0.0:
            raise InputError(f"sigma must be non-negative, got {sigma}")
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal(depth.shape)
        out = depth * (1.0 + sigma * noise)
    elif model == "scale":
        if not np.isfinite(k) or k <= 0.0:
            raise InputError(f"scale factor must be positive, got {k}")
        out = depth * k
    elif model == "low-freq-warp":
        if not np.isfinite(amplitude):
            raise InputError("amplitude must be finite")
        h, w = depth.shape
        v2, u2 = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        pattern = np.sin(2.0 * np.pi * 1.5 * u2 / w) * np.sin(
            2.0 * np.pi * 1.5 * v2 / h
        )
        out = depth * (1.0 + amplitude * pattern)
    else:
        raise InputError(f"unknown perturbation model {model!r}")
    return np.where(ok & (out > 0.0), out, 0.0)


# ---------------------------------------------------------------------------
# Dataset emission


def _quantize_unit_gray(gray):
    """8-bit round trip of a [0,1] intensity image."""
    q = np.clip(np.round(gray * 255.0), 0, 255).astype(np.uint8)
    return q, q.astype(np.float64) / 255.0


def _tint_color(gray_u8):
    rgb = np.stack(
        [np.clip(gray_u8 * t, 0, 255).astype(np.uint8) for t in _TINT], axis=-1
    )
    return rgb


def write_manifest(path, manifest):
    """Write a manifest dict as deterministic JSON."""
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def render_sequence(scene, path_spec, out_dir, check_occlusion=True):
    """Render a full dataset into out_dir; returns the manifest path.

    Per frame: color PNG, grayscale PNG, exact depth PFM, validity mask
    PNG, and (from frame 1) ground-truth flow toward the previous frame.
    Also emitted: the ground-truth trajectory, a similarity-proxy score
    table, and the dataset manifest. Raises when the surface leaves the
    frustum or the path violates the step-size limits.
    """
    camera = path_spec.camera
    out_dir = Path(out_dir)
    frames_dir = out_dir / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)

    poses = generate_poses(path_spec)
    n = len(poses)

    grays = []
    depths = []
    frame_entries = []
    timestamps = np.arange(n) / path_spec.fps
    mean_depth = None
    for i in range(n):
        gray, depth, hit = render_frame(scene, camera, poses[i])
        coverage = float(hit.mean())
        if coverage < 0.2:
            raise InputError(
                f"frame {i}: surface covers only {coverage:.0%} of the "
                "frustum; scene left the view"
            )
        if mean_depth is None:
            mean_depth = float(depth[hit].mean())
        gray_u8, gray_q = _quantize_unit_gray(gray)
        grays.append(gray_q)
        depths.append(depth)

        color_rel = f"frames/frame_{i:04d}_color.png"
        gray_rel = f"frames/frame_{i:04d}_gray.png"
        depth_rel = f"frames/frame_{i:04d}_depth.pfm"
        mask_rel = f"frames/frame_{i:04d}_mask.png"
        write_image_rgb(out_dir / color_rel, _tint_color(gray_u8))
        write_image_rgb(
            out_dir / gray_rel, np.repeat(gray_u8[..., None], 3, axis=-1)
        )
        write_pfm(out_dir / depth_rel, depth.astype(np.float32))
        write_mask(out_dir / mask_rel, hit)
        frame_entries.append(
            {
                "index": i,
                "timestamp": float(timestamps[i]),
                "image": color_rel,
                "gray": gray_rel,
                "depth": depth_rel,
                "mask": mask_rel,
                "flow": None,
            }
        )

    _check_path_limits(poses, mean_depth)

    scores = {}
    for i in range(1, n):
        flow = ground_truth_flow(
            scene, camera, poses[i - 1], poses[i], depths[i], check_occlusion
        )
        flow_rel = f"frames/frame_{i:04d}_flow.flo"
        write_flo(out_dir / flow_rel, flow.astype(np.float32))
        frame_entries[i]["flow"] = flow_rel
        scores[i] = similarity_proxy(grays[i - 1], grays[i])

    write_trajectory(out_dir / "groundtruth.txt", timestamps, poses)
    scores_rel = "scores.csv" if scores else None
    if scores:
        write_scores_csv(out_dir / "scores.csv", scores)

    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "name": f"synthetic-{scene.surface}-{path_spec.kind}",
        "units": "meters",
        "fps": path_spec.fps,
        "depth_kind": "depth",
        "intrinsics": {
            "fx": camera.fx,
            "fy": camera.fy,
            "cx": camera.cx,
            "cy": camera.cy,
            "width": camera.width,
            "height": camera.height,
        },
        "frames": frame_entries,
        "scores": scores_rel,
        "groundtruth": "groundtruth.txt",
        "generator": {
            "scene": asdict(scene),
            "path": {
                k: v for k, v in asdict(path_spec).items() if k != "camera"
            },
        },
    }
    manifest_path = out_dir / "manifest.json"
    write_manifest(manifest_path, manifest)
    return manifest_path


def derive_perturbed_dataset(src_manifest, out_dir, model="gaussian", seed=0,
                             **kwargs):
    """New dataset whose depth maps are perturbed copies of the source's.

    Unchanged files are referenced from the source via relative paths; the
    original depth files stay reachable through 'depth_gt' for evaluation.
    """
    src_manifest = Path(src_manifest)
    src_root = src_manifest.parent
    manifest = json.loads(src_manifest.read_text())
    if manifest.get("depth_kind") != "depth":
        raise InputError("can only perturb a metric-depth dataset")
    out_dir = Path(out_dir)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)

    for frame in manifest["frames"]:
        idx = frame["index"]
        depth = read_pfm(src_root / frame["depth"]).astype(np.float64)
        noisy = perturb_depth(depth, model=model, seed=seed + idx, **kwargs)
        depth_rel = f"frames/frame_{idx:04d}_depth.pfm"
        write_pfm(out_dir / depth_rel, noisy.astype(np.float32))
        frame["depth_gt"] = os.path.relpath(src_root / frame["depth"], out_dir)
        frame["depth"] = depth_rel
        for key in ("image", "gray", "mask", "flow"):
            if frame.get(key):
                frame[key] = os.path.relpath(src_root / frame[key], out_dir)
    for key in ("scores", "groundtruth"):
        if manifest.get(key):
            manifest[key] = os.path.relpath(src_root / manifest[key], out_dir)
    manifest["name"] = manifest.get("name", "dataset") + f"-{model}"
    out_path = out_dir / "manifest.json"
    write_manifest(out_path, manifest)
    return out_path


def derive_disparity_dataset(src_manifest, out_dir, baseline=0.05,
                             f_pred=None):
    """New dataset carrying disparities d = f_pred * baseline / depth.

    The source's depth maps become per-frame reference depths
    ('depth_ref'), standing in for an independent per-frame prediction
    when a baseline is fit back from the disparities.
    """
    if not np.isfinite(baseline) or baseline <= 0.0:
        raise InputError(f"baseline must be positive, got {baseline}")
    src_manifest = Path(src_manifest)
    src_root = src_manifest.parent
    manifest = json.loads(src_manifest.read_text())
    if manifest.get("depth_kind") != "depth":
        raise InputError("source dataset must carry metric depth")
    if f_pred is None:
        f_pred = float(manifest["intrinsics"]["fx"])
    out_dir = Path(out_dir)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)

    for frame in manifest["frames"]:
        idx = frame["index"]
        depth = read_pfm(src_root / frame["depth"]).astype(np.float64)
        ok = valid_depth_mask(depth)
        disp = np.zeros_like(depth)
        disp[ok] = f_pred * baseline / depth[ok]
        disp_rel = f"frames/frame_{idx:04d}_disp.pfm"
        write_pfm(out_dir / disp_rel, disp.astype(np.float32))
        frame["disparity"] = disp_rel
        frame["depth_ref"] = os.path.relpath(src_root / frame["depth"], out_dir)
        del frame["depth"]
        for key in ("image", "gray", "mask", "flow"):
            if frame.get(key):
                frame[key] = os.path.relpath(src_root / frame[key], out_dir)
    for key in ("scores", "groundtruth"):
        if manifest.get(key):
            manifest[key] = os.path.relpath(src_root / manifest[key], out_dir)
    manifest["depth_kind"] = "disparity"
    manifest["f_pred"] = f_pred
    manifest["name"] = manifest.get("name", "dataset") + "-disparity"
    out_path = out_dir / "manifest.json"
    write_manifest(out_path, manifest)
    return out_path
