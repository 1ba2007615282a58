"""SO(3)/SE(3) utilities, pinhole camera model, bilinear image sampling.

Conventions used throughout the package:
  - Rigid transforms are 4x4 float64 matrices acting on column vectors.
  - Twists are 6-vectors ordered [omega (3), v (3)], rotation first.
  - Pixel coordinates are (u, v) with u along image width, origin at the
    center of the top-left pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Below this angle the closed-form Rodrigues coefficients lose precision,
# so series expansions take over.
_SMALL_ANGLE = 1e-4

# so3_log is numerically unstable this close to pi; callers must not rely
# on logs there.
_PI_MARGIN = 1e-6


def so3_hat(w):
    """Map a 3-vector to the corresponding skew-symmetric matrix."""
    w = np.asarray(w, dtype=np.float64)
    return np.array([
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ])


def so3_vee(W):
    """Inverse of :func:`so3_hat`."""
    W = np.asarray(W, dtype=np.float64)
    return np.array([W[2, 1], W[0, 2], W[1, 0]])


def so3_exp(w):
    """Rodrigues exponential of a rotation vector."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    W = so3_hat(w)
    if theta < _SMALL_ANGLE:
        a = 1.0 - theta**2 / 6.0
        b = 0.5 - theta**2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * W + b * (W @ W)


def so3_log(R):
    """Rotation vector of a rotation matrix.

    Raises ValueError when the rotation angle is within 1e-6 of pi, where
    the axis is not recoverable to useful precision.
    """
    R = np.asarray(R, dtype=np.float64)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if np.pi - theta < _PI_MARGIN:
        raise ValueError(
            f"rotation angle {theta:.9f} is within {_PI_MARGIN} of pi; "
            "log is ill-conditioned there"
        )
    w = so3_vee(R - R.T) / 2.0
    if theta < _SMALL_ANGLE:
        return w * (1.0 + theta**2 / 6.0)
    return w * (theta / np.sin(theta))


def so3_left_jacobian(w):
    """Left Jacobian of SO(3), relating rotation-vector and body velocities."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    W = so3_hat(w)
    if theta < _SMALL_ANGLE:
        a = 0.5 - theta**2 / 24.0
        b = 1.0 / 6.0 - theta**2 / 120.0
    else:
        a = (1.0 - np.cos(theta)) / theta**2
        b = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + a * W + b * (W @ W)


def so3_left_jacobian_inv(w):
    """Inverse of :func:`so3_left_jacobian`."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    W = so3_hat(w)
    if theta < _SMALL_ANGLE:
        c = 1.0 / 12.0 + theta**2 / 720.0
    else:
        c = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) - 0.5 * W + c * (W @ W)


def se3_exp(xi):
    """Exponential map of a twist [omega, v] to a 4x4 rigid transform."""
    xi = np.asarray(xi, dtype=np.float64)
    w, v = xi[:3], xi[3:]
    T = np.eye(4)
    T[:3, :3] = so3_exp(w)
    T[:3, 3] = so3_left_jacobian(w) @ v
    return T


def se3_log(T):
    """Twist [omega, v] of a rigid transform, inverse of :func:`se3_exp`."""
    T = np.asarray(T, dtype=np.float64)
    w = so3_log(T[:3, :3])
    v = so3_left_jacobian_inv(w) @ T[:3, 3]
    return np.concatenate([w, v])


def se3_inverse(T):
    """Closed-form inverse of a rigid transform."""
    T = np.asarray(T, dtype=np.float64)
    R = T[:3, :3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ T[:3, 3]
    return out


def rotation_defect(T):
    """Max absolute deviation of the rotation block from orthonormality."""
    R = np.asarray(T, dtype=np.float64)[:3, :3]
    return float(np.abs(R.T @ R - np.eye(3)).max())


def reorthonormalize(T):
    """Project the rotation block onto SO(3), keeping the translation.

    Uses the polar factor from an SVD; the determinant sign is corrected so
    the result is a proper rotation.
    """
    T = np.array(T, dtype=np.float64)
    U, _, Vt = np.linalg.svd(T[:3, :3])
    R = U @ Vt
    if np.linalg.det(R) < 0.0:
        R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
    T[:3, :3] = R
    return T


# Poses drift off the manifold as compositions accumulate; re-project after
# this many, or sooner if the defect is already visible.
_RENORM_EVERY = 100
_RENORM_DEFECT = 1e-9


class PoseChain:
    """Composes a running world pose, re-orthonormalizing periodically."""

    def __init__(self, initial=None):
        self.pose = np.eye(4) if initial is None else np.array(initial, dtype=np.float64)
        self._count = 0

    def advance(self, rel):
        """Right-multiply a relative transform onto the current pose."""
        self.pose = self.pose @ np.asarray(rel, dtype=np.float64)
        self._count += 1
        if self._count >= _RENORM_EVERY or rotation_defect(self.pose) > _RENORM_DEFECT:
            self.pose = reorthonormalize(self.pose)
            self._count = 0
        return self.pose


def transform_points(T, pts):
    """Apply a rigid transform to an (N, 3) array of points."""
    T = np.asarray(T, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ T[:3, :3].T + T[:3, 3]


@dataclass(frozen=True)
class PinholeCamera:
    """Pinhole intrinsics for an image of known size."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def project(self, pts):
        """Project (N, 3) camera-frame points to (N, 2) pixel coordinates.

        Points at or behind the camera plane get non-finite coordinates.
        """
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        z = pts[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.where(z > 0.0, self.fx * pts[:, 0] / z + self.cx, np.nan)
            v = np.where(z > 0.0, self.fy * pts[:, 1] / z + self.cy, np.nan)
        return np.stack([u, v], axis=-1)

    def backproject(self, u, v, z):
        """Lift pixel coordinates with depth to (N, 3) camera-frame points."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        x = (u - self.cx) * z / self.fx
        y = (v - self.cy) * z / self.fy
        return np.stack([x, y, z], axis=-1)

    def pixel_grid(self):
        """(H, W) arrays of u and v coordinates for every pixel."""
        u, v = np.meshgrid(
            np.arange(self.width, dtype=np.float64),
            np.arange(self.height, dtype=np.float64),
        )
        return u, v

    def in_bounds(self, uv, margin=0.0):
        """Mask of (N, 2) pixel coordinates that lie inside the image."""
        uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
        return (
            np.isfinite(uv).all(axis=-1)
            & (uv[:, 0] >= margin)
            & (uv[:, 0] <= self.width - 1 - margin)
            & (uv[:, 1] >= margin)
            & (uv[:, 1] <= self.height - 1 - margin)
        )

    def scaled(self, factor, width, height):
        """Intrinsics for a resized image of the given dimensions."""
        return PinholeCamera(
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=self.cx * factor,
            cy=self.cy * factor,
            width=width,
            height=height,
        )


def bilinear_sample(img, x, y):
    """Bilinearly sample an image at continuous (x, y) pixel coordinates.

    Returns (values, valid). Samples outside [0, W-1] x [0, H-1] are
    invalid, as are samples where any corner with nonzero interpolation
    weight is non-finite; zero-weight corners cannot poison a sample, so
    integer-coordinate lookups return the pixel value exactly. Invalid
    samples are returned as 0.
    """
    img = np.asarray(img, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    h, w = img.shape

    valid = (
        np.isfinite(x) & np.isfinite(y)
        & (x >= 0.0) & (x <= w - 1.0)
        & (y >= 0.0) & (y <= h - 1.0)
    )
    xc = np.where(valid, x, 0.0)
    yc = np.where(valid, y, 0.0)

    # Clamp the base corner so x == w-1 lands in the last full cell.
    x0 = np.clip(np.floor(xc).astype(np.int64), 0, w - 2) if w > 1 else np.zeros_like(xc, dtype=np.int64)
    y0 = np.clip(np.floor(yc).astype(np.int64), 0, h - 2) if h > 1 else np.zeros_like(yc, dtype=np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0

    w00 = (1.0 - fx) * (1.0 - fy)
    w01 = fx * (1.0 - fy)
    w10 = (1.0 - fx) * fy
    w11 = fx * fy

    corners = (img[y0, x0], img[y0, x1], img[y1, x0], img[y1, x1])
    weights = (w00, w01, w10, w11)
    values = np.zeros(np.broadcast(xc, yc).shape)
    for c, wt in zip(corners, weights):
        finite = np.isfinite(c)
        values = values + wt * np.where(finite, c, 0.0)
        valid = valid & (finite | (wt == 0.0))

    return np.where(valid, values, 0.0), valid


def bilinear_sample_with_gradient(img, x, y):
    """Sample an image bilinearly, also returning the interpolant's gradient.

    The gradients are the exact in-cell derivatives of the bilinear surface,
    not finite differences of neighbouring samples. Returns
    (values, dx, dy, valid).
    """
    img = np.asarray(img, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    h, w = img.shape

    valid = (
        np.isfinite(x) & np.isfinite(y)
        & (x >= 0.0) & (x <= w - 1.0)
        & (y >= 0.0) & (y <= h - 1.0)
    )
    xc = np.where(valid, x, 0.0)
    yc = np.where(valid, y, 0.0)

    x0 = np.clip(np.floor(xc).astype(np.int64), 0, w - 2) if w > 1 else np.zeros_like(xc, dtype=np.int64)
    y0 = np.clip(np.floor(yc).astype(np.int64), 0, h - 2) if h > 1 else np.zeros_like(yc, dtype=np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0

    i00 = img[y0, x0]
    i01 = img[y0, x1]
    i10 = img[y1, x0]
    i11 = img[y1, x1]

    # Same corner-weighted accumulation as bilinear_sample, so both paths
    # agree bit for bit on the value.
    values = (
        (1.0 - fx) * (1.0 - fy) * i00
        + fx * (1.0 - fy) * i01
        + (1.0 - fx) * fy * i10
        + fx * fy * i11
    )
    dx = (i01 - i00) * (1.0 - fy) + (i11 - i10) * fy
    dy = (i10 - i00) * (1.0 - fx) + (i11 - i01) * fx

    valid = valid & np.isfinite(values) & np.isfinite(dx) & np.isfinite(dy)
    z = np.zeros_like(values)
    return (
        np.where(valid, values, z),
        np.where(valid, dx, z),
        np.where(valid, dy, z),
        valid,
    )
