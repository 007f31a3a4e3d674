"""Pinhole camera and EWA screen-space projection.

Conventions: camera looks down +z, y points down, pixel (row v, column u)
has its center at the integer coordinate (u, v).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import InvalidDepthError, InvalidParameterError

DEFAULT_DILATION = 0.3
EXTENT_SIGMA = 3.0


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray = field(default_factory=lambda: np.eye(4))
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=float).reshape(4, 4)
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidParameterError("focal lengths must be positive")
        if not (self.near > 0 and self.far > self.near):
            raise InvalidParameterError("need 0 < near < far")
        if self.width <= 0 or self.height <= 0:
            raise InvalidParameterError("image size must be positive")
        R = self.rotation
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise InvalidParameterError("world_to_camera rotation block is not orthonormal")
        self.width = int(self.width)
        self.height = int(self.height)

    @property
    def rotation(self):
        return self.world_to_camera[:3, :3]

    @property
    def translation(self):
        return self.world_to_camera[:3, 3]

    @property
    def center(self):
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_dict(self):
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "world_to_camera": self.world_to_camera.tolist(),
            "near": self.near, "far": self.far,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"],
                   np.array(d["world_to_camera"], dtype=float),
                   d.get("near", 0.01), d.get("far", 100.0))


def look_at(eye, target, down=(0.0, 1.0, 0.0)):
    """World-to-camera matrix for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=float)
    f = np.asarray(target, dtype=float) - eye
    f /= np.linalg.norm(f)
    right = np.cross(np.asarray(down, dtype=float), f)
    right /= np.linalg.norm(right)
    d = np.cross(f, right)
    W = np.eye(4)
    W[:3, :3] = np.stack([right, d, f])
    W[:3, 3] = -W[:3, :3] @ eye
    return W


class Projection(NamedTuple):
    screen: np.ndarray
    depth: float
    in_front: bool


def project_point(cam: Camera, p_world) -> Projection:
    """Pinhole projection.  ``in_front`` is False when depth <= near."""
    p = cam.rotation @ np.asarray(p_world, dtype=float) + cam.translation
    x, y, z = p
    if z <= cam.near:
        return Projection(np.array([np.nan, np.nan]), float(z), False)
    return Projection(np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy]), float(z), True)


def projection_jacobian(cam: Camera, p_cam):
    """Jacobian of the perspective map at a camera-space point (2x3)."""
    x, y, z = np.asarray(p_cam, dtype=float)
    if z <= 0:
        raise InvalidDepthError(f"point depth must be positive, got {z}")
    return np.array([
        [cam.fx / z, 0.0, -cam.fx * x / (z * z)],
        [0.0, cam.fy / z, -cam.fy * y / (z * z)],
    ])


def project_covariance(cam: Camera, p_world, cov, dilation=DEFAULT_DILATION):
    """Screen-space covariance J W Sigma W^T J^T + dilation * I."""
    p_cam = cam.rotation @ np.asarray(p_world, dtype=float) + cam.translation
    J = projection_jacobian(cam, p_cam)
    M = J @ cam.rotation
    out = M @ np.asarray(cov, dtype=float) @ M.T + dilation * np.eye(2)
    return 0.5 * (out + out.T)


# ---------------------------------------------------------------------------
# batched versions used by the scene resolver


def project_batch(cam: Camera, means, covs, dilation=DEFAULT_DILATION):
    """Project N Gaussians.  Returns a dict of intermediates (kept for the VJP)."""
    Rw = cam.rotation
    p_cam = means @ Rw.T + cam.translation
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    in_front = (z > cam.near) & (z < cam.far)
    zs = np.where(in_front, z, 1.0)
    inv_z = 1.0 / zs
    J = np.zeros((len(means), 2, 3), dtype=means.dtype)
    J[:, 0, 0] = cam.fx * inv_z
    J[:, 0, 2] = -cam.fx * x * inv_z * inv_z
    J[:, 1, 1] = cam.fy * inv_z
    J[:, 1, 2] = -cam.fy * y * inv_z * inv_z
    M = J @ Rw
    cov2d = M @ covs @ np.swapaxes(M, 1, 2)
    cov2d[:, 0, 0] += dilation
    cov2d[:, 1, 1] += dilation
    screen = np.stack([cam.fx * x * inv_z + cam.cx, cam.fy * y * inv_z + cam.cy], axis=1)
    return {"p_cam": p_cam, "inv_z": inv_z, "J": J, "M": M, "cov2d": cov2d,
            "screen": screen, "depth": z, "in_front": in_front}


def splat_extent_visible(cam: Camera, screen, cov2d, in_front):
    """Expanded-frustum test: does the 3-sigma box of a splat overlap the image?"""
    with np.errstate(invalid="ignore"):
        rx = EXTENT_SIGMA * np.sqrt(np.maximum(cov2d[:, 0, 0], 0.0))
        ry = EXTENT_SIGMA * np.sqrt(np.maximum(cov2d[:, 1, 1], 0.0))
    u, v = screen[:, 0], screen[:, 1]
    ok = (u + rx >= 0) & (u - rx <= cam.width - 1) & (v + ry >= 0) & (v - ry <= cam.height - 1)
    return in_front & ok & np.isfinite(u) & np.isfinite(v)


def project_batch_vjp(cam: Camera, proj, covs, g_screen, g_cov2d, g_depth):
    """Gradients w.r.t. world means and 3D covariances.

    ``g_cov2d`` is a full-matrix gradient (both off-diagonal entries counted
    separately); the returned covariance gradient uses the same convention.
    """
    Rw = cam.rotation
    p_cam, inv_z, M = proj["p_cam"], proj["inv_z"], proj["M"]
    x, y = p_cam[:, 0], p_cam[:, 1]
    fx, fy = cam.fx, cam.fy

    Gs = g_cov2d + np.swapaxes(g_cov2d, 1, 2)
    g_cov3 = np.swapaxes(M, 1, 2) @ g_cov2d @ M
    g_M = Gs @ M @ covs
    g_J = g_M @ Rw.T

    g_p = np.zeros_like(p_cam)
    iz2 = inv_z * inv_z
    iz3 = iz2 * inv_z
    # screen = (fx x/z + cx, fy y/z + cy)
    g_p[:, 0] += g_screen[:, 0] * fx * inv_z
    g_p[:, 1] += g_screen[:, 1] * fy * inv_z
    g_p[:, 2] += -(g_screen[:, 0] * fx * x + g_screen[:, 1] * fy * y) * iz2
    g_p[:, 2] += g_depth
    # J entries
    g_p[:, 0] += -g_J[:, 0, 2] * fx * iz2
    g_p[:, 1] += -g_J[:, 1, 2] * fy * iz2
    g_p[:, 2] += (-g_J[:, 0, 0] * fx * iz2 - g_J[:, 1, 1] * fy * iz2
                  + 2 * g_J[:, 0, 2] * fx * x * iz3 + 2 * g_J[:, 1, 2] * fy * y * iz3)
    g_means = g_p @ Rw
    return g_means, g_cov3
