"""Anisotropic 3D Gaussian primitives.

Covariances are assembled from a unit quaternion and per-axis scales,
colors come from real spherical harmonics (degree <= 3).  Batched helpers
work on struct-of-arrays inputs and come with vector-Jacobian products
used by the training loop.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGaussianError, InvalidParameterError

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

MAX_SH_DEGREE = 3
_COND_LIMIT = 1e12
_REG_EPS = 1e-9


def sh_coeff_count(degree: int) -> int:
    return (degree + 1) ** 2


def _check_degree(degree):
    if not 0 <= int(degree) <= MAX_SH_DEGREE:
        raise InvalidParameterError(f"sh degree must be in [0, 3], got {degree}")


# ---------------------------------------------------------------------------
# quaternions and covariance


def normalize_quat(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / n, n


def normalize_quat_vjp(q_unit, norm, g_unit):
    """Gradient w.r.t. the raw quaternion given the gradient w.r.t. q/|q|."""
    dot = np.sum(q_unit * g_unit, axis=-1, keepdims=True)
    return (g_unit - q_unit * dot) / norm


def quat_to_rotmat(q):
    """Rotation matrices from unit quaternions (w, x, y, z); shape (..., 3, 3)."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_rotmat_vjp(q, gR):
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    g = gR
    gq = np.empty_like(q)
    gq[..., 0] = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
                      - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    gq[..., 1] = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0]
                      - 2 * x * g[..., 1, 1] - w * g[..., 1, 2] + z * g[..., 2, 0]
                      + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    gq[..., 2] = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2]
                      + x * g[..., 1, 0] + z * g[..., 1, 2] - w * g[..., 2, 0]
                      + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    gq[..., 3] = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2]
                      + w * g[..., 1, 0] - 2 * z * g[..., 1, 1] + y * g[..., 1, 2]
                      + x * g[..., 2, 0] + y * g[..., 2, 1])
    return gq


def covariance_from(q_unit, scale):
    """Batched R diag(s^2) R^T.  Returns (cov, R)."""
    R = quat_to_rotmat(q_unit)
    M = R * scale[..., None, :]
    return M @ np.swapaxes(M, -1, -2), R


def covariance_vjp(R, scale, g_cov):
    """Gradients w.r.t. (unit quaternion, linear scale) from a full-matrix dL/dSigma."""
    M = R * scale[..., None, :]
    g_M = (g_cov + np.swapaxes(g_cov, -1, -2)) @ M
    g_R = g_M * scale[..., None, :]
    g_scale = np.sum(g_M * R, axis=-2)
    return g_R, g_scale


def assemble_covariance(rotation, scale):
    """Covariance R S S^T R^T for one Gaussian.

    ``rotation`` is a unit quaternion (w, x, y, z); ``scale`` the linear
    per-axis standard deviations.
    """
    rotation = np.asarray(rotation, dtype=float)
    scale = np.asarray(scale, dtype=float)
    if rotation.shape != (4,) or scale.shape != (3,):
        raise InvalidParameterError("expected a 4-vector rotation and a 3-vector scale")
    if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(scale))):
        raise InvalidParameterError("non-finite rotation or scale")
    if np.any(scale <= 0):
        raise InvalidParameterError(f"scale components must be positive, got {scale}")
    q, _ = normalize_quat(rotation)
    cov, _ = covariance_from(q, scale)
    return 0.5 * (cov + cov.T)


def evaluate_density(cov, offset) -> float:
    """Unnormalized Gaussian density exp(-1/2 x^T Sigma^-1 x)."""
    cov = np.asarray(cov, dtype=float)
    offset = np.asarray(offset, dtype=float)
    if not np.all(np.isfinite(cov)):
        raise DegenerateGaussianError("non-finite covariance")
    if np.linalg.cond(cov) > _COND_LIMIT:
        cov = cov + _REG_EPS * np.eye(cov.shape[0])
    try:
        sol = np.linalg.solve(cov, offset)
    except np.linalg.LinAlgError as exc:
        raise DegenerateGaussianError("covariance is singular after regularization") from exc
    q = float(offset @ sol)
    if not np.isfinite(q):
        raise DegenerateGaussianError("covariance is singular after regularization")
    return float(np.exp(-0.5 * q))


# ---------------------------------------------------------------------------
# spherical harmonics


def sh_basis(dirs, degree):
    """Real SH basis values for unit directions; shape (..., (degree+1)^2)."""
    _check_degree(degree)
    dirs = np.asarray(dirs, dtype=float)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = np.empty(dirs.shape[:-1] + (sh_coeff_count(degree),), dtype=dirs.dtype)
    out[..., 0] = SH_C0
    if degree >= 1:
        out[..., 1] = -SH_C1 * y
        out[..., 2] = SH_C1 * z
        out[..., 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 4] = SH_C2[0] * x * y
        out[..., 5] = SH_C2[1] * y * z
        out[..., 6] = SH_C2[2] * (2 * zz - xx - yy)
        out[..., 7] = SH_C2[3] * x * z
        out[..., 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        out[..., 9] = SH_C3[0] * y * (3 * xx - yy)
        out[..., 10] = SH_C3[1] * x * y * z
        out[..., 11] = SH_C3[2] * y * (4 * zz - xx - yy)
        out[..., 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        out[..., 13] = SH_C3[4] * x * (4 * zz - xx - yy)
        out[..., 14] = SH_C3[5] * z * (xx - yy)
        out[..., 15] = SH_C3[6] * x * (xx - 3 * yy)
    return out


def sh_basis_jacobian(dirs, degree):
    """d basis / d dir; shape (..., (degree+1)^2, 3)."""
    dirs = np.asarray(dirs, dtype=float)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    J = np.zeros(dirs.shape[:-1] + (sh_coeff_count(degree), 3), dtype=dirs.dtype)
    if degree >= 1:
        J[..., 1, 1] = -SH_C1
        J[..., 2, 2] = SH_C1
        J[..., 3, 0] = -SH_C1
    if degree >= 2:
        a, b, c, d, e = SH_C2
        J[..., 4, 0], J[..., 4, 1] = a * y, a * x
        J[..., 5, 1], J[..., 5, 2] = b * z, b * y
        J[..., 6, 0], J[..., 6, 1], J[..., 6, 2] = -2 * c * x, -2 * c * y, 4 * c * z
        J[..., 7, 0], J[..., 7, 2] = d * z, d * x
        J[..., 8, 0], J[..., 8, 1] = 2 * e * x, -2 * e * y
    if degree >= 3:
        f, g, h, i, j, k, l = SH_C3
        xx, yy, zz = x * x, y * y, z * z
        J[..., 9, 0], J[..., 9, 1] = 6 * f * x * y, f * (3 * xx - 3 * yy)
        J[..., 10, 0], J[..., 10, 1], J[..., 10, 2] = g * y * z, g * x * z, g * x * y
        J[..., 11, 0] = -2 * h * x * y
        J[..., 11, 1] = h * (4 * zz - xx - 3 * yy)
        J[..., 11, 2] = 8 * h * y * z
        J[..., 12, 0], J[..., 12, 1] = -6 * i * x * z, -6 * i * y * z
        J[..., 12, 2] = i * (6 * zz - 3 * xx - 3 * yy)
        J[..., 13, 0] = j * (4 * zz - 3 * xx - yy)
        J[..., 13, 1], J[..., 13, 2] = -2 * j * x * y, 8 * j * x * z
        J[..., 14, 0], J[..., 14, 1], J[..., 14, 2] = 2 * k * x * z, -2 * k * y * z, k * (xx - yy)
        J[..., 15, 0], J[..., 15, 1] = l * (3 * xx - 3 * yy), -6 * l * x * y
    return J


def evaluate_sh(sh_coeffs, degree, view_dir):
    """RGB color of one Gaussian seen along ``view_dir``, clamped at zero.

    ``sh_coeffs`` has shape ((degree+1)^2, 3).  No DC offset is added.
    """
    _check_degree(degree)
    sh = np.asarray(sh_coeffs, dtype=float).reshape(sh_coeff_count(degree), 3)
    basis = sh_basis(np.asarray(view_dir, dtype=float), degree)
    return np.maximum(basis @ sh, 0.0)


# ---------------------------------------------------------------------------
# primitives


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


@dataclass
class GaussianPrimitive:
    """One Gaussian with unconstrained (log / logit) parameters."""

    center: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    sh_coeffs: np.ndarray
    sh_degree: int = 1

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        self.rotation, _ = normalize_quat(np.asarray(self.rotation, dtype=float).reshape(4))
        self.log_scale = np.asarray(self.log_scale, dtype=float).reshape(3)
        self.opacity_logit = float(self.opacity_logit)
        _check_degree(self.sh_degree)
        sh = np.asarray(self.sh_coeffs, dtype=float)
        if sh.size != 3 * sh_coeff_count(self.sh_degree):
            raise InvalidParameterError(
                f"expected {3 * sh_coeff_count(self.sh_degree)} SH values, got {sh.size}")
        self.sh_coeffs = sh.reshape(sh_coeff_count(self.sh_degree), 3)

    @property
    def scale(self):
        return np.exp(self.log_scale)

    @property
    def opacity(self):
        return float(sigmoid(self.opacity_logit))

    @property
    def covariance(self):
        return assemble_covariance(self.rotation, self.scale)

    def density(self, point):
        return evaluate_density(self.covariance, np.asarray(point, dtype=float) - self.center)

    def color(self, view_dir):
        return evaluate_sh(self.sh_coeffs, self.sh_degree, view_dir)


PARAM_FIELDS = ("means", "quats", "log_scales", "opacity_logits", "sh")


@dataclass
class GaussianSet:
    """Struct-of-arrays collection of Gaussians.

    means (N,3), quats (N,4), log_scales (N,3), opacity_logits (N,),
    sh (N, (degree+1)^2, 3).
    """

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    sh_degree: int = field(default=1)

    def __post_init__(self):
        _check_degree(self.sh_degree)
        n = len(self.means)
        k = sh_coeff_count(self.sh_degree)
        shapes = {"means": (n, 3), "quats": (n, 4), "log_scales": (n, 3),
                  "opacity_logits": (n,), "sh": (n, k, 3)}
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name))
            if arr.shape != shape:
                raise InvalidParameterError(f"{name}: expected shape {shape}, got {arr.shape}")
            setattr(self, name, arr)

    def __len__(self):
        return len(self.means)

    def __getitem__(self, i) -> GaussianPrimitive:
        return GaussianPrimitive(self.means[i], self.quats[i], self.log_scales[i],
                                 self.opacity_logits[i], self.sh[i], self.sh_degree)

    @classmethod
    def empty(cls, sh_degree=1, dtype=float):
        k = sh_coeff_count(sh_degree)
        z = lambda *s: np.zeros(s, dtype=dtype)  # noqa: E731
        return cls(z(0, 3), z(0, 4), z(0, 3), z(0), z(0, k, 3), sh_degree)

    @classmethod
    def from_primitives(cls, prims):
        prims = list(prims)
        if not prims:
            return cls.empty()
        degree = prims[0].sh_degree
        return cls(
            np.stack([p.center for p in prims]),
            np.stack([p.rotation for p in prims]),
            np.stack([p.log_scale for p in prims]),
            np.array([p.opacity_logit for p in prims]),
            np.stack([p.sh_coeffs for p in prims]),
            degree,
        )

    def arrays(self):
        return {name: getattr(self, name) for name in PARAM_FIELDS}

    def copy(self):
        return GaussianSet(**{k: v.copy() for k, v in self.arrays().items()},
                           sh_degree=self.sh_degree)

    def subset(self, keep):
        return GaussianSet(**{k: v[keep].copy() for k, v in self.arrays().items()},
                           sh_degree=self.sh_degree)

    def append(self, other: "GaussianSet"):
        return GaussianSet(**{k: np.concatenate([v, getattr(other, k)])
                              for k, v in self.arrays().items()},
                           sh_degree=self.sh_degree)

    def astype(self, dtype):
        return GaussianSet(**{k: v.astype(dtype) for k, v in self.arrays().items()},
                           sh_degree=self.sh_degree)
