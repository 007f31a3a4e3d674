"""Sinusoidal positional encoding shared by the deformation and appearance nets."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError


@dataclass(frozen=True)
class EncodingConfig:
    spatial_bands: int = 10
    temporal_bands: int = 6

    def __post_init__(self):
        if self.spatial_bands < 1 or self.temporal_bands < 1:
            raise InvalidParameterError("band counts must be >= 1")

    @property
    def dim(self) -> int:
        return 6 * self.spatial_bands + 2 * self.temporal_bands


def _freqs(L):
    return np.pi * 2.0 ** np.arange(L)


def encode_scalar(p, L):
    """(sin(2^k pi p), cos(2^k pi p)) for k = 0..L-1, interleaved.

    Works elementwise: an input of shape S gives an output of shape S + (2L,).
    """
    p = np.asarray(p, dtype=float)
    ang = p[..., None] * _freqs(L)
    out = np.empty(p.shape + (2 * L,), dtype=p.dtype)
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def encode_scalar_derivative(p, L):
    """d encode_scalar / dp, same shape as ``encode_scalar(p, L)``."""
    p = np.asarray(p, dtype=float)
    f = _freqs(L)
    ang = p[..., None] * f
    out = np.empty(p.shape + (2 * L,), dtype=p.dtype)
    out[..., 0::2] = f * np.cos(ang)
    out[..., 1::2] = -f * np.sin(ang)
    return out


def encode_input(mu, t, cfg: EncodingConfig):
    """[enc(mu_x), enc(mu_y), enc(mu_z), enc(t)] for one center or a batch (N,3)."""
    mu = np.asarray(mu, dtype=float)
    single = mu.ndim == 1
    mu = np.atleast_2d(mu)
    spatial = encode_scalar(mu, cfg.spatial_bands).reshape(len(mu), -1)
    temporal = encode_scalar(np.asarray(t, dtype=mu.dtype), cfg.temporal_bands)
    out = np.concatenate([spatial, np.broadcast_to(temporal, (len(mu), temporal.shape[-1]))],
                         axis=1)
    return out[0] if single else out


def encode_input_vjp(mu, cfg: EncodingConfig, g_enc):
    """Gradient w.r.t. the centers given dL/d(encoding) of shape (N, dim)."""
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    L = cfg.spatial_bands
    d = encode_scalar_derivative(mu, L)
    g = g_enc[:, : 6 * L].reshape(len(mu), 3, 2 * L)
    return np.sum(d * g, axis=-1)
