"""Tile-based differentiable splat rasterizer (CPU, numba).

Each projected Gaussian contributes ``w = min(alpha * exp(-d^T S^-1 d / 2), 0.99)``
at a pixel inside its 3-sigma bounding box.  Pixels composite their depth-
sorted splats front to back and stop once transmittance drops below 1e-4.
Alongside color the renderer produces alpha-normalized expected depth, the
accumulated alpha and per-Gaussian visibility statistics.

The backward pass walks every pixel's list in reverse, recovering the
transmittance by division, and writes per-(tile, splat) gradient rows that
are reduced per Gaussian in a fixed order, so results do not depend on
thread scheduling.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .camera import EXTENT_SIGMA
from .errors import ContractViolationError, InvalidConfigError

# per-entry gradient row layout
_G_MX, _G_MY, _G_K00, _G_K01, _G_K11, _G_R, _G_GR, _G_B, _G_A, _G_D = range(10)
_N_GRAD = 10


@dataclass
class RasterOptions:
    tile_size: int = 16
    early_stop: float = 1e-4
    max_weight: float = 0.99
    weight_eps: float = 1e-4
    depth_alpha_eps: float = 1e-4
    deterministic: bool = True


@dataclass
class RenderReadyGaussians:
    """Projected splats.  ``cov2d`` is (N,2,2); ``source`` identifies primitives."""

    means2d: np.ndarray
    cov2d: np.ndarray
    depth: np.ndarray
    rgb: np.ndarray
    opacity: np.ndarray
    source: np.ndarray = None
    is_dynamic: np.ndarray = None

    def __post_init__(self):
        n = len(self.means2d)
        if self.source is None:
            self.source = np.arange(n)
        if self.is_dynamic is None:
            self.is_dynamic = np.zeros(n, dtype=bool)

    def __len__(self):
        return len(self.means2d)

    def take(self, idx):
        return RenderReadyGaussians(self.means2d[idx], self.cov2d[idx], self.depth[idx],
                                    self.rgb[idx], self.opacity[idx], self.source[idx],
                                    self.is_dynamic[idx])

    @staticmethod
    def concat(parts):
        parts = list(parts)
        return RenderReadyGaussians(*[np.concatenate([getattr(p, f) for p in parts])
                                      for f in ("means2d", "cov2d", "depth", "rgb", "opacity",
                                                "source", "is_dynamic")])


@dataclass
class RenderState:
    """Everything the backward pass needs from one forward call."""

    width: int
    height: int
    n: int
    tile_start: np.ndarray
    entry_gauss: np.ndarray
    means2d: np.ndarray
    conic: np.ndarray
    rgb: np.ndarray
    opacity: np.ndarray
    depth: np.ndarray
    bbox: np.ndarray
    background: np.ndarray
    final_T: np.ndarray
    last: np.ndarray
    depth_num: np.ndarray
    accum: np.ndarray
    options: RasterOptions


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    accum_alpha: np.ndarray
    rendered: np.ndarray
    max_weight: np.ndarray
    coverage: np.ndarray
    state: RenderState = field(default=None, repr=False)


@dataclass
class SplatGradients:
    means2d: np.ndarray
    cov2d: np.ndarray
    rgb: np.ndarray
    opacity: np.ndarray
    depth: np.ndarray


# ---------------------------------------------------------------------------
# reference compositing


def composite_pixel(rgb, alpha, background, early_stop=1e-4):
    """Front-to-back compositing of an already depth-sorted splat stack.

    Weights are ``alpha_i * prod_{j<i} (1 - alpha_j)``; the background gets the
    remaining transmittance.  Splats after the point where transmittance falls
    below ``early_stop`` are ignored (pass 0 to disable).
    """
    rgb = np.asarray(rgb, dtype=float).reshape(-1, 3)
    alpha = np.asarray(alpha, dtype=float).reshape(-1)
    background = np.asarray(background, dtype=float)
    if len(alpha) == 0:
        return background.copy()
    T_after = np.cumprod(1.0 - alpha)
    if early_stop > 0:
        stop = np.flatnonzero(T_after < early_stop)
        if len(stop):
            k = stop[0] + 1
            rgb, alpha, T_after = rgb[:k], alpha[:k], T_after[:k]
    T_before = np.concatenate([[1.0], T_after[:-1]])
    return (alpha * T_before) @ rgb + T_after[-1] * background


# ---------------------------------------------------------------------------
# kernels


def _forward_kernel(width, height, tile, ntx, tile_start, entry_gauss, means2d, conic, rgb,
                    opacity, depth, bbox, background, early_stop, max_w, eps_w, depth_eps, far,
                    out_color, out_depth, out_accum, out_T, out_last, out_dnum,
                    entry_maxw, entry_cover):
    n_tiles = len(tile_start) - 1
    for t in numba.prange(n_tiles):
        tx = t % ntx
        ty = t // ntx
        s = tile_start[t]
        e_end = tile_start[t + 1]
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                T = 1.0
                cr = 0.0
                cg = 0.0
                cb = 0.0
                dn = 0.0
                acc = 0.0
                last = s
                for e in range(s, e_end):
                    g = entry_gauss[e]
                    if px < bbox[g, 0] or px > bbox[g, 1] or py < bbox[g, 2] or py > bbox[g, 3]:
                        continue
                    dx = px - means2d[g, 0]
                    dy = py - means2d[g, 1]
                    power = -0.5 * (conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy
                                    + conic[g, 2] * dy * dy)
                    if power > 0.0:
                        continue
                    w = opacity[g] * np.exp(power)
                    if w > max_w:
                        w = max_w
                    cw = w * T
                    cr += rgb[g, 0] * cw
                    cg += rgb[g, 1] * cw
                    cb += rgb[g, 2] * cw
                    dn += depth[g] * cw
                    acc += cw
                    if cw > entry_maxw[e]:
                        entry_maxw[e] = cw
                    if cw >= eps_w:
                        entry_cover[e] += 1
                    T = T * (1.0 - w)
                    last = e + 1
                    if T < early_stop:
                        break
                out_color[py, px, 0] = cr + T * background[0]
                out_color[py, px, 1] = cg + T * background[1]
                out_color[py, px, 2] = cb + T * background[2]
                out_accum[py, px] = acc
                out_dnum[py, px] = dn
                out_depth[py, px] = dn / acc if acc > depth_eps else far
                out_T[py, px] = T
                out_last[py, px] = last


def _backward_kernel(width, height, tile, ntx, tile_start, entry_gauss, means2d, conic, rgb,
                     opacity, depth, bbox, background, max_w, depth_eps,
                     final_T, last_idx, depth_num, accum, g_color, g_depth, entry_grad):
    n_tiles = len(tile_start) - 1
    for t in numba.prange(n_tiles):
        tx = t % ntx
        ty = t // ntx
        s = tile_start[t]
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                gr = g_color[py, px, 0]
                gg = g_color[py, px, 1]
                gb = g_color[py, px, 2]
                A = accum[py, px]
                g_dn = 0.0
                g_acc = 0.0
                if A > depth_eps:
                    gd = g_depth[py, px]
                    g_dn = gd / A
                    g_acc = -gd * depth_num[py, px] / (A * A)
                T = final_T[py, px]
                # suffix sums of features behind the current splat (bg, 0, 0)
                Rr = T * background[0]
                Rg = T * background[1]
                Rb = T * background[2]
                Rd = 0.0
                Ra = 0.0
                for e in range(last_idx[py, px] - 1, s - 1, -1):
                    g = entry_gauss[e]
                    if px < bbox[g, 0] or px > bbox[g, 1] or py < bbox[g, 2] or py > bbox[g, 3]:
                        continue
                    dx = px - means2d[g, 0]
                    dy = py - means2d[g, 1]
                    power = -0.5 * (conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy
                                    + conic[g, 2] * dy * dy)
                    if power > 0.0:
                        continue
                    G = np.exp(power)
                    w_raw = opacity[g] * G
                    clamped = w_raw > max_w
                    w = max_w if clamped else w_raw
                    Ti = T / (1.0 - w)
                    cw = w * Ti
                    entry_grad[e, 5] += gr * cw
                    entry_grad[e, 6] += gg * cw
                    entry_grad[e, 7] += gb * cw
                    entry_grad[e, 9] += g_dn * cw
                    inv = 1.0 / (1.0 - w)
                    g_w = (gr * (Ti * rgb[g, 0] - Rr * inv) + gg * (Ti * rgb[g, 1] - Rg * inv)
                           + gb * (Ti * rgb[g, 2] - Rb * inv) + g_dn * (Ti * depth[g] - Rd * inv)
                           + g_acc * (Ti - Ra * inv))
                    Rr += rgb[g, 0] * cw
                    Rg += rgb[g, 1] * cw
                    Rb += rgb[g, 2] * cw
                    Rd += depth[g] * cw
                    Ra += cw
                    T = Ti
                    if clamped:
                        continue
                    entry_grad[e, 8] += g_w * G
                    g_q = -0.5 * g_w * w
                    entry_grad[e, 2] += g_q * dx * dx
                    entry_grad[e, 3] += g_q * dx * dy
                    entry_grad[e, 4] += g_q * dy * dy
                    entry_grad[e, 0] += -2.0 * g_q * (conic[g, 0] * dx + conic[g, 1] * dy)
                    entry_grad[e, 1] += -2.0 * g_q * (conic[g, 1] * dx + conic[g, 2] * dy)


_fwd_serial = numba.njit(cache=True, nogil=True)(_forward_kernel)
_bwd_serial = numba.njit(cache=True, nogil=True)(_backward_kernel)
_fwd_parallel = numba.njit(cache=True, parallel=True)(_forward_kernel)
_bwd_parallel = numba.njit(cache=True, parallel=True)(_backward_kernel)


# ---------------------------------------------------------------------------
# python-side orchestration


def _conics(cov2d):
    a = cov2d[:, 0, 0]
    b = 0.5 * (cov2d[:, 0, 1] + cov2d[:, 1, 0])
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    ok = (det > 0) & (a > 0) & np.isfinite(det)
    safe = np.where(ok, det, 1.0)
    conic = np.stack([c / safe, -b / safe, a / safe], axis=1)
    return conic, ok


def _bboxes(means2d, cov2d, width, height, ok):
    with np.errstate(invalid="ignore"):
        rx = EXTENT_SIGMA * np.sqrt(np.where(ok, cov2d[:, 0, 0], 0.0))
        ry = EXTENT_SIGMA * np.sqrt(np.where(ok, cov2d[:, 1, 1], 0.0))
    u, v = means2d[:, 0], means2d[:, 1]
    fin = ok & np.isfinite(u) & np.isfinite(v)
    u = np.where(fin, u, -1e9)
    v = np.where(fin, v, -1e9)
    x0 = np.clip(np.ceil(u - rx), 0, width).astype(np.int64)
    x1 = np.clip(np.floor(u + rx), -1, width - 1).astype(np.int64)
    y0 = np.clip(np.ceil(v - ry), 0, height).astype(np.int64)
    y1 = np.clip(np.floor(v + ry), -1, height - 1).astype(np.int64)
    empty = (x0 > x1) | (y0 > y1) | ~fin
    x0[empty], x1[empty], y0[empty], y1[empty] = 1, 0, 1, 0
    return np.stack([x0, x1, y0, y1], axis=1), ~empty


def _bin_tiles(bbox, alive, depth, source, width, height, tile):
    ntx = -(-width // tile)
    nty = -(-height // tile)
    tx0 = bbox[:, 0] // tile
    tx1 = bbox[:, 1] // tile
    ty0 = bbox[:, 2] // tile
    ty1 = bbox[:, 3] // tile
    nx = np.where(alive, tx1 - tx0 + 1, 0)
    ny = np.where(alive, ty1 - ty0 + 1, 0)
    counts = nx * ny
    gid = np.repeat(np.arange(len(bbox)), counts)
    offsets = np.cumsum(counts) - counts
    k = np.arange(len(gid)) - np.repeat(offsets, counts)
    nxg = nx[gid]
    tid = (ty0[gid] + k // np.maximum(nxg, 1)) * ntx + tx0[gid] + k % np.maximum(nxg, 1)
    order = np.lexsort((source[gid], depth[gid], tid))
    entry_gauss = gid[order].astype(np.int64)
    tile_start = np.searchsorted(tid[order], np.arange(ntx * nty + 1)).astype(np.int64)
    return ntx, tile_start, entry_gauss


def render(gaussians: RenderReadyGaussians, cam, background, options: RasterOptions = None,
           width=None, height=None) -> RenderOutput:
    """Composite projected splats into color, depth and accumulated alpha."""
    opts = options or RasterOptions()
    W = int(width if width is not None else cam.width)
    H = int(height if height is not None else cam.height)
    if W <= 0 or H <= 0:
        raise InvalidConfigError(f"invalid image size {W}x{H}")
    if opts.tile_size <= 0:
        raise InvalidConfigError("tile size must be positive")
    far = float(cam.far)
    g = gaussians
    n = len(g)
    dtype = np.result_type(g.means2d.dtype, np.float32) if n else np.float64
    means2d = np.ascontiguousarray(g.means2d, dtype=dtype).reshape(n, 2)
    cov2d = np.ascontiguousarray(g.cov2d, dtype=dtype).reshape(n, 2, 2)
    rgb = np.ascontiguousarray(g.rgb, dtype=dtype).reshape(n, 3)
    opacity = np.ascontiguousarray(g.opacity, dtype=dtype).reshape(n)
    depth = np.ascontiguousarray(g.depth, dtype=dtype).reshape(n)
    source = np.asarray(g.source).reshape(n)
    bg = np.ascontiguousarray(np.broadcast_to(np.asarray(background, dtype=dtype), (3,)))

    conic, ok = _conics(cov2d)
    bbox, alive = _bboxes(means2d, cov2d, W, H, ok)
    ntx, tile_start, entry_gauss = _bin_tiles(bbox, alive, depth, source, W, H, opts.tile_size)
    M = len(entry_gauss)

    color = np.empty((H, W, 3), dtype=dtype)
    dmap = np.empty((H, W), dtype=dtype)
    accum = np.empty((H, W), dtype=dtype)
    final_T = np.empty((H, W), dtype=dtype)
    last = np.empty((H, W), dtype=np.int64)
    dnum = np.empty((H, W), dtype=dtype)
    entry_maxw = np.zeros(M, dtype=dtype)
    entry_cover = np.zeros(M, dtype=np.int64)

    kernel = _fwd_serial if opts.deterministic else _fwd_parallel
    kernel(W, H, opts.tile_size, ntx, tile_start, entry_gauss, means2d, conic, rgb, opacity,
           depth, bbox, bg, opts.early_stop, opts.max_weight, opts.weight_eps,
           opts.depth_alpha_eps, far, color, dmap, accum, final_T, last, dnum,
           entry_maxw, entry_cover)

    max_weight = np.zeros(n, dtype=dtype)
    np.maximum.at(max_weight, entry_gauss, entry_maxw)
    coverage = np.bincount(entry_gauss, weights=entry_cover, minlength=n).astype(np.int64)
    state = RenderState(W, H, n, tile_start, entry_gauss, means2d, conic, rgb, opacity, depth,
                        bbox, bg, final_T, last, dnum, accum, opts)
    return RenderOutput(color, dmap, accum, coverage > 0, max_weight, coverage, state)


def render_backward(state: RenderState, d_color, d_depth=None) -> SplatGradients:
    """Exact gradients of the forward render w.r.t. every splat field.

    ``cov2d`` gradients use the full-matrix convention: the two off-diagonal
    entries each receive the derivative w.r.t. that single entry.
    """
    if state is None or not isinstance(state, RenderState):
        raise ContractViolationError("render_backward needs the state of a forward render")
    H, W, n = state.height, state.width, state.n
    dtype = state.means2d.dtype
    d_color = np.ascontiguousarray(d_color, dtype=dtype)
    if d_color.shape != (H, W, 3):
        raise ContractViolationError(f"color adjoint shape {d_color.shape} != {(H, W, 3)}")
    if d_depth is None:
        d_depth = np.zeros((H, W), dtype=dtype)
    d_depth = np.ascontiguousarray(d_depth, dtype=dtype)
    if d_depth.shape != (H, W):
        raise ContractViolationError(f"depth adjoint shape {d_depth.shape} != {(H, W)}")
    opts = state.options
    M = len(state.entry_gauss)
    entry_grad = np.zeros((M, _N_GRAD), dtype=dtype)
    ntx = -(-W // opts.tile_size)
    kernel = _bwd_serial if opts.deterministic else _bwd_parallel
    kernel(W, H, opts.tile_size, ntx, state.tile_start, state.entry_gauss, state.means2d,
           state.conic, state.rgb, state.opacity, state.depth, state.bbox, state.background,
           opts.max_weight, opts.depth_alpha_eps, state.final_T, state.last, state.depth_num,
           state.accum, d_color, d_depth, entry_grad)

    eg = state.entry_gauss
    per = np.zeros((n, _N_GRAD), dtype=dtype)
    if M:
        for c in range(_N_GRAD):
            per[:, c] = np.bincount(eg, weights=entry_grad[:, c], minlength=n)

    k = state.conic
    K = np.empty((n, 2, 2), dtype=dtype)
    K[:, 0, 0], K[:, 0, 1], K[:, 1, 0], K[:, 1, 1] = k[:, 0], k[:, 1], k[:, 1], k[:, 2]
    GK = np.empty((n, 2, 2), dtype=dtype)
    GK[:, 0, 0], GK[:, 0, 1], GK[:, 1, 0], GK[:, 1, 1] = (per[:, _G_K00], per[:, _G_K01],
                                                          per[:, _G_K01], per[:, _G_K11])
    g_cov = -K @ GK @ K
    return SplatGradients(
        means2d=per[:, [_G_MX, _G_MY]],
        cov2d=g_cov,
        rgb=per[:, [_G_R, _G_GR, _G_B]],
        opacity=per[:, _G_A],
        depth=per[:, _G_D],
    )
