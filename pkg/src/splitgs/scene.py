"""Static/dynamic scene decomposition.

Static Gaussians keep their geometry for all time; their SH and opacity are
the frozen base appearance ``w0`` plus a residual predicted by an appearance
MLP from the encoded (center, time).  Dynamic Gaussians live in a canonical
configuration and are moved at time t by offsets from a deformation MLP.
``resolve`` turns the scene at time t into projected splats for a camera and
records a tape so ``resolve_backward`` can map splat gradients back onto the
scene parameters.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .camera import Camera, DEFAULT_DILATION, project_batch, project_batch_vjp, splat_extent_visible
from .encoding import EncodingConfig, encode_input, encode_input_vjp
from .errors import InvalidParameterError
from .gaussian import (
    GaussianSet,
    covariance_from,
    covariance_vjp,
    normalize_quat,
    normalize_quat_vjp,
    quat_to_rotmat_vjp,
    sh_basis,
    sh_basis_jacobian,
    sh_coeff_count,
    sigmoid,
)
from .rasterizer import RasterOptions, RenderOutput, RenderReadyGaussians, render
from .tinynet import Mlp, mlp_backward, mlp_forward

log = logging.getLogger(__name__)

STATIC_ONLY = "static_only"
DYNAMIC_ONLY = "dynamic_only"
BOTH = "both"
_WHICH_ALIASES = {"static": STATIC_ONLY, "dynamic": DYNAMIC_ONLY, STATIC_ONLY: STATIC_ONLY,
                  DYNAMIC_ONLY: DYNAMIC_ONLY, BOTH: BOTH}
DEFORM_OUT = 10  # d_mu (3), d_rot (4), d_log_scale (3)
_QUAT_EPS = 1e-8


def normalize_which(which):
    try:
        return _WHICH_ALIASES[which]
    except KeyError:
        raise InvalidParameterError(f"unknown render selection {which!r}") from None


def appearance_out_dim(sh_degree):
    return 3 * sh_coeff_count(sh_degree) + 1


@dataclass
class StaticSet:
    """Static Gaussians.

    The set's own ``sh`` / ``opacity_logits`` arrays are the base appearance
    w0.  They are optimized directly during pretraining and stage I and
    frozen afterwards, when only ``app_mlp`` adds a time-dependent residual.
    """

    gaussians: GaussianSet
    app_mlp: Mlp

    def __len__(self):
        return len(self.gaussians)

    @property
    def base_appearance(self):
        return self.gaussians.sh, self.gaussians.opacity_logits


@dataclass
class DynamicSet:
    gaussians: GaussianSet
    deform_mlp: Mlp
    app_mlp: Mlp = None

    def __len__(self):
        return len(self.gaussians)


@dataclass
class Scene:
    static: StaticSet
    dynamic: DynamicSet
    enc: EncodingConfig = field(default_factory=EncodingConfig)
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=float).reshape(3)

    @property
    def sh_degree(self):
        return self.static.gaussians.sh_degree

    @property
    def dtype(self):
        return self.static.gaussians.means.dtype

    def parameters(self):
        """Flat name -> array view of every trainable array."""
        out = {}
        for prefix, gs in (("static", self.static.gaussians), ("dynamic", self.dynamic.gaussians)):
            for k, v in gs.arrays().items():
                out[f"{prefix}.{k}"] = v
        for prefix, net in self.networks().items():
            for k, v in net.parameters().items():
                out[f"{prefix}.{k}"] = v
        return out

    def networks(self):
        nets = {"static.app": self.static.app_mlp, "dynamic.deform": self.dynamic.deform_mlp}
        if self.dynamic.app_mlp is not None:
            nets["dynamic.app"] = self.dynamic.app_mlp
        return nets

    def touch(self):
        for net in self.networks().values():
            net.touch()

    def copy(self):
        return Scene(
            StaticSet(self.static.gaussians.copy(), self.static.app_mlp.copy()),
            DynamicSet(self.dynamic.gaussians.copy(), self.dynamic.deform_mlp.copy(),
                       None if self.dynamic.app_mlp is None else self.dynamic.app_mlp.copy()),
            self.enc, self.background.copy())


def build_scene(static: GaussianSet, dynamic: GaussianSet, enc: EncodingConfig = None,
                background=(0.0, 0.0, 0.0), hidden_width=64, hidden_depth=4,
                dynamic_appearance=True, seed=0) -> Scene:
    """Wrap two Gaussian sets with freshly initialized networks."""
    enc = enc or EncodingConfig()
    rng = np.random.default_rng(seed)
    hidden = [hidden_width] * hidden_depth
    dtype = static.means.dtype
    app_out = appearance_out_dim(static.sh_degree)
    app = Mlp([enc.dim, *hidden, app_out], rng, dtype=dtype)
    deform = Mlp([enc.dim, *hidden, DEFORM_OUT], rng, dtype=dtype)
    dyn_app = Mlp([enc.dim, *hidden, app_out], rng, dtype=dtype) if dynamic_appearance else None
    return Scene(StaticSet(static, app), DynamicSet(dynamic, deform, dyn_app), enc,
                 np.asarray(background, dtype=float))


# ---------------------------------------------------------------------------
# per-set time evaluation


def _split_appearance(out, k):
    n = len(out)
    return out[:, : 3 * k].reshape(n, k, 3), out[:, 3 * k]


def static_appearance_at(s: StaticSet, t, enc: EncodingConfig, use_app=True):
    """Effective (sh, opacity_logit) of every static Gaussian at time t."""
    sh0, o0 = s.base_appearance
    if not use_app or len(s) == 0:
        return sh0.copy(), o0.copy()
    x = encode_input(s.gaussians.means, t, enc)
    d_sh, d_o = _split_appearance(s.app_mlp(x), sh_coeff_count(s.gaussians.sh_degree))
    return sh0 + d_sh, o0 + d_o


@dataclass
class Deformed:
    means: np.ndarray
    quats: np.ndarray
    scales: np.ndarray
    covs: np.ndarray


def _deform_forward(d: DynamicSet, t, enc):
    gs = d.gaussians
    x = encode_input(gs.means, t, enc)
    out, cache = mlp_forward(d.deform_mlp, x)
    d_mu, d_rot, d_ls = out[:, :3], out[:, 3:7], out[:, 7:10]
    q0, n0 = normalize_quat(gs.quats)
    r = q0 + d_rot
    q, nr = normalize_quat(r)
    degenerate = nr[:, 0] < _QUAT_EPS
    if np.any(degenerate):
        log.warning("deform_at: %d degenerate rotations, falling back to canonical",
                    int(degenerate.sum()))
        q[degenerate] = q0[degenerate]
        nr[degenerate] = 1.0
    means = gs.means + d_mu
    scales = np.exp(gs.log_scales + d_ls)
    covs, R = covariance_from(q, scales)
    tape = {"x": x, "cache": cache, "q0": q0, "n0": n0, "q": q, "nr": nr,
            "degenerate": degenerate, "R": R}
    return Deformed(means, q, scales, covs), tape


def deform_at(d: DynamicSet, t, enc: EncodingConfig) -> Deformed:
    """Geometry of every dynamic Gaussian at time t."""
    if len(d) == 0:
        z = d.gaussians.means[:0]
        return Deformed(z, d.gaussians.quats[:0], z, np.zeros((0, 3, 3)))
    return _deform_forward(d, t, enc)[0]


# ---------------------------------------------------------------------------
# resolution into projected splats


@dataclass
class ResolveOptions:
    dilation: float = DEFAULT_DILATION
    static_app: bool = True
    dynamic_app: bool = True
    detach_deform_input: bool = False


@dataclass
class _SetTape:
    n: int
    visible: np.ndarray
    means: np.ndarray
    q_unit: np.ndarray
    scales: np.ndarray
    R: np.ndarray
    covs: np.ndarray
    proj: dict
    dirs_unit: np.ndarray
    dirs_norm: np.ndarray
    basis: np.ndarray
    sh_eff: np.ndarray
    rgb_raw: np.ndarray
    alpha: np.ndarray
    extra: dict


@dataclass
class ResolveTape:
    t: float
    cam: Camera
    which: str
    options: ResolveOptions
    static: _SetTape = None
    dynamic: _SetTape = None
    n_static: int = 0


def _prepare(means, q_unit, scales, R, covs, sh_eff, opac_eff, cam, degree, dilation, extra):
    proj = project_batch(cam, means, covs, dilation)
    visible = splat_extent_visible(cam, proj["screen"], proj["cov2d"], proj["in_front"])
    dirs = means - cam.center
    dn = np.linalg.norm(dirs, axis=1, keepdims=True)
    dn = np.where(dn > 0, dn, 1.0)
    du = dirs / dn
    basis = sh_basis(du, degree)
    rgb_raw = np.einsum("nk,nkc->nc", basis, sh_eff)
    alpha = sigmoid(opac_eff)
    return _SetTape(len(means), visible, means, q_unit, scales, R, covs, proj, du, dn, basis,
                    sh_eff, rgb_raw, alpha, extra)


def _ready(st: _SetTape, offset, dynamic):
    v = np.flatnonzero(st.visible)
    p = st.proj
    return RenderReadyGaussians(
        p["screen"][v], p["cov2d"][v], p["depth"][v], np.maximum(st.rgb_raw[v], 0.0),
        st.alpha[v], v + offset, np.full(len(v), dynamic))


def _static_forward(s: StaticSet, t, cam, enc, opts):
    gs = s.gaussians
    q, qn = normalize_quat(gs.quats)
    scales = np.exp(gs.log_scales)
    covs, R = covariance_from(q, scales)
    extra = {"qn": qn, "app": None}
    sh_eff, o_eff = gs.sh, gs.opacity_logits
    if opts.static_app and len(gs):
        x = encode_input(gs.means, t, enc)
        out, cache = mlp_forward(s.app_mlp, x)
        d_sh, d_o = _split_appearance(out, sh_coeff_count(gs.sh_degree))
        sh_eff, o_eff = gs.sh + d_sh, gs.opacity_logits + d_o
        extra["app"] = cache
    return _prepare(gs.means, q, scales, R, covs, sh_eff, o_eff, cam, gs.sh_degree,
                    opts.dilation, extra)


def _dynamic_forward(d: DynamicSet, t, cam, enc, opts):
    gs = d.gaussians
    deformed, dtape = _deform_forward(d, t, enc)
    sh_eff, o_eff = gs.sh, gs.opacity_logits
    dtape["app"] = None
    if opts.dynamic_app and d.app_mlp is not None:
        out, cache = mlp_forward(d.app_mlp, dtape["x"])
        d_sh, d_o = _split_appearance(out, sh_coeff_count(gs.sh_degree))
        sh_eff, o_eff = gs.sh + d_sh, gs.opacity_logits + d_o
        dtape["app"] = cache
    return _prepare(deformed.means, deformed.quats, deformed.scales, dtape["R"], deformed.covs,
                    sh_eff, o_eff, cam, gs.sh_degree, opts.dilation, dtape)


def resolve(scene: Scene, t, cam: Camera, which=BOTH, options: ResolveOptions = None):
    """Projected splats of the scene at time t, plus the tape for the VJP."""
    which = normalize_which(which)
    opts = options or ResolveOptions()
    tape = ResolveTape(float(t), cam, which, opts, n_static=len(scene.static))
    parts = []
    if which in (STATIC_ONLY, BOTH) and len(scene.static):
        tape.static = _static_forward(scene.static, t, cam, scene.enc, opts)
        parts.append(_ready(tape.static, 0, False))
    if which in (DYNAMIC_ONLY, BOTH) and len(scene.dynamic):
        tape.dynamic = _dynamic_forward(scene.dynamic, t, cam, scene.enc, opts)
        parts.append(_ready(tape.dynamic, len(scene.static), True))
    if not parts:
        dt = scene.dtype
        ready = RenderReadyGaussians(np.zeros((0, 2), dt), np.zeros((0, 2, 2), dt),
                                     np.zeros(0, dt), np.zeros((0, 3), dt), np.zeros(0, dt),
                                     np.zeros(0, np.int64), np.zeros(0, bool))
    else:
        ready = RenderReadyGaussians.concat(parts)
    return ready, tape


def scene_at(scene: Scene, t, cam: Camera, which=BOTH, options: ResolveOptions = None):
    """Render-ready splats (frustum-culled) for time t seen from ``cam``."""
    return resolve(scene, t, cam, which, options)[0]


# ---------------------------------------------------------------------------
# backward


def _set_backward(st: _SetTape, cam, g_screen, g_cov2d, g_depth, g_rgb, g_alpha):
    """Gradients w.r.t. (means, unit quats, linear scales, effective sh, effective logit)."""
    g_rgb = g_rgb * (st.rgb_raw > 0)
    g_sh = st.basis[:, :, None] * g_rgb[:, None, :]
    g_basis = np.einsum("nkc,nc->nk", st.sh_eff, g_rgb)
    jac = sh_basis_jacobian(st.dirs_unit, _degree_of(st.sh_eff))
    g_du = np.einsum("nkd,nk->nd", jac, g_basis)
    g_means = (g_du - st.dirs_unit * np.sum(st.dirs_unit * g_du, axis=1, keepdims=True)) / st.dirs_norm
    g_logit = g_alpha * st.alpha * (1.0 - st.alpha)
    gm, g_cov3 = project_batch_vjp(cam, st.proj, st.covs, g_screen, g_cov2d, g_depth)
    g_means = g_means + gm
    g_R, g_scale = covariance_vjp(st.R, st.scales, g_cov3)
    g_q = quat_to_rotmat_vjp(st.q_unit, g_R)
    return g_means, g_q, g_scale, g_sh, g_logit


def _degree_of(sh):
    return int(round(np.sqrt(sh.shape[1]))) - 1


def _scatter(st: _SetTape, sl, grads):
    n = st.n
    v = np.flatnonzero(st.visible)
    dt = st.means.dtype

    def full(shape, part):
        arr = np.zeros((n,) + shape, dtype=dt)
        arr[v] = part
        return arr

    return (full((2,), grads.means2d[sl]), full((2, 2), grads.cov2d[sl]), full((), grads.depth[sl]),
            full((3,), grads.rgb[sl]), full((), grads.opacity[sl]))


def _app_backward(net, cache, g_sh, g_logit, name, out):
    n = len(g_sh)
    g_out = np.concatenate([g_sh.reshape(n, -1), g_logit[:, None]], axis=1)
    g_x, g_params = mlp_backward(net, cache, g_out)
    for k, v in g_params.items():
        out[f"{name}.{k}"] = v
    return g_x


def resolve_backward(scene: Scene, tape: ResolveTape, grads) -> dict:
    """Map splat gradients (``rasterizer.SplatGradients``) onto scene parameters.

    Every parameter array of the scene receives an entry (zeros where the
    selection did not involve it).
    """
    out = {k: np.zeros_like(v) for k, v in scene.parameters().items()}
    cam, enc = tape.cam, scene.enc
    offset = 0
    if tape.static is not None:
        st = tape.static
        nv = int(st.visible.sum())
        g_screen, g_cov2d, g_depth, g_rgb, g_alpha = _scatter(st, slice(0, nv), grads)
        offset = nv
        g_means, g_q, g_scale, g_sh, g_logit = _set_backward(st, cam, g_screen, g_cov2d, g_depth,
                                                             g_rgb, g_alpha)
        gs = scene.static.gaussians
        out["static.quats"] = normalize_quat_vjp(st.q_unit, st.extra["qn"], g_q)
        out["static.log_scales"] = g_scale * st.scales
        out["static.sh"] = g_sh
        out["static.opacity_logits"] = g_logit
        if st.extra["app"] is not None:
            g_x = _app_backward(scene.static.app_mlp, st.extra["app"], g_sh, g_logit,
                                "static.app", out)
            g_means = g_means + encode_input_vjp(gs.means, enc, g_x)
        out["static.means"] = g_means
    if tape.dynamic is not None:
        st = tape.dynamic
        nv = int(st.visible.sum())
        g_screen, g_cov2d, g_depth, g_rgb, g_alpha = _scatter(st, slice(offset, offset + nv), grads)
        g_mu_t, g_q, g_scale, g_sh, g_logit = _set_backward(st, cam, g_screen, g_cov2d, g_depth,
                                                            g_rgb, g_alpha)
        ex = st.extra
        gs = scene.dynamic.gaussians
        g_r = normalize_quat_vjp(ex["q"], ex["nr"], g_q)
        g_r[ex["degenerate"]] = 0.0
        g_ls = g_scale * st.scales
        out["dynamic.quats"] = normalize_quat_vjp(ex["q0"], ex["n0"], g_r)
        out["dynamic.log_scales"] = g_ls
        out["dynamic.sh"] = g_sh
        out["dynamic.opacity_logits"] = g_logit
        g_deform = np.concatenate([g_mu_t, g_r, g_ls], axis=1)
        g_x, g_params = mlp_backward(scene.dynamic.deform_mlp, ex["cache"], g_deform)
        for k, v in g_params.items():
            out[f"dynamic.deform.{k}"] = v
        if ex["app"] is not None:
            g_x = g_x + _app_backward(scene.dynamic.app_mlp, ex["app"], g_sh, g_logit,
                                      "dynamic.app", out)
        g_mu0 = g_mu_t
        if not tape.options.detach_deform_input:
            g_mu0 = g_mu0 + encode_input_vjp(gs.means, enc, g_x)
        out["dynamic.means"] = g_mu0
    return out


# ---------------------------------------------------------------------------
# convenience


def render_scene(scene: Scene, t, cam: Camera, which=BOTH, resolve_options=None,
                 raster_options: RasterOptions = None, background=None):
    """Resolve and render.  Dynamic-only renders use a black background."""
    which = normalize_which(which)
    ready, tape = resolve(scene, t, cam, which, resolve_options)
    if background is None:
        background = np.zeros(3) if which == DYNAMIC_ONLY else scene.background
    out = render(ready, cam, background, raster_options)
    return out, tape


def static_visibility(tape: ResolveTape, out: RenderOutput):
    """Per static Gaussian: (rendered flag, effective opacity at the tape's time)."""
    st = tape.static
    n = tape.n_static
    rendered = np.zeros(n, dtype=bool)
    alpha = np.zeros(n)
    if st is None:
        return rendered, alpha
    v = np.flatnonzero(st.visible)
    rendered[v] = out.rendered[: len(v)]
    alpha[:] = st.alpha
    return rendered, alpha


def splat_screen_grads(tape: ResolveTape, grads):
    """Per-primitive screen-space positional gradient (static, dynamic) with visibility masks."""
    res = []
    offset = 0
    for st in (tape.static, tape.dynamic):
        if st is None:
            res.append(None)
            continue
        v = np.flatnonzero(st.visible)
        g = np.zeros((st.n, 2))
        g[v] = grads.means2d[offset: offset + len(v)]
        offset += len(v)
        res.append((g, st.visible.copy()))
    return res
