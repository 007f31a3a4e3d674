"""Training orchestration: depth-aware pretraining, stage I, stage II, evaluation.

A :class:`Trainer` owns the scene, one Adam state over every trainable
array, the sampling RNG and the pruning/densification statistics, so the
whole run can be checkpointed and resumed bit-exactly.
"""
from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .dataio import (
    Checkpoint,
    Dataset,
    classify_points,
    gaussians_from_points,
    load_checkpoint,
    random_points,
    save_checkpoint,
)
from .encoding import EncodingConfig
from .errors import InvalidConfigError, PruneError, TrainingDivergenceError
from .gaussian import PARAM_FIELDS, GaussianSet
from .lifecycle import (
    DensifyConfig,
    PruneConfig,
    VisibilityStats,
    accumulate_visibility,
    densify,
    prune_static,
)
from .objectives import (
    LossWeights,
    align_depth,
    depth_loss_and_grad,
    dynamic_loss_and_grad,
    photometric_loss_and_grad,
    psnr,
    ssim,
    static_loss_and_grad,
)
from .rasterizer import RasterOptions, render_backward
from .scene import (
    BOTH,
    DYNAMIC_ONLY,
    STATIC_ONLY,
    DynamicSet,
    ResolveOptions,
    Scene,
    StaticSet,
    build_scene,
    normalize_which,
    render_scene,
    resolve_backward,
    splat_screen_grads,
    static_visibility,
)
from .tinynet import AdamState, LrSchedule, Mlp, adam_step, lr_at

log = logging.getLogger(__name__)

PHASES = ("dap", "stage1", "stage2")

# learning-rate multipliers on the shared schedule, per Gaussian field
DEFAULT_LR_SCALES = {
    "means": 1.0,
    "quats": 1.25,
    "log_scales": 6.0,
    "opacity_logits": 60.0,
    "sh": 3.0,
}

_GAUSS_KEYS = {f"{p}.{f}" for p in ("static", "dynamic") for f in PARAM_FIELDS}


@dataclass
class TrainConfig:
    dap_iters: int = 500
    stage1_iters: int = 2000
    stage2_iters: int = 3000
    lr_initial: float = 8e-4
    lr_final: float = 1.6e-6
    lr_scales: dict = field(default_factory=lambda: dict(DEFAULT_LR_SCALES))
    loss: LossWeights = field(default_factory=LossWeights)
    prune: PruneConfig = field(default_factory=PruneConfig)
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    encoding: EncodingConfig = field(default_factory=EncodingConfig)
    use_dap: bool = True
    use_vdp: bool = True
    use_app: bool = True
    prune_interval: int = 1000
    prune_warmup: int = 500
    densify_interval: int = 500
    densify_from: int = 500
    densify_until: int = 1500
    stage2_densify_until: int = 1500
    sh_degree: int = 1
    hidden_width: int = 64
    hidden_depth: int = 4
    dynamic_appearance: bool = True
    depth_alignment: str = "auto"
    detach_deform_input: bool = False
    dilation: float = 0.3
    init_opacity: float = 0.1
    random_init_points: int = 2000
    seed: int = 0
    precision: str = "double"
    deterministic: bool = True
    snapshot_every: int = 100
    log_every: int = 100

    def __post_init__(self):
        for name in ("dap_iters", "stage1_iters", "stage2_iters"):
            if int(getattr(self, name)) < 0:
                raise InvalidConfigError(f"{name} must be >= 0")
        for name in ("prune_interval", "densify_interval"):
            if int(getattr(self, name)) <= 0:
                raise InvalidConfigError(f"{name} must be positive")
        if self.precision not in ("single", "double"):
            raise InvalidConfigError(f"precision must be 'single' or 'double', got {self.precision!r}")
        if self.depth_alignment not in ("auto", "always", "never"):
            raise InvalidConfigError("depth_alignment must be auto, always or never")
        unknown = set(self.lr_scales) - set(PARAM_FIELDS)
        if unknown:
            raise InvalidConfigError(f"unknown lr_scales entries {sorted(unknown)}")

    @property
    def dtype(self):
        return np.float64 if self.precision == "double" else np.float32

    def iters(self, phase):
        return {"dap": self.dap_iters, "stage1": self.stage1_iters,
                "stage2": self.stage2_iters}[phase]

    def to_dict(self):
        d = asdict(self)
        d["encoding"] = {"spatial_bands": self.encoding.spatial_bands,
                         "temporal_bands": self.encoding.temporal_bands}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfigError(f"unknown config keys: {sorted(unknown)}")
        nested = {"loss": LossWeights, "prune": PruneConfig, "densify": DensifyConfig,
                  "encoding": EncodingConfig}
        for key, kind in nested.items():
            if key in d and isinstance(d[key], dict):
                sub_known = {f.name for f in fields(kind)}
                bad = set(d[key]) - sub_known
                if bad:
                    raise InvalidConfigError(f"unknown keys in [{key}]: {sorted(bad)}")
                try:
                    d[key] = kind(**d[key])
                except (TypeError, ValueError) as exc:
                    raise InvalidConfigError(f"[{key}]: {exc}") from exc
        if "lr_scales" in d:
            d["lr_scales"] = {**DEFAULT_LR_SCALES, **d["lr_scales"]}
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise InvalidConfigError(str(exc)) from exc

    def updated(self, **overrides):
        d = self.to_dict()
        for k, v in overrides.items():
            if isinstance(v, dict) and isinstance(d.get(k), dict):
                d[k] = {**d[k], **v}
            else:
                d[k] = v
        return TrainConfig.from_dict(d)


def load_config(path, overrides=None) -> TrainConfig:
    """Read a TOML or JSON config file; ``overrides`` win over file values."""
    path = Path(path)
    text = path.read_bytes()
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(text)
        else:
            try:
                import tomllib
            except ModuleNotFoundError:  # python < 3.11
                import tomli as tomllib
            data = tomllib.loads(text.decode())
    except Exception as exc:  # noqa: BLE001 - parser errors vary by backend
        raise InvalidConfigError(f"cannot parse config {path}: {exc}") from exc
    cfg = TrainConfig.from_dict(data)
    return cfg.updated(**overrides) if overrides else cfg


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    events: list = field(default_factory=list)
    wall_clock: dict = field(default_factory=dict)
    final_metrics: dict = field(default_factory=dict)

    def losses(self, phase=None):
        return np.array([r["total"] for r in self.records if phase is None or r["phase"] == phase])

    def extend(self, other: "TrainReport"):
        self.records.extend(other.records)
        self.events.extend(other.events)
        for k, v in other.wall_clock.items():
            self.wall_clock[k] = self.wall_clock.get(k, 0.0) + v
        self.final_metrics.update(other.final_metrics)
        return self


# ---------------------------------------------------------------------------
# initialization


def _bounding_box(dataset: Dataset):
    pts = []
    for f in dataset.frames:
        if f.depth is None:
            continue
        cam = f.camera
        v, u = np.mgrid[0:cam.height:4, 0:cam.width:4]
        z = f.depth[v, u]
        ok = np.isfinite(z) & (z > cam.near) & (z < cam.far)
        p = np.stack([(u[ok] - cam.cx) / cam.fx * z[ok], (v[ok] - cam.cy) / cam.fy * z[ok], z[ok]], 1)
        pts.append((p - cam.translation) @ cam.rotation)
    if not pts:
        return -np.ones(3), np.ones(3)
    pts = np.concatenate(pts)
    return pts.min(axis=0), pts.max(axis=0)


def initialize_scene(dataset: Dataset, cfg: TrainConfig = None) -> Scene:
    """Seed static and dynamic Gaussians from the dataset's points (or randomly)."""
    cfg = cfg or TrainConfig()
    rng = np.random.default_rng(cfg.seed)
    pts = dataset.init_points
    if pts is None or len(pts) == 0:
        lo, hi = _bounding_box(dataset)
        log.info("no init points, sampling %d uniformly in the scene box", cfg.random_init_points)
        pts = random_points(cfg.random_init_points, rng)
        pts[:, :3] = lo + (hi - lo) * (pts[:, :3] + 1.0) / 2.0
    dyn = classify_points(pts[:, :3], dataset)
    mk = lambda p: gaussians_from_points(p, cfg.sh_degree, cfg.init_opacity, cfg.dtype)  # noqa: E731
    return build_scene(mk(pts[~dyn]), mk(pts[dyn]), cfg.encoding, dataset.background,
                       cfg.hidden_width, cfg.hidden_depth, cfg.dynamic_appearance, cfg.seed)


def scene_extent(scene: Scene):
    """Robust spatial size of the static geometry used by densification."""
    means = scene.static.gaussians.means
    if len(means) == 0:
        means = scene.dynamic.gaussians.means
    if len(means) == 0:
        return 1.0
    center = np.median(means, axis=0)
    return float(max(np.percentile(np.linalg.norm(means - center, axis=1), 90), 1e-6))


# ---------------------------------------------------------------------------
# objective


@dataclass
class ObjectiveResult:
    total: float
    parts: dict
    grads: dict
    outputs: dict
    tapes: dict
    splat_grads: dict


def _depth_valid(frame, out, cam):
    d = frame.depth
    return ((frame.mask > 0.5) & np.isfinite(d) & (d > cam.near) & (d < cam.far)
            & (out.accum_alpha > 1e-4))


def objective(scene: Scene, frame, terms: dict, weights: LossWeights = None, step=0,
              resolve_options: ResolveOptions = None, raster_options: RasterOptions = None,
              alignment=(1.0, 0.0)) -> ObjectiveResult:
    """Weighted sum of loss terms for one frame and its gradient w.r.t. every
    scene parameter.

    ``terms`` maps any of ``static``, ``dynamic``, ``depth`` and ``joint`` to
    a weight.  ``static`` and ``depth`` share the static-only render,
    ``dynamic`` uses the dynamic-only render and ``joint`` the full one.
    """
    weights = weights or LossWeights()
    params = scene.parameters()
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    parts, outputs, tapes, sgrads = {}, {}, {}, {}
    total = 0.0
    cam, gt, mask = frame.camera, frame.image, frame.mask
    lam = weights.lambda_ssim
    needs = {
        STATIC_ONLY: any(terms.get(k, 0) for k in ("static", "depth")),
        DYNAMIC_ONLY: bool(terms.get("dynamic", 0)),
        BOTH: bool(terms.get("joint", 0)),
    }
    for which, needed in needs.items():
        if not needed:
            continue
        out, tape = render_scene(scene, frame.t, cam, which, resolve_options, raster_options)
        outputs[which], tapes[which] = out, tape
        d_color = np.zeros(out.color.shape)
        d_depth = None
        if which == STATIC_ONLY:
            if terms.get("static", 0):
                v, g = static_loss_and_grad(out.color, gt, mask, lam)
                parts["static"] = v
                total += terms["static"] * v
                d_color += terms["static"] * g
            if terms.get("depth", 0) and frame.depth is not None:
                valid = _depth_valid(frame, out, cam)
                v, g = depth_loss_and_grad(out.depth, np.where(valid, frame.depth, 0.0), valid,
                                           step, weights, alignment)
                parts["depth"] = v
                total += terms["depth"] * v
                d_depth = terms["depth"] * g
        elif which == DYNAMIC_ONLY:
            v, g = dynamic_loss_and_grad(out.color, gt, mask, lam)
            parts["dynamic"] = v
            total += terms["dynamic"] * v
            d_color += terms["dynamic"] * g
        else:
            v, g = photometric_loss_and_grad(out.color, gt, lam)
            parts["joint"] = v
            total += terms["joint"] * v
            d_color += terms["joint"] * g
        sg = render_backward(out.state, d_color, d_depth)
        sgrads[which] = sg
        for k, g in resolve_backward(scene, tape, sg).items():
            grads[k] += g
    return ObjectiveResult(float(total), parts, grads, outputs, tapes, sgrads)


def masked_depth_l1(scene: Scene, dataset: Dataset, resolve_options=None, raster_options=None):
    """Mean |rendered static depth - gt depth| over static pixels of all depth frames."""
    opts = resolve_options or ResolveOptions(static_app=False, dynamic_app=False)
    err, count = 0.0, 0
    for f in dataset.frames:
        if f.depth is None:
            continue
        out, _ = render_scene(scene, f.t, f.camera, STATIC_ONLY, opts, raster_options)
        valid = _depth_valid(f, out, f.camera)
        err += float(np.abs(out.depth - f.depth)[valid].sum())
        count += int(valid.sum())
    return err / count if count else float("nan")


# ---------------------------------------------------------------------------
# scene <-> arrays


def scene_arrays(scene: Scene):
    return {f"scene/{k}": np.array(v, copy=True) for k, v in scene.parameters().items()}


def scene_structure(scene: Scene):
    return {
        "sh_degree": scene.sh_degree,
        "encoding": [scene.enc.spatial_bands, scene.enc.temporal_bands],
        "background": [float(x) for x in scene.background],
        "nets": {name: list(net.widths) for name, net in scene.networks().items()},
        "dtype": np.dtype(scene.dtype).name,
    }


def scene_from_arrays(arrays, structure) -> Scene:
    deg = int(structure["sh_degree"])

    def gset(prefix):
        return GaussianSet(**{f: np.array(arrays[f"scene/{prefix}.{f}"]) for f in PARAM_FIELDS},
                           sh_degree=deg)

    def net(name):
        widths = structure["nets"].get(name)
        if widths is None:
            return None
        m = Mlp(widths, np.random.default_rng(0), dtype=np.dtype(structure["dtype"]))
        n_layers = len(widths) - 1
        m.load_parameters({f"{p}{i}": np.array(arrays[f"scene/{name}.{p}{i}"])
                           for i in range(n_layers) for p in ("W", "b")})
        return m

    enc = EncodingConfig(*structure["encoding"])
    return Scene(StaticSet(gset("static"), net("static.app")),
                 DynamicSet(gset("dynamic"), net("dynamic.deform"), net("dynamic.app")),
                 enc, np.array(structure["background"], dtype=float))


def load_scene(path) -> Scene:
    ck = load_checkpoint(path)
    return scene_from_arrays(ck.arrays, ck.meta["scene"])


# ---------------------------------------------------------------------------
# trainer


def _lr_scale_map(params, scales):
    out = {}
    for k in params:
        prefix, _, name = k.partition(".")
        out[k] = scales.get(name, 1.0) if k in _GAUSS_KEYS else 1.0
    return out


class Trainer:
    """Stateful training loop over the three phases."""

    def __init__(self, scene: Scene, dataset: Dataset, cfg: TrainConfig = None, out_dir=None,
                 log_file=None):
        self.cfg = cfg or TrainConfig()
        self.scene = scene
        self.dataset = dataset
        self.out_dir = Path(out_dir) if out_dir else None
        self.log_file = Path(log_file) if log_file else None
        self.rng = np.random.default_rng(self.cfg.seed)
        self.adam = AdamState()
        self.counters = {p: 0 for p in PHASES}
        self.alignment = None
        self.extent = scene_extent(scene)
        self.vis = VisibilityStats.zeros(len(scene.static))
        self.grad_stats = {s: self._zero_grad_stats(s) for s in ("static", "dynamic")}
        self.report = TrainReport()
        self.raster = RasterOptions(deterministic=self.cfg.deterministic)
        self.last_good = None

    # -- helpers -----------------------------------------------------------

    def _set(self, name):
        return self.scene.static if name == "static" else self.scene.dynamic

    def _zero_grad_stats(self, name):
        n = len(self._set(name))
        return np.zeros(n), np.zeros(n)

    def _resolve_options(self, phase):
        c = self.cfg
        if phase == "stage2":
            return ResolveOptions(c.dilation, c.use_app, c.dynamic_appearance,
                                  c.detach_deform_input)
        return ResolveOptions(c.dilation, False, False, c.detach_deform_input)

    def _terms(self, phase):
        w = self.cfg.loss
        if phase == "dap":
            return {"static": 1.0, "depth": 1.0}
        if phase == "stage1":
            return {"static": 1.0, "dynamic": 1.0}
        return {"joint": w.joint, "static": w.static, "dynamic": w.dynamic}

    def _trainable(self, phase):
        keys = set()
        params = self.scene.parameters()
        gauss = lambda p: {f"{p}.{f}" for f in PARAM_FIELDS}  # noqa: E731
        if phase in ("dap", "stage1"):
            keys |= gauss("static")
        if phase in ("stage1", "stage2"):
            keys |= gauss("dynamic")
            keys |= {k for k in params if k.startswith("dynamic.deform.")}
        if phase == "stage2":
            if self.cfg.use_app:
                keys |= {k for k in params if k.startswith("static.app.")}
            keys |= {k for k in params if k.startswith("dynamic.app.")}
        return keys

    def _frames_for(self, phase):
        if phase == "dap":
            return [i for i, f in enumerate(self.dataset.frames) if f.depth is not None]
        return list(range(len(self.dataset)))

    def _emit(self, rec):
        line = json.dumps(rec)
        every = self.cfg.log_every
        if every and (rec["iter"] % every == 0 or rec["iter"] == 1):
            log.info(line)
        if self.log_file is not None:
            with open(self.log_file, "a") as fh:
                fh.write(line + "\n")

    def _event(self, **ev):
        self.report.events.append(ev)
        log.info(json.dumps(ev))

    # -- phases ------------------------------------------------------------

    def run(self):
        for phase in PHASES:
            self.run_phase(phase)
        return self.report

    def run_phase(self, phase, max_steps=None):
        """Run (or continue) ``phase``; ``max_steps`` limits this call."""
        if phase not in PHASES:
            raise InvalidConfigError(f"unknown phase {phase!r}")
        n = self.cfg.iters(phase)
        if phase == "dap" and not self.cfg.use_dap:
            return self.report
        if phase == "dap" and n > 0 and not self.dataset.has_depth:
            if self.counters["dap"] == 0:
                log.warning("dataset has no depth maps, skipping depth-aware pretraining")
                self._event(phase="dap", event="skipped", reason="no depth maps")
                self.counters["dap"] = n
            return self.report
        if phase == "dap" and self.alignment is None:
            self.alignment = self._compute_alignment()
        sched = LrSchedule(self.cfg.lr_initial, self.cfg.lr_final, max(n - 1, 1))
        start = self.counters[phase]
        stop = n if max_steps is None else min(n, start + max_steps)
        t0 = time.perf_counter()
        if self.last_good is None:
            self.last_good = self.checkpoint()
        for it in range(start, stop):
            try:
                self._step(phase, it, sched)
            except TrainingDivergenceError as exc:
                self._abort(phase, it, exc)
            self.counters[phase] = it + 1
            self._lifecycle(phase, it + 1, n)
            if self.cfg.snapshot_every and (it + 1) % self.cfg.snapshot_every == 0:
                self.last_good = self.checkpoint()
        self.report.wall_clock[phase] = (self.report.wall_clock.get(phase, 0.0)
                                         + time.perf_counter() - t0)
        return self.report

    def _compute_alignment(self):
        mode = self.cfg.depth_alignment
        if mode == "never" or (mode == "auto" and self.dataset.depth_kind != "relative"):
            return (1.0, 0.0)
        xs, ys = [], []
        opts = self._resolve_options("dap")
        for i in self._frames_for("dap"):
            f = self.dataset[i]
            out, _ = render_scene(self.scene, f.t, f.camera, STATIC_ONLY, opts, self.raster)
            valid = _depth_valid(f, out, f.camera)
            xs.append(out.depth[valid])
            ys.append(f.depth[valid])
        scale, offset = align_depth(np.concatenate(xs), np.concatenate(ys),
                                    np.ones(sum(len(x) for x in xs), dtype=bool))
        if scale <= 0:
            log.warning("depth alignment produced scale %.3g, ignoring", scale)
            return (1.0, 0.0)
        self._event(phase="dap", event="depth_alignment", scale=scale, offset=offset)
        return (scale, offset)

    def _step(self, phase, it, sched):
        idx = self._frames_for(phase)
        frame = self.dataset[idx[int(self.rng.integers(len(idx)))]]
        res = objective(self.scene, frame, self._terms(phase), self.cfg.loss, it,
                        self._resolve_options(phase), self.raster, self.alignment or (1.0, 0.0))
        if not np.isfinite(res.total):
            raise TrainingDivergenceError(f"non-finite loss in {phase} at iteration {it + 1}",
                                          {"parts": res.parts})
        keys = self._trainable(phase)
        params = self.scene.parameters()
        grads = {k: res.grads[k] for k in sorted(keys)}
        lr = lr_at(sched, min(it, sched.total_steps))
        adam_step(params, grads, self.adam, lr, _lr_scale_map(grads, self.cfg.lr_scales))
        self.scene.touch()
        if phase == "stage1" and STATIC_ONLY in res.outputs:
            rendered, alpha = static_visibility(res.tapes[STATIC_ONLY], res.outputs[STATIC_ONLY])
            accumulate_visibility(self.vis, rendered, alpha)
        self._accumulate_grad_stats(res, phase)
        rec = {"iter": it + 1, "phase": phase, "frame": frame.index,
               "losses": {k: float(v) for k, v in res.parts.items()}, "total": res.total,
               "counts": {"static": len(self.scene.static), "dynamic": len(self.scene.dynamic)},
               "lr": lr}
        self.report.records.append(rec)
        self._emit(rec)

    def _accumulate_grad_stats(self, res, phase):
        cam = self.dataset[0].camera
        ndc = np.array([cam.width / 2.0, cam.height / 2.0])
        acc = {"static": None, "dynamic": None}
        for which, sg in res.splat_grads.items():
            st, dy = splat_screen_grads(res.tapes[which], sg)
            for name, item in (("static", st), ("dynamic", dy)):
                if item is None:
                    continue
                g, vis = item
                if acc[name] is None:
                    acc[name] = [np.zeros_like(g), np.zeros(len(g), dtype=bool)]
                acc[name][0] += g
                acc[name][1] |= vis
        for name, item in acc.items():
            if item is None or (phase == "stage2" and name == "static"):
                continue
            g, vis = item
            total, count = self.grad_stats[name]
            total += vis * np.linalg.norm(g * ndc, axis=1)
            count += vis

    def _lifecycle(self, phase, k, n):
        c = self.cfg
        if phase == "stage1" and c.use_vdp and self.vis.frames_seen > 0:
            if (k % c.prune_interval == 0 and k > c.prune_warmup) or k == n:
                self._prune(k)
        if phase in ("stage1", "stage2") and k % c.densify_interval == 0 and k < n:
            until = c.densify_until if phase == "stage1" else c.stage2_densify_until
            if c.densify_from <= k <= until:
                names = ("static", "dynamic") if phase == "stage1" else ("dynamic",)
                for name in names:
                    self._densify(name, phase, k)

    def _remap_adam(self, prefix, keep, n_new):
        for f in PARAM_FIELDS:
            key = f"{prefix}.{f}"
            for store in (self.adam.m, self.adam.v):
                if key in store:
                    old = store[key][keep]
                    pad = np.zeros((n_new,) + old.shape[1:], dtype=old.dtype)
                    store[key] = np.concatenate([old, pad])

    def _prune(self, k):
        try:
            static, rep = prune_static(self.scene.static, self.vis, self.cfg.prune)
        except PruneError as exc:
            log.warning("%s", exc)
            self._event(phase="stage1", iter=k, event="prune_refused", reason=str(exc))
            self.vis = VisibilityStats.zeros(len(self.scene.static))
            return
        keep = rep.keep
        self.scene.static = static
        self._remap_adam("static", keep, 0)
        total, count = self.grad_stats["static"]
        self.grad_stats["static"] = (total[keep], count[keep])
        self.vis = VisibilityStats.zeros(len(static))
        self._event(phase="stage1", iter=k, event="prune", removed=int(len(rep.removed)),
                    remaining=len(static))

    def _densify(self, name, phase, k):
        s = self._set(name)
        total, count = self.grad_stats[name]
        gs, rep = densify(s.gaussians, total, count, self.cfg.densify, self.extent, self.rng)
        if rep.skipped:
            self._event(phase=phase, iter=k, event="densify_skipped", set=name)
        if rep.n_new == 0:
            self.grad_stats[name] = self._zero_grad_stats(name)
            return
        s.gaussians = gs
        self._remap_adam(name, rep.keep, rep.n_new)
        if name == "static":
            self.vis = self.vis.subset(rep.keep).extend(rep.n_new)
        self.grad_stats[name] = self._zero_grad_stats(name)
        self._event(phase=phase, iter=k, event="densify", set=name, cloned=int(len(rep.cloned)),
                    split=int(len(rep.split)), total=len(gs))

    def _abort(self, phase, it, exc):
        path = None
        if self.last_good is not None:
            self.restore(self.last_good)
            if self.out_dir is not None:
                path = self.out_dir / "last_good.ckpt"
                save_checkpoint(path, self.last_good)
        diag = dict(getattr(exc, "diagnostics", {}) or {})
        diag.update(phase=phase, iteration=it + 1, checkpoint=str(path) if path else None)
        err = TrainingDivergenceError(f"training diverged in {phase} at iteration {it + 1}: {exc}",
                                      diag)
        err.checkpoint = self.last_good
        raise err from exc

    # -- state -------------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        arrays = scene_arrays(self.scene)
        for k, v in self.adam.m.items():
            arrays[f"adam_m/{k}"] = v.copy()
        for k, v in self.adam.v.items():
            arrays[f"adam_v/{k}"] = v.copy()
        arrays["vis/rendered_count"] = self.vis.rendered_count.copy()
        arrays["vis/transparency_sum"] = self.vis.transparency_sum.copy()
        for name, (total, count) in self.grad_stats.items():
            arrays[f"grad/{name}/total"] = total.copy()
            arrays[f"grad/{name}/count"] = count.copy()
        meta = {
            "config": self.cfg.to_dict(),
            "scene": scene_structure(self.scene),
            "counters": dict(self.counters),
            "adam": {"step": self.adam.step, "counts": dict(self.adam.counts)},
            "rng": copy.deepcopy(self.rng.bit_generator.state),
            "vis_frames": self.vis.frames_seen,
            "alignment": list(self.alignment) if self.alignment is not None else None,
            "extent": self.extent,
            "report": {"records": list(self.report.records), "events": list(self.report.events),
                       "wall_clock": dict(self.report.wall_clock)},
        }
        return Checkpoint(arrays, meta)

    def restore(self, ck: Checkpoint):
        a, m = ck.arrays, ck.meta
        self.scene = scene_from_arrays(a, m["scene"])
        self.adam = AdamState(
            {k[len("adam_m/"):]: np.array(v) for k, v in a.items() if k.startswith("adam_m/")},
            {k[len("adam_v/"):]: np.array(v) for k, v in a.items() if k.startswith("adam_v/")},
            int(m["adam"]["step"]), {k: int(v) for k, v in m["adam"]["counts"].items()})
        self.counters = {p: int(m["counters"].get(p, 0)) for p in PHASES}
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = copy.deepcopy(m["rng"])
        self.vis = VisibilityStats(np.array(a["vis/rendered_count"]),
                                   np.array(a["vis/transparency_sum"]), int(m["vis_frames"]))
        self.grad_stats = {name: (np.array(a[f"grad/{name}/total"]),
                                  np.array(a[f"grad/{name}/count"]))
                           for name in ("static", "dynamic")}
        self.alignment = tuple(m["alignment"]) if m["alignment"] is not None else None
        self.extent = float(m["extent"])
        rep = m.get("report", {})
        self.report = TrainReport(list(rep.get("records", [])), list(rep.get("events", [])),
                                  dict(rep.get("wall_clock", {})))
        return self

    def save(self, path):
        save_checkpoint(path, self.checkpoint())

    @classmethod
    def from_checkpoint(cls, ck, dataset: Dataset, out_dir=None, log_file=None):
        if not isinstance(ck, Checkpoint):
            ck = load_checkpoint(ck)
        cfg = TrainConfig.from_dict(ck.meta["config"])
        tr = cls(scene_from_arrays(ck.arrays, ck.meta["scene"]), dataset, cfg, out_dir, log_file)
        return tr.restore(ck)


# ---------------------------------------------------------------------------
# phase entry points


def _run_single(phase, scene, dataset, cfg):
    tr = Trainer(scene, dataset, cfg)
    tr.run_phase(phase)
    return tr.scene, tr.report


def pretrain_dap(scene: Scene, dataset: Dataset, cfg: TrainConfig = None):
    """Depth-aware pretraining of the static set; returns (scene, report)."""
    return _run_single("dap", scene, dataset, cfg)


def train_stage1(scene: Scene, dataset: Dataset, cfg: TrainConfig = None):
    """Disentangling stage: region-masked losses, pruning and densification."""
    return _run_single("stage1", scene, dataset, cfg)


def train_stage2(scene: Scene, dataset: Dataset, cfg: TrainConfig = None):
    """Joint stage: static geometry frozen, appearance and dynamic parts trained."""
    return _run_single("stage2", scene, dataset, cfg)


def train(dataset: Dataset, cfg: TrainConfig = None, scene: Scene = None, out_dir=None):
    """Initialize (unless ``scene`` is given) and run all phases."""
    cfg = cfg or TrainConfig()
    scene = scene if scene is not None else initialize_scene(dataset, cfg)
    tr = Trainer(scene, dataset, cfg, out_dir)
    tr.run()
    return tr.scene, tr.report


def evaluate(scene: Scene, dataset: Dataset, split="train", which=BOTH, decompose=False,
             raster_options=None):
    """Per-frame PSNR/SSIM of ``which`` renders against the ground truth.

    ``split`` is ``"train"`` (every frame) or a sequence of frame indices.
    With ``decompose`` the static-only and dynamic-only renders are returned
    under ``"renders"`` as well.
    """
    which = normalize_which(which)
    indices = range(len(dataset)) if isinstance(split, str) else split
    if isinstance(split, str) and split not in ("train", "all"):
        raise InvalidConfigError(f"unknown split {split!r}")
    records, renders = [], {"both": [], "static": [], "dynamic": []}
    opts = ResolveOptions()
    for i in indices:
        f = dataset[i]
        out, _ = render_scene(scene, f.t, f.camera, which, opts, raster_options)
        img = np.clip(out.color, 0.0, 1.0)
        records.append({"frame": int(i), "t": f.t, "psnr": psnr(img, f.image),
                        "ssim": ssim(img, f.image)})
        if decompose:
            renders["both"].append(img)
            for key, w in (("static", STATIC_ONLY), ("dynamic", DYNAMIC_ONLY)):
                o, _ = render_scene(scene, f.t, f.camera, w, opts, raster_options)
                renders[key].append(np.clip(o.color, 0.0, 1.0))
    result = {"frames": records,
              "mean_psnr": float(np.mean([r["psnr"] for r in records])) if records else float("nan"),
              "mean_ssim": float(np.mean([r["ssim"] for r in records])) if records else float("nan")}
    if decompose:
        result["renders"] = renders
    return result
