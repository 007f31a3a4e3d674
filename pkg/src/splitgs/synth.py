"""Procedural test scene: textured wall and floor with a blob on a circular path.

The ground truth is itself a Gaussian scene rendered with the package
rasterizer, so images, masks, depth and clean plates are all exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import Camera, look_at
from .dataio import Frame, timestamps, write_dataset
from .gaussian import SH_C0, GaussianSet, logit
from .rasterizer import render
from .scene import BOTH, DYNAMIC_ONLY, STATIC_ONLY, ResolveOptions, build_scene, resolve

MASK_THRESHOLD = 1e-3


@dataclass
class SynthSpec:
    width: int = 64
    height: int = 64
    frames: int = 60
    focal: float = 150.0
    arc_degrees: float = 8.0
    camera_radius: float = 3.0
    camera_lift: float = 0.3
    target: tuple = (0.0, 0.0, 0.5)
    wall_z: float = 1.3
    floor_y: float = 0.5
    surface_spacing: float = 0.05
    blob_center: tuple = (0.0, -0.1, 0.4)
    blob_radius: float = 0.15
    blob_splats: int = 150
    path_radius: float = 0.2
    flicker: float = 0.02
    init_static: int = 2000
    init_dynamic: int = 120
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.frames < 1 or self.width < 1 or self.height < 1:
            raise ValueError("frames and resolution must be positive")


@dataclass
class SynthScene:
    spec: SynthSpec
    frames: list
    static: GaussianSet
    blob: GaussianSet
    blob_offsets: np.ndarray
    init_points: np.ndarray
    blob_accum: list = field(default_factory=list)


class _Texture:
    def __init__(self, rng, base, n_waves=6):
        self.base = np.asarray(base, dtype=float)
        ang = rng.uniform(0, 2 * np.pi, n_waves)
        freq = rng.uniform(0.5, 2.5, n_waves)
        self.k = 2 * np.pi * freq[:, None] * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        self.phase = rng.uniform(0, 2 * np.pi, n_waves)
        self.amp = rng.uniform(0.05, 0.13, (n_waves, 3))

    def __call__(self, uv):
        waves = np.sin(np.asarray(uv) @ self.k.T + self.phase)
        return np.clip(self.base + waves @ self.amp, 0.05, 0.95)


def _surface(centers, normal_axis, colors, spacing, opacity=0.9):
    n = len(centers)
    ls = np.full((n, 3), np.log(0.7 * spacing))
    ls[:, normal_axis] = np.log(0.005)
    sh = np.zeros((n, 1, 3))
    sh[:, 0] = colors / SH_C0
    q = np.zeros((n, 4))
    q[:, 0] = 1.0
    return GaussianSet(centers, q, ls, np.full(n, float(logit(opacity))), sh, 0)


def _grid(lo0, hi0, lo1, hi1, step):
    a = np.arange(lo0, hi0 + 1e-9, step)
    b = np.arange(lo1, hi1 + 1e-9, step)
    A, B = np.meshgrid(a, b, indexing="ij")
    return A.ravel(), B.ravel()


def _sphere_points(n, rng=None):
    if rng is None:
        # Fibonacci lattice
        i = np.arange(n) + 0.5
        phi = np.arccos(1 - 2 * i / n)
        theta = np.pi * (1 + 5 ** 0.5) * i
        return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], 1)
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _blob_color(normals):
    return np.clip(0.5 + 0.4 * normals[:, [0, 2, 1]] * np.array([1.0, -1.0, 1.0]), 0.05, 0.95)


def cameras_for(spec: SynthSpec):
    target = np.asarray(spec.target, dtype=float)
    cams = []
    for t in timestamps(spec.frames):
        th = np.deg2rad(spec.arc_degrees) * (2 * t - 1)
        eye = target + np.array([spec.camera_radius * np.sin(th), -spec.camera_lift,
                                 -spec.camera_radius * np.cos(th)])
        cams.append(Camera(spec.focal, spec.focal, (spec.width - 1) / 2, (spec.height - 1) / 2,
                           spec.width, spec.height, look_at(eye, target)))
    return cams


def blob_offset(spec: SynthSpec, t):
    a = 2 * np.pi * t
    return spec.path_radius * np.array([np.cos(a) - 1.0, np.sin(a), 0.0])


def make_synthetic(spec: SynthSpec = None, seed=0) -> SynthScene:
    spec = spec or SynthSpec()
    rng = np.random.default_rng(seed)
    wall_tex = _Texture(rng, (0.55, 0.45, 0.35))
    floor_tex = _Texture(rng, (0.35, 0.45, 0.5))

    s = spec.surface_spacing
    x, y = _grid(-1.3, 1.3, -1.3, spec.floor_y, s)
    wall = _surface(np.stack([x, y, np.full_like(x, spec.wall_z)], 1), 2,
                    wall_tex(np.stack([x, y], 1)), s)
    x, z = _grid(-1.3, 1.3, -0.6, spec.wall_z, s)
    floor = _surface(np.stack([x, np.full_like(x, spec.floor_y), z], 1), 1,
                     floor_tex(np.stack([x, z], 1)), s)
    static = wall.append(floor)

    nrm = _sphere_points(spec.blob_splats)
    center = np.asarray(spec.blob_center, dtype=float)
    blob = GaussianSet(center + spec.blob_radius * nrm, np.tile([1.0, 0, 0, 0], (len(nrm), 1)),
                       np.full((len(nrm), 3), np.log(0.22 * spec.blob_radius)),
                       np.full(len(nrm), float(logit(0.95))),
                       (_blob_color(nrm) / SH_C0)[:, None, :], 0)

    # initialization samples: wall and floor within the viewed region, blob at t=0
    area_wall, area_floor = 2.0 * 1.5, 2.0 * 1.8
    n_wall = int(round(spec.init_static * area_wall / (area_wall + area_floor)))
    n_floor = spec.init_static - n_wall
    wx, wy = rng.uniform(-1.0, 1.0, n_wall), rng.uniform(-1.0, spec.floor_y, n_wall)
    fx, fz = rng.uniform(-1.0, 1.0, n_floor), rng.uniform(spec.wall_z - 1.8, spec.wall_z, n_floor)
    pw = np.stack([wx, wy, np.full(n_wall, spec.wall_z)], 1)
    pf = np.stack([fx, np.full(n_floor, spec.floor_y), fz], 1)
    bn = _sphere_points(spec.init_dynamic, rng)
    pb = center + spec.blob_radius * bn
    init = np.concatenate([
        np.hstack([pw, wall_tex(np.stack([wx, wy], 1))]),
        np.hstack([pf, floor_tex(np.stack([fx, fz], 1))]),
        np.hstack([pb, _blob_color(bn)]),
    ])

    scene = build_scene(static.copy(), blob.copy(), hidden_width=4, hidden_depth=1,
                        dynamic_appearance=False,
                        background=spec.background)
    base_sh = static.sh.copy()
    opts = ResolveOptions(static_app=False, dynamic_app=False)
    frames, offsets, accums = [], [], []
    bg = np.asarray(spec.background, dtype=float)
    for i, (t, cam) in enumerate(zip(timestamps(spec.frames), cameras_for(spec))):
        off = blob_offset(spec, t)
        scene.dynamic.gaussians.means = blob.means + off
        scene.static.gaussians.sh = base_sh + spec.flicker * np.sin(2 * np.pi * t) / SH_C0
        full = render(resolve(scene, t, cam, BOTH, opts)[0], cam, bg)
        plate = render(resolve(scene, t, cam, STATIC_ONLY, opts)[0], cam, bg)
        blob_only = render(resolve(scene, t, cam, DYNAMIC_ONLY, opts)[0], cam, np.zeros(3))
        mask = (blob_only.accum_alpha < MASK_THRESHOLD).astype(float)
        frames.append(Frame(i, float(t), np.clip(full.color, 0, 1), mask, cam,
                            full.depth.astype(np.float32).astype(float), np.clip(plate.color, 0, 1)))
        offsets.append(off)
        accums.append(blob_only.accum_alpha)
    return SynthScene(spec, frames, static, blob, np.array(offsets), init, accums)


def synth_scene(out_dir, spec: SynthSpec = None, seed=0):
    """Generate the synthetic sequence and write it as a dataset directory."""
    sc = make_synthetic(spec, seed)
    return write_dataset(out_dir, sc.frames, sc.spec.background, "metric", sc.init_points)
