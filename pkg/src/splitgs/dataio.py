"""Dataset layout, image/depth files, initialization and checkpoints.

Dataset directory::

    manifest.json        cameras, frame list, image size, depth kind
    frames/NNNN.png      8-bit RGB observations
    masks/NNNN.png       8-bit masks, 255 = static (M=1), 0 = dynamic
    depth/NNNN.pfm       optional float32 little-endian PFM depth
    plates/NNNN.png      optional clean static-only renders (synthetic data)
    init_points.txt      optional "x y z r g b" lines, colors in [0, 1]
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from .camera import Camera
from .errors import (
    CheckpointError,
    CheckpointIntegrityError,
    CheckpointVersionError,
    DatasetError,
)
from .gaussian import SH_C0, GaussianSet, logit, sh_coeff_count

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
DATASET_FORMAT = "splitgs-dataset"
DATASET_VERSION = 1


# ---------------------------------------------------------------------------
# file helpers


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_png(path, img):
    """Write an RGB float image in [0, 1] (or an (H, W) mask) as 8-bit PNG."""
    arr = np.asarray(img, dtype=float)
    arr8 = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr8).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def read_png(path):
    with Image.open(path) as im:
        return np.asarray(im)


def write_pfm(path, depth):
    depth = np.asarray(depth, dtype="<f4")
    if depth.ndim != 2:
        raise ValueError("PFM writer expects a single-channel (H, W) array")
    h, w = depth.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    atomic_write_bytes(path, header + np.flipud(depth).tobytes())


def read_pfm(path):
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise DatasetError(f"{path}: not a PFM file")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(fh.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 3 if kind == b"PF" else 1
        data = np.frombuffer(fh.read(), dtype=dtype)
    if data.size != w * h * channels:
        raise DatasetError(f"{path}: truncated PFM data")
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.flipud(data.reshape(shape)).astype(np.float32)


# ---------------------------------------------------------------------------
# dataset


@dataclass
class Frame:
    index: int
    t: float
    image: np.ndarray
    mask: np.ndarray
    camera: Camera
    depth: np.ndarray = None
    plate: np.ndarray = None


@dataclass
class Dataset:
    frames: list
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    depth_kind: str = "metric"
    init_points: np.ndarray = None
    root: Path = None

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    @property
    def width(self):
        return self.frames[0].camera.width

    @property
    def height(self):
        return self.frames[0].camera.height

    @property
    def has_depth(self):
        return any(f.depth is not None for f in self.frames)


def timestamps(n):
    if n == 1:
        return np.zeros(1)
    return np.arange(n) / (n - 1)


def _load_mask(path):
    raw = read_png(path)
    if raw.ndim == 3:
        raw = raw[..., 0]
    if not np.all(np.isin(raw, (0, 255))):
        log.warning("%s: mask values outside {0, 255}, thresholding at 128", path)
    return (raw >= 128).astype(float)


def load_dataset(directory) -> Dataset:
    """Read and validate a dataset directory."""
    root = Path(directory)
    mpath = root / MANIFEST
    if not mpath.is_file():
        raise DatasetError(f"missing manifest: {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
        entries = manifest["frames"]
        width, height = int(manifest["width"]), int(manifest["height"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed manifest {mpath}: {exc}") from exc
    if not entries:
        raise DatasetError(f"{mpath}: no frames listed")
    if "num_frames" in manifest and int(manifest["num_frames"]) != len(entries):
        raise DatasetError(f"{mpath}: num_frames={manifest['num_frames']} but "
                           f"{len(entries)} frames listed")
    ts = timestamps(len(entries))
    frames = []
    for i, entry in enumerate(entries):
        try:
            cam = Camera.from_dict(entry["camera"])
            img_rel, mask_rel = entry["image"], entry["mask"]
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{mpath}: frame {i} malformed: {exc}") from exc
        paths = {"image": root / img_rel, "mask": root / mask_rel}
        if entry.get("depth"):
            paths["depth"] = root / entry["depth"]
        if entry.get("plate"):
            paths["plate"] = root / entry["plate"]
        for kind, p in paths.items():
            if not p.is_file():
                raise DatasetError(f"frame {i}: missing {kind} file {p}")
        img = read_png(paths["image"])
        if img.ndim != 3 or img.shape[2] < 3:
            raise DatasetError(f"{paths['image']}: expected an RGB image")
        img = img[..., :3].astype(float) / 255.0
        mask = _load_mask(paths["mask"])
        depth = read_pfm(paths["depth"]).astype(float) if "depth" in paths else None
        plate = (read_png(paths["plate"])[..., :3].astype(float) / 255.0
                 if "plate" in paths else None)
        for kind, arr in (("image", img), ("mask", mask), ("depth", depth), ("plate", plate)):
            if arr is not None and arr.shape[:2] != (height, width):
                raise DatasetError(f"frame {i}: {kind} resolution {arr.shape[1]}x{arr.shape[0]} "
                                   f"!= {width}x{height}")
        if (cam.width, cam.height) != (width, height):
            raise DatasetError(f"frame {i}: camera size does not match manifest")
        frames.append(Frame(i, float(ts[i]), img, mask, cam, depth, plate))
    pts = None
    if (root / "init_points.txt").is_file():
        pts = read_points(root / "init_points.txt")
    return Dataset(frames, np.asarray(manifest.get("background", [0, 0, 0]), dtype=float),
                   manifest.get("depth_kind", "metric"), pts, root)


def write_dataset(directory, frames, background=(0, 0, 0), depth_kind="metric",
                  init_points=None):
    """Write frames (list of Frame) in the on-disk layout; returns the root path."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, f in enumerate(frames):
        entry = {"image": f"frames/{i:04d}.png", "mask": f"masks/{i:04d}.png",
                 "camera": f.camera.to_dict()}
        write_png(root / entry["image"], f.image)
        write_png(root / entry["mask"], (np.asarray(f.mask) > 0.5).astype(float))
        if f.depth is not None:
            entry["depth"] = f"depth/{i:04d}.pfm"
            write_pfm(root / entry["depth"], f.depth)
        if f.plate is not None:
            entry["plate"] = f"plates/{i:04d}.png"
            write_png(root / entry["plate"], f.plate)
        entries.append(entry)
    cam = frames[0].camera
    manifest = {"format": DATASET_FORMAT, "version": DATASET_VERSION,
                "width": cam.width, "height": cam.height, "num_frames": len(frames),
                "background": [float(x) for x in background], "depth_kind": depth_kind,
                "frames": entries}
    atomic_write_bytes(root / MANIFEST, json.dumps(manifest, indent=1).encode())
    if init_points is not None:
        write_points(root / "init_points.txt", init_points)
    return root


def write_points(path, points):
    lines = [" ".join(f"{v:.9g}" for v in row) for row in np.asarray(points, dtype=float)]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("ascii"))


def read_points(path):
    try:
        pts = np.loadtxt(path, ndmin=2)
    except ValueError as exc:
        raise DatasetError(f"{path}: malformed point file: {exc}") from exc
    if pts.size == 0:
        return np.zeros((0, 6))
    if pts.shape[1] != 6:
        raise DatasetError(f"{path}: expected 6 columns (x y z r g b), got {pts.shape[1]}")
    if pts[:, 3:].max() > 1.0:
        pts[:, 3:] /= 255.0
    return pts


# ---------------------------------------------------------------------------
# initialization


def gaussians_from_points(points, sh_degree=1, opacity=0.1, dtype=np.float64) -> GaussianSet:
    """Isotropic Gaussians at the given points, sized by 3-nearest-neighbour spacing."""
    points = np.asarray(points, dtype=float)
    n = len(points)
    xyz, rgb = points[:, :3], points[:, 3:6]
    if n > 1:
        k = min(4, n)
        dist, _ = cKDTree(xyz).query(xyz, k=k)
        spacing = dist[:, 1:].mean(axis=1)
        spacing = np.maximum(spacing, 1e-4)
    else:
        spacing = np.full(n, 0.05)
    sh = np.zeros((n, sh_coeff_count(sh_degree), 3))
    sh[:, 0, :] = rgb / SH_C0
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    gs = GaussianSet(xyz.copy(), quats, np.repeat(np.log(spacing)[:, None], 3, axis=1),
                     np.full(n, float(logit(opacity))), sh, sh_degree)
    return gs.astype(dtype)


def classify_points(xyz, dataset: Dataset, depth_rel_tol=0.03):
    """Boolean mask of points that belong to the dynamic set.

    A point counts as observed in a frame when it projects inside the image
    and (if depth is available) its camera depth agrees with the depth map.
    Points observed at all are dynamic when they fall into the dynamic mask in
    most observing frames; points never observed (or datasets without depth)
    fall back to "inside any frame's dynamic mask".
    """
    xyz = np.asarray(xyz, dtype=float)
    n = len(xyz)
    seen = np.zeros(n)
    seen_dyn = np.zeros(n)
    any_dyn = np.zeros(n, dtype=bool)
    for f in dataset.frames:
        cam = f.camera
        p = xyz @ cam.rotation.T + cam.translation
        z = p[:, 2]
        front = z > cam.near
        zs = np.where(front, z, 1.0)
        u = np.rint(cam.fx * p[:, 0] / zs + cam.cx).astype(np.int64)
        v = np.rint(cam.fy * p[:, 1] / zs + cam.cy).astype(np.int64)
        inside = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        uu, vv = np.where(inside, u, 0), np.where(inside, v, 0)
        dyn_px = inside & (f.mask[vv, uu] < 0.5)
        any_dyn |= dyn_px
        if f.depth is not None:
            d = f.depth[vv, uu]
            agree = inside & (np.abs(z - d) <= depth_rel_tol * np.abs(d))
            seen += agree
            seen_dyn += agree & dyn_px
    observed = seen > 0
    out = any_dyn.copy()
    out[observed] = seen_dyn[observed] > 0.5 * seen[observed]
    return out


def random_points(n, rng, low=-1.0, high=1.0):
    pts = np.empty((n, 6))
    pts[:, :3] = rng.uniform(low, high, (n, 3))
    pts[:, 3:] = 0.5
    return pts


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"SPGS"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sH32s")


@dataclass
class Checkpoint:
    """Serializable training snapshot.

    ``arrays`` maps names to numpy arrays, ``meta`` holds JSON-compatible
    values (config snapshot, counters, RNG state, scene structure).
    """

    arrays: dict
    meta: dict
    version: int = CHECKPOINT_VERSION


def save_checkpoint(path, ckpt: Checkpoint):
    buf = io.BytesIO()
    payload_arrays = dict(ckpt.arrays)
    payload_arrays["__meta__"] = np.frombuffer(json.dumps(ckpt.meta).encode(), dtype=np.uint8)
    np.savez(buf, **payload_arrays)
    payload = buf.getvalue()
    digest = hashlib.sha256(payload).digest()
    atomic_write_bytes(path, _HEADER.pack(CHECKPOINT_MAGIC, ckpt.version, digest) + payload)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CheckpointIntegrityError(f"{path}: file too short to be a checkpoint")
    magic, version, digest = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes {magic!r}")
    if version > CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {version} is newer than supported version "
            f"{CHECKPOINT_VERSION}")
    payload = data[_HEADER.size:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointIntegrityError(f"{path}: content hash mismatch (corrupt or truncated)")
    with np.load(io.BytesIO(payload), allow_pickle=False) as npz:
        arrays = {k: npz[k] for k in npz.files}
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    return Checkpoint(arrays, meta, version)
