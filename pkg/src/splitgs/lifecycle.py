"""Visibility bookkeeping, visibility-driven pruning and densification."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolationError, PruneError
from .gaussian import GaussianSet, quat_to_rotmat, normalize_quat
from .scene import StaticSet

log = logging.getLogger(__name__)


@dataclass
class VisibilityStats:
    rendered_count: np.ndarray
    transparency_sum: np.ndarray
    frames_seen: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n, dtype=np.int64), np.zeros(n), 0)

    def __len__(self):
        return len(self.rendered_count)

    def subset(self, keep):
        return VisibilityStats(self.rendered_count[keep].copy(),
                               self.transparency_sum[keep].copy(), self.frames_seen)

    def extend(self, n_new):
        return VisibilityStats(np.concatenate([self.rendered_count, np.zeros(n_new, np.int64)]),
                               np.concatenate([self.transparency_sum, np.zeros(n_new)]),
                               self.frames_seen)


def accumulate_visibility(stats: VisibilityStats, rendered, alpha) -> VisibilityStats:
    """Add one frame: count rendered Gaussians and their transparency (1 - alpha)."""
    rendered = np.asarray(rendered, dtype=bool)
    alpha = np.asarray(alpha, dtype=float)
    if rendered.shape != stats.rendered_count.shape or alpha.shape != rendered.shape:
        raise ContractViolationError(
            f"visibility update for {rendered.shape}/{alpha.shape}, stats cover {len(stats)}")
    stats.rendered_count += rendered
    stats.transparency_sum += rendered * (1.0 - alpha)
    stats.frames_seen += 1
    return stats


def visibility_score(stats: VisibilityStats):
    """(mean transparency-weighted visibility, render frequency) per Gaussian."""
    T = stats.frames_seen
    if T <= 0:
        return np.zeros(0), np.zeros(0)
    return stats.transparency_sum / T, stats.rendered_count / T


@dataclass
class PruneConfig:
    min_frequency: float = 0.05
    max_transparency: float = 0.98
    use_frequency: bool = True
    use_transparency: bool = True
    min_keep_fraction: float = 0.01

    def __post_init__(self):
        for name in ("min_frequency", "max_transparency", "min_keep_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


@dataclass
class PruneReport:
    removed: np.ndarray
    vbar: np.ndarray
    freq: np.ndarray
    keep: np.ndarray

    def records(self):
        removed = set(self.removed.tolist())
        return [{"index": i, "vbar": float(v), "freq": float(f), "pruned": i in removed}
                for i, (v, f) in enumerate(zip(self.vbar, self.freq))]


def prune_mask(stats: VisibilityStats, cfg: PruneConfig):
    vbar, freq = visibility_score(stats)
    if len(vbar) == 0 and len(stats):
        return np.zeros(len(stats), dtype=bool), vbar, freq
    remove = np.zeros(len(vbar), dtype=bool)
    rare = freq < cfg.min_frequency
    if cfg.use_frequency:
        remove |= rare
    if cfg.use_transparency:
        with np.errstate(invalid="ignore", divide="ignore"):
            mean_transparency = np.where(freq > 0, vbar / np.where(freq > 0, freq, 1.0), 0.0)
        remove |= ~rare & (mean_transparency > cfg.max_transparency)
    return remove, vbar, freq


def prune_static(static: StaticSet, stats: VisibilityStats, cfg: PruneConfig = None):
    """Drop rarely rendered or persistently transparent static Gaussians.

    Returns the pruned set (sharing the appearance network) and a report.
    """
    cfg = cfg or PruneConfig()
    if len(stats) != len(static):
        raise ContractViolationError(f"stats cover {len(stats)} Gaussians, set has {len(static)}")
    remove, vbar, freq = prune_mask(stats, cfg)
    keep = ~remove
    n = len(static)
    min_keep = max(1, int(np.ceil(cfg.min_keep_fraction * n))) if n else 0
    if n and keep.sum() < min_keep:
        raise PruneError(f"pruning would keep {int(keep.sum())} of {n} static Gaussians "
                         f"(minimum {min_keep}); refusing")
    report = PruneReport(np.flatnonzero(remove), vbar, freq, keep)
    if not remove.any():
        return static, report
    return StaticSet(static.gaussians.subset(keep), static.app_mlp), report


@dataclass
class DensifyConfig:
    grad_threshold: float = 1e-3
    percent_dense: float = 0.01
    max_gaussians: int = 20000
    split_factor: float = 1.6
    reset_opacity: bool = False
    reset_opacity_logit: float = -4.59511985  # logit(0.01)


@dataclass
class DensifyReport:
    cloned: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    split: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    keep: np.ndarray = None
    n_new: int = 0
    skipped: bool = False


def densify(gs: GaussianSet, grad_accum, grad_count, cfg: DensifyConfig, scene_extent, rng):
    """Clone small and split large Gaussians whose mean screen gradient is high.

    New rows are appended after the surviving old rows: ``result =
    gs[keep] ++ clones ++ split children``.
    """
    n = len(gs)
    grad_accum = np.asarray(grad_accum, dtype=float)
    grad_count = np.asarray(grad_count, dtype=float)
    mean_grad = np.where(grad_count > 0, grad_accum / np.maximum(grad_count, 1), 0.0)
    hot = mean_grad > cfg.grad_threshold
    big = np.exp(gs.log_scales).max(axis=1) > cfg.percent_dense * scene_extent
    clone_idx = np.flatnonzero(hot & ~big)
    split_idx = np.flatnonzero(hot & big)
    report = DensifyReport(clone_idx, split_idx, np.ones(n, dtype=bool))
    if len(clone_idx) == 0 and len(split_idx) == 0:
        return gs, report
    if n + len(clone_idx) + len(split_idx) > cfg.max_gaussians:
        log.warning("densify: budget of %d Gaussians would be exceeded, skipping",
                    cfg.max_gaussians)
        report.skipped = True
        report.cloned = report.split = np.zeros(0, np.int64)
        return gs, report

    clones = gs.subset(clone_idx)
    parents = gs.subset(split_idx)
    children = parents.append(parents)
    scale = np.exp(children.log_scales)
    q, _ = normalize_quat(children.quats)
    R = quat_to_rotmat(q)
    samples = rng.normal(size=(len(children), 3)).astype(scale.dtype) * scale
    offsets = np.einsum("nij,nj->ni", R, samples)
    children.means = (children.means + offsets).astype(gs.means.dtype)
    children.log_scales = np.log(scale / cfg.split_factor)

    keep = np.ones(n, dtype=bool)
    keep[split_idx] = False
    out = gs.subset(keep).append(clones).append(children)
    if cfg.reset_opacity:
        out.opacity_logits = np.minimum(out.opacity_logits, cfg.reset_opacity_logit)
    report.keep = keep
    report.n_new = len(clones) + len(children)
    return out, report
