"""Dynamic patch proposal: attention rollout -> patch mask -> largest region -> zoomed crop.

All functions are pure numpy over a single image's attention; nothing here is
recorded in the autograd graph.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .tensor import bilinear_resize
from .vit import AttentionStack, ModelConfig


class EmptyMask(ValueError):
    """No patch exceeds the threshold, so there is no region to propose."""


@dataclass
class PatchMask:
    grid: np.ndarray
    alpha: float
    mean_score: float


@dataclass
class PatchComponent:
    members: frozenset[tuple[int, int]]
    bbox: tuple[int, int, int, int]  # row_min, col_min, row_max, col_max (inclusive)

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class PixelRegion:
    """Half-open pixel rectangle [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (0 <= self.x0 < self.x1 and 0 <= self.y0 < self.y1):
            raise ValueError(f"degenerate region {self}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    def as_text(self) -> str:
        return f"{self.x0} {self.y0} {self.x1} {self.y1}"

    @classmethod
    def full(cls, size: int) -> PixelRegion:
        return cls(0, 0, size, size)


@dataclass
class Proposal:
    region: PixelRegion
    crop: np.ndarray = field(repr=False)
    mask: PatchMask | None
    rollout: np.ndarray = field(repr=False)
    fallback: bool = False


def regularize_layer(w: np.ndarray) -> np.ndarray:
    """Average heads, add the identity, and rescale every row to mean 1."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 3 or w.shape[0] == 0:
        raise ValueError(f"expected (K>0, T, T) attention, got {w.shape}")
    a = w.mean(axis=0) + np.eye(w.shape[-1])
    return a / a.mean(axis=1, keepdims=True)


def rollout(layers) -> np.ndarray:
    """g = G_L @ ... @ G_1 (later layers on the left)."""
    layers = list(layers)
    if not layers:
        raise ValueError("rollout needs at least one layer")
    shape = np.shape(layers[0])
    g = np.asarray(layers[0], dtype=np.float64)
    for gl in layers[1:]:
        if np.shape(gl) != shape:
            raise ValueError(f"layer shape {np.shape(gl)} differs from {shape}")
        g = np.asarray(gl, dtype=np.float64) @ g
    return g


def patch_scores(g: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Row of the first CLS token, CLS columns dropped, reshaped to the patch grid."""
    c, n = cfg.num_cls_tokens, cfg.num_patches
    if g.shape != (c + n, c + n):
        raise ValueError(f"rollout shape {g.shape} does not match T={c + n}")
    return g[0, c:].reshape(cfg.grid, cfg.grid).copy()


def threshold_mask(scores: np.ndarray, alpha: float) -> PatchMask:
    """Mark patches whose score strictly exceeds alpha times the mean score."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    scores = np.asarray(scores, dtype=np.float64)
    mean = float(scores.mean())
    return PatchMask((scores > alpha * mean).astype(np.uint8), float(alpha), mean)


def largest_component(mask: PatchMask | np.ndarray) -> PatchComponent:
    """Flood-fill every 4-connected component; keep the biggest.

    Ties go to the component whose bounding box has the smallest
    (row_min, col_min).
    """
    grid = np.asarray(mask.grid if isinstance(mask, PatchMask) else mask).astype(bool)
    rows, cols = grid.shape
    labels = np.zeros(grid.shape, dtype=np.int64)
    best: PatchComponent | None = None
    next_label = 0
    for r0 in range(rows):
        for c0 in range(cols):
            if not grid[r0, c0] or labels[r0, c0]:
                continue
            next_label += 1
            labels[r0, c0] = next_label
            members = []
            queue = deque([(r0, c0)])
            while queue:
                r, c = queue.popleft()
                members.append((r, c))
                for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                    if 0 <= rr < rows and 0 <= cc < cols and grid[rr, cc] and not labels[rr, cc]:
                        labels[rr, cc] = next_label
                        queue.append((rr, cc))
            rs = [m[0] for m in members]
            cs = [m[1] for m in members]
            comp = PatchComponent(frozenset(members), (min(rs), min(cs), max(rs), max(cs)))
            if best is None or comp.size > best.size or (
                comp.size == best.size and comp.bbox[:2] < best.bbox[:2]
            ):
                best = comp
    if best is None:
        raise EmptyMask("patch mask has no active patches")
    return best


def to_pixel_region(comp: PatchComponent, patch: int, image_size: int) -> PixelRegion:
    r0, c0, r1, c1 = comp.bbox
    return PixelRegion(
        min(c0 * patch, image_size),
        min(r0 * patch, image_size),
        min((c1 + 1) * patch, image_size),
        min((r1 + 1) * patch, image_size),
    )


def crop_zoom(image: np.ndarray, region: PixelRegion, out_size: int) -> np.ndarray:
    h, w = image.shape[:2]
    if region.x1 > w or region.y1 > h:
        raise ValueError(f"region {region} outside {w}x{h} image")
    sub = image[region.y0 : region.y1, region.x0 : region.x1]
    return bilinear_resize(sub, out_size, out_size)


def rollout_map(stack: np.ndarray) -> np.ndarray:
    """Rollout of one image's (L, K, T, T) attention."""
    return rollout(regularize_layer(w) for w in stack)


def propose(stack, image: np.ndarray, cfg: ModelConfig, alpha: float) -> Proposal:
    """Full proposal for a single image; raises EmptyMask when nothing is selected."""
    weights = stack.weights[0] if isinstance(stack, AttentionStack) else np.asarray(stack)
    g = rollout_map(weights)
    mask = threshold_mask(patch_scores(g, cfg), alpha)
    comp = largest_component(mask)
    region = to_pixel_region(comp, cfg.patch_size, cfg.image_size)
    return Proposal(region, crop_zoom(image, region, cfg.image_size), mask, g)


def propose_or_full(stack, image: np.ndarray, cfg: ModelConfig, alpha: float) -> Proposal:
    """``propose`` with the full-image fallback for an empty mask."""
    weights = stack.weights[0] if isinstance(stack, AttentionStack) else np.asarray(stack)
    try:
        return propose(weights, image, cfg, alpha)
    except EmptyMask:
        g = rollout_map(weights)
        mask = threshold_mask(patch_scores(g, cfg), alpha)
        region = PixelRegion.full(cfg.image_size)
        return Proposal(region, crop_zoom(image, region, cfg.image_size), mask, g, fallback=True)


# ---------------------------------------------------------------- export formats
def mask_to_text(mask: PatchMask) -> str:
    return "\n".join("".join(str(int(v)) for v in row) for row in mask.grid) + "\n"


def heatmap_u8(scores: np.ndarray) -> np.ndarray:
    """Min-max normalise to 0..255; a constant map becomes all zeros."""
    s = np.asarray(scores, dtype=np.float64)
    lo, hi = s.min(), s.max()
    if hi <= lo:
        return np.zeros(s.shape, dtype=np.uint8)
    return np.round((s - lo) / (hi - lo) * 255.0).astype(np.uint8)
