"""Two-scale recurrent model with scale-wise CLS tokens and the joint loss."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from . import dppm
from .dppm import PatchMask, PixelRegion
from .tensor import Tensor, cross_entropy, no_grad
from .vit import (
    ModelConfig,
    Params,
    TokenSequence,
    build_sequence,
    classify,
    forward_backbone,
    init_params,
    tokenize,
)

CLS_MODES = ("scale-wise", "scale-shared")
PROPOSALS = ("dppm", "random", "fixed")


def cls_tokens_for(mode: str) -> int:
    if mode not in CLS_MODES:
        raise ValueError(f"unknown cls mode {mode!r}; expected one of {CLS_MODES}")
    return 2 if mode == "scale-wise" else 1


def cls_mode_of(cfg: ModelConfig) -> str:
    return "scale-wise" if cfg.num_cls_tokens == 2 else "scale-shared"


def scale_cls_index(cfg: ModelConfig, scale: int) -> int:
    """CLS token that feeds the classifier at ``scale`` (1 or 2)."""
    return scale - 1 if cfg.num_cls_tokens == 2 else 0


@dataclass
class RamsModel:
    cfg: ModelConfig
    params: Params
    # counts proposal calls; inference must leave it untouched
    proposal_calls: int = field(default=0, compare=False)

    @classmethod
    def create(cls, cfg: ModelConfig, seed=0, dtype=np.float32) -> RamsModel:
        return cls(cfg, init_params(cfg, seed, dtype))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}


@dataclass
class TwoScaleOutput:
    logits1: Tensor
    logits2: Tensor
    loss_s1: Tensor
    loss_s2: Tensor
    loss_total: Tensor
    regions: list[PixelRegion]
    masks: list[PatchMask | None]
    fallback: list[bool]


def build_sequence_scalewise(patch_tokens: Tensor, cls_token: Tensor, pos_embed: Tensor, mode: str) -> TokenSequence:
    """Prepend two CLS tokens (scale-wise) or one shared CLS token (scale-shared)."""
    c = cls_tokens_for(mode)
    if cls_token.shape[0] != c:
        raise ValueError(f"{mode} needs {c} CLS tokens, parameters hold {cls_token.shape[0]}")
    return build_sequence(patch_tokens, cls_token, pos_embed)


def _as_batch(images) -> np.ndarray:
    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    return arr[None] if arr.ndim == 3 else arr


def scale_forward(model: RamsModel, images: np.ndarray, scale: int, rng=None):
    seq = tokenize(images, model.cfg, model.params)
    final, stack = forward_backbone(seq, model.params, model.cfg, rng)
    return classify(final, model.params, scale_cls_index(model.cfg, scale)), stack


def snap_to_patches(box: Sequence[int], patch: int, size: int) -> PixelRegion:
    """Smallest patch-aligned region covering the half-open pixel box."""
    x0, y0, x1, y1 = box
    return PixelRegion(
        (x0 // patch) * patch,
        (y0 // patch) * patch,
        min(-(-x1 // patch) * patch, size),
        min(-(-y1 // patch) * patch, size),
    )


def random_region(rng: np.random.Generator, cfg: ModelConfig, size_pool: Sequence[tuple[int, int]] | None = None) -> PixelRegion:
    """Uniformly placed patch-aligned box; its (rows, cols) extent is drawn from ``size_pool``."""
    g = cfg.grid
    if size_pool:
        h, w = size_pool[int(rng.integers(len(size_pool)))]
    else:
        h, w = int(rng.integers(1, g + 1)), int(rng.integers(1, g + 1))
    r0 = int(rng.integers(0, g - h + 1))
    c0 = int(rng.integers(0, g - w + 1))
    p = cfg.patch_size
    return PixelRegion(c0 * p, r0 * p, (c0 + w) * p, (r0 + h) * p)


def region_extent(region: PixelRegion, cfg: ModelConfig) -> tuple[int, int]:
    """(rows, cols) of a patch-aligned region, in patches."""
    return region.height // cfg.patch_size, region.width // cfg.patch_size


def propose_regions(model: RamsModel, images: np.ndarray, stack, alpha: float):
    """DPPM per image with the full-image fallback; returns proposals."""
    model.proposal_calls += 1
    return [dppm.propose_or_full(stack.weights[i], images[i], model.cfg, alpha) for i in range(len(images))]


def forward_two_scale(
    model: RamsModel,
    images,
    labels,
    alpha: float = 1.3,
    lam: float = 1.0,
    *,
    proposal: str = "dppm",
    boxes: Sequence[Sequence[int]] | None = None,
    regions: Sequence[PixelRegion] | None = None,
    rng: np.random.Generator | None = None,
    random_sizes: Sequence[tuple[int, int]] | None = None,
    dropout_rng: np.random.Generator | None = None,
) -> TwoScaleOutput:
    """Scale-1 pass, region proposal, scale-2 pass on the zoomed crop, joint loss.

    ``regions`` overrides the proposal step entirely (used by gradient
    checks to hold the discrete crop fixed). ``proposal='random'`` keeps each
    image's DPPM box extent (or draws one from ``random_sizes``) and places it
    uniformly with ``rng``; ``proposal='fixed'`` uses ``boxes`` snapped outward
    to the patch grid.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if proposal not in PROPOSALS:
        raise ValueError(f"unknown proposal {proposal!r}")
    cfg = model.cfg
    imgs = _as_batch(images)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    logits1, stack = scale_forward(model, imgs, 1, dropout_rng)
    loss1 = cross_entropy(logits1, labels)

    masks: list[PatchMask | None] = [None] * len(imgs)
    fallback = [False] * len(imgs)
    if regions is not None:
        regs = list(regions)
    elif proposal == "dppm":
        props = propose_regions(model, imgs, stack, alpha)
        regs = [p.region for p in props]
        masks = [p.mask for p in props]
        fallback = [p.fallback for p in props]
    elif proposal == "random":
        if rng is None:
            raise ValueError("random proposal needs an rng")
        if random_sizes is None:
            # same box extents DPPM would have produced, placed uniformly at random
            props = propose_regions(model, imgs, stack, alpha)
            regs = [random_region(rng, cfg, [region_extent(p.region, cfg)]) for p in props]
        else:
            regs = [random_region(rng, cfg, random_sizes) for _ in imgs]
    else:
        if boxes is None:
            raise ValueError("fixed proposal needs ground-truth boxes")
        regs = [snap_to_patches(b, cfg.patch_size, cfg.image_size) for b in boxes]
    crops = np.stack([dppm.crop_zoom(img, r, cfg.image_size) for img, r in zip(imgs, regs)])

    if lam == 0:
        with no_grad():
            logits2, _ = scale_forward(model, crops, 2)
            loss2 = cross_entropy(logits2, labels)
        total = loss1
    else:
        logits2, _ = scale_forward(model, crops, 2, dropout_rng)
        loss2 = cross_entropy(logits2, labels)
        total = loss1 + loss2 * lam
    return TwoScaleOutput(logits1, logits2, loss1, loss2, total, regs, masks, fallback)


def predict(model: RamsModel, images) -> tuple[np.ndarray, np.ndarray]:
    """Scale-1-only inference; ties resolve to the lowest class index."""
    imgs = _as_batch(images)
    with no_grad():
        logits, _ = scale_forward(model, imgs, 1)
    return np.argmax(logits.data, axis=1), logits.data


def propose_batch(model: RamsModel, images, alpha: float) -> list[dppm.Proposal]:
    """Scale-1 forward followed by DPPM on every image (no gradients)."""
    imgs = _as_batch(images)
    with no_grad():
        _, stack = scale_forward(model, imgs, 1)
    return propose_regions(model, imgs, stack, alpha)
