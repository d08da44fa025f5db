"""SGD with warm-up + cosine schedule, the joint training loop, evaluation and ablations."""

from __future__ import annotations

import dataclasses
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, localization_iou
from .model import (
    CLS_MODES,
    PROPOSALS,
    RamsModel,
    cls_mode_of,
    cls_tokens_for,
    forward_two_scale,
    predict,
    propose_batch,
    random_region,
    region_extent,
    snap_to_patches,
)
from .tensor import NonFiniteError, Tensor, backward, bilinear_resize, load_tensors, save_tensors, zero_grads
from .vit import ModelConfig

log = logging.getLogger(__name__)

MANIFEST_KEY = "__manifest__"
METRIC_COLUMNS = ("step", "lr", "lossTotal", "lossS1", "lossS2", "evalAcc", "meanIoU")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 16
    total_steps: int = 200
    warmup_steps: int = 20
    seed: int = 0
    alpha: float = 1.3
    lam: float = 1.0
    cls_mode: str = "scale-wise"
    proposal: str = "dppm"
    clip_norm: float = 0.0
    augment: bool = False
    eval_every: int = 0  # 0 -> max(1, total_steps // 20)
    eval_batch: int = 128

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.total_steps < 0 or not 0 <= self.warmup_steps <= max(self.total_steps, 0):
            raise ValueError("need 0 <= warmup_steps <= total_steps")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lam < 0 or self.alpha <= 0:
            raise ValueError("need lam >= 0 and alpha > 0")
        if self.cls_mode not in CLS_MODES:
            raise ValueError(f"cls_mode must be one of {CLS_MODES}")
        if self.proposal not in PROPOSALS:
            raise ValueError(f"proposal must be one of {PROPOSALS}")

    @property
    def eval_interval(self) -> int:
        return self.eval_every or max(1, self.total_steps // 20)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up to ``base_lr``, then cosine decay towards zero at ``total_steps``."""
    if not 0 <= step < cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps})")
    if step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def sgd_step(params, grads, velocity, lr: float, momentum: float, weight_decay: float = 0.0):
    """Heavy-ball SGD: ``v = m v + g + wd p``; ``p = p - lr v``. Returns new (params, velocity)."""
    new_p, new_v = [], []
    for p, g, v in zip(params, grads, velocity, strict=True):
        p = np.asarray(p)
        g = np.zeros_like(p) if g is None else np.asarray(g)
        if g.shape != p.shape or np.shape(v) != p.shape:
            raise ValueError(f"shape mismatch in sgd_step: {p.shape}, {g.shape}, {np.shape(v)}")
        step = momentum * v + g
        if weight_decay:
            step = step + weight_decay * p
        step = step.astype(p.dtype, copy=False)
        new_v.append(step)
        new_p.append((p - p.dtype.type(lr) * step).astype(p.dtype, copy=False))
    return new_p, new_v


def clip_grad_norm(grads: list[np.ndarray | None], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads if g is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for i, g in enumerate(grads):
            if g is not None:
                grads[i] = (g * scale).astype(g.dtype)
    return total


def augment_batch(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random shifted crop from an edge-padded image, then random horizontal flip."""
    out = np.empty_like(images)
    s = images.shape[1]
    for i, img in enumerate(images):
        padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
        y, x = rng.integers(0, 2 * pad + 1, size=2)
        crop = padded[y : y + s, x : x + s]
        out[i] = crop[:, ::-1] if rng.random() < 0.5 else crop
    return out


@dataclass
class TrainResult:
    model: RamsModel
    metrics: list[dict] = field(default_factory=list)
    manifest: dict[str, str] = field(default_factory=dict)


def model_config_for(cfg: ModelConfig, tcfg: TrainConfig) -> ModelConfig:
    return dataclasses.replace(cfg, num_cls_tokens=cls_tokens_for(tcfg.cls_mode))


def train(
    model_cfg: ModelConfig,
    dataset: Dataset,
    cfg: TrainConfig,
    test_set: Dataset | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Joint two-scale training; a deterministic function of (configs, dataset)."""
    model_cfg = model_config_for(model_cfg, cfg)
    if dataset.image_size != model_cfg.image_size:
        raise ValueError(f"dataset resolution {dataset.image_size} != model image_size {model_cfg.image_size}")
    if cfg.proposal == "fixed" and dataset.boxes is None:
        raise ValueError("fixed proposal needs a dataset with boxes")
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    model = RamsModel.create(model_cfg, np.random.default_rng(seeds[0]))
    order_rng = np.random.default_rng(seeds[1])
    prop_rng = np.random.default_rng(seeds[2])
    aug_rng = np.random.default_rng(seeds[3])
    drop_rng = aug_rng if model_cfg.dropout > 0 else None

    params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    metrics: list[dict] = []
    n = len(dataset)
    perm = order_rng.permutation(n)
    cursor = 0
    for step in range(cfg.total_steps):
        if cursor + cfg.batch_size > n:
            perm, cursor = order_rng.permutation(n), 0
        idx = np.sort(perm[cursor : cursor + cfg.batch_size]) if n >= cfg.batch_size else perm
        cursor += cfg.batch_size
        images = dataset.images[idx]
        if cfg.augment:
            images = augment_batch(images, aug_rng)
        boxes = None if dataset.boxes is None else dataset.boxes[idx]
        lr = lr_at(step, cfg)
        try:
            out = forward_two_scale(
                model, images, dataset.labels[idx], cfg.alpha, cfg.lam,
                proposal=cfg.proposal, boxes=boxes, rng=prop_rng, dropout_rng=drop_rng,
            )
            backward(out.loss_total)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"non-finite value at step {step} (lr={lr:.3g}): {exc}") from exc
        grads = [p.grad for p in params]
        if cfg.clip_norm > 0:
            clip_grad_norm(grads, cfg.clip_norm)
        new_p, velocity = sgd_step([p.data for p in params], grads, velocity, lr, cfg.momentum, cfg.weight_decay)
        for p, v in zip(params, new_p):
            p.data = v
        zero_grads(params)

        row = {
            "step": step,
            "lr": lr,
            "lossTotal": out.loss_total.item(),
            "lossS1": out.loss_s1.item(),
            "lossS2": out.loss_s2.item(),
            "evalAcc": math.nan,
            "meanIoU": math.nan,
        }
        if test_set is not None and ((step + 1) % cfg.eval_interval == 0 or step + 1 == cfg.total_steps):
            row["evalAcc"], row["meanIoU"] = evaluate(model, test_set, cfg.alpha, cfg.eval_batch)
        metrics.append(row)
        if on_step is not None:
            on_step(row)
    return TrainResult(model, metrics, manifest_for(model_cfg, cfg))


# ---------------------------------------------------------------- evaluation
def _batches(n: int, size: int):
    for lo in range(0, n, size):
        yield slice(lo, min(n, lo + size))


def evaluate(model: RamsModel, test_set: Dataset, alpha: float = 1.3, batch: int = 128) -> tuple[float, float]:
    """Scale-1 accuracy and mean DPPM IoU against ground-truth boxes (NaN without boxes)."""
    if len(test_set) == 0:
        raise ValueError("empty test set")
    correct = 0
    ious: list[float] = []
    for sl in _batches(len(test_set), batch):
        pred, _ = predict(model, test_set.images[sl])
        correct += int(np.sum(pred == test_set.labels[sl]))
        if test_set.boxes is not None:
            props = propose_batch(model, test_set.images[sl], alpha)
            ious.extend(localization_iou(p.region, b) for p, b in zip(props, test_set.boxes[sl]))
    return correct / len(test_set), float(np.mean(ious)) if ious else math.nan


def accuracy(pred, labels) -> float:
    pred, labels = np.asarray(pred), np.asarray(labels)
    if pred.size == 0:
        raise ValueError("empty prediction set")
    return float(np.mean(pred == labels))


def proposal_ious(model: RamsModel, test_set: Dataset, alpha: float, kind: str = "dppm", seed: int = 0, batch: int = 128) -> np.ndarray:
    """Per-image IoU of DPPM, Random (DPPM extent, random placement) or FixedBox regions."""
    if test_set.boxes is None:
        raise ValueError("proposal IoU needs ground-truth boxes")
    cfg = model.cfg
    rng = np.random.default_rng(seed)
    out = []
    for sl in _batches(len(test_set), batch):
        boxes = test_set.boxes[sl]
        if kind == "fixed":
            regions = [snap_to_patches(b, cfg.patch_size, cfg.image_size) for b in boxes]
        else:
            props = propose_batch(model, test_set.images[sl], alpha)
            regions = [p.region for p in props]
            if kind == "random":
                regions = [random_region(rng, cfg, [region_extent(r, cfg)]) for r in regions]
            elif kind != "dppm":
                raise ValueError(f"unknown proposal kind {kind!r}")
        out.extend(localization_iou(r, b) for r, b in zip(regions, boxes))
    return np.asarray(out)


# ---------------------------------------------------------------- checkpoints
def manifest_for(model_cfg: ModelConfig, tcfg: TrainConfig | None = None, **extra) -> dict[str, str]:
    m = {"mode": cls_mode_of(model_cfg)}
    if tcfg is not None:
        m["alpha"] = repr(tcfg.alpha)
        m["lambda"] = repr(tcfg.lam)
        m["proposal"] = tcfg.proposal
        m["seed"] = str(tcfg.seed)
    for f in dataclasses.fields(model_cfg):
        m[f.name] = repr(getattr(model_cfg, f.name))
    m.update({k: str(v) for k, v in extra.items()})
    return m


def encode_manifest(manifest: dict[str, str]) -> np.ndarray:
    """UTF-8 ``key=value`` lines carried as one float32 per byte."""
    text = "".join(f"{k}={v}\n" for k, v in manifest.items())
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def decode_manifest(arr: np.ndarray) -> dict[str, str]:
    text = np.asarray(arr).astype(np.uint8).tobytes().decode("utf-8")
    out = {}
    for line in text.splitlines():
        k, v = line.split("=", 1)
        out[k] = v
    return out


def save_checkpoint(path: str | Path, model: RamsModel, manifest: dict[str, str]) -> None:
    entries: dict[str, np.ndarray] = {MANIFEST_KEY: encode_manifest(manifest)}
    entries.update(model.state())
    save_tensors(path, entries)


def _config_from_manifest(m: dict[str, str]) -> ModelConfig:
    kwargs = {}
    for f in dataclasses.fields(ModelConfig):
        raw = m[f.name]
        kwargs[f.name] = float(raw) if f.type in ("float", float) else int(raw)
    return ModelConfig(**kwargs)


def load_checkpoint(path: str | Path) -> tuple[RamsModel, dict[str, str]]:
    entries = load_tensors(path)
    if MANIFEST_KEY not in entries:
        raise ValueError(f"{path} has no manifest entry")
    manifest = decode_manifest(entries.pop(MANIFEST_KEY))
    cfg = _config_from_manifest(manifest)
    fresh = RamsModel.create(cfg)
    missing = set(fresh.params) ^ set(entries)
    if missing:
        raise ValueError(f"checkpoint parameters do not match config: {sorted(missing)}")
    params = {}
    for name, ref in fresh.params.items():
        if entries[name].shape != ref.shape:
            raise ValueError(f"{name}: shape {entries[name].shape} != expected {ref.shape}")
        params[name] = Tensor(entries[name], requires_grad=True)
    return RamsModel(cfg, params), manifest


def write_metrics_tsv(path: str | Path, rows: Sequence[dict]) -> None:
    lines = ["\t".join(METRIC_COLUMNS)]
    for r in rows:
        lines.append("\t".join(str(r["step"]) if c == "step" else repr(float(r[c])) for c in METRIC_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- ablations
ABLATION_KINDS = ("alpha-sweep", "proposal-compare", "cls-mode", "patch-size", "resolution")
DEFAULT_GRIDS = {
    "alpha-sweep": (1.1, 1.2, 1.3, 1.4),
    "proposal-compare": ("DPPM", "Random", "FixedBox"),
    "cls-mode": ("scale-wise", "scale-shared"),
    "patch-size": (16, 32),
    "resolution": (32, 64),
}
_PROPOSAL_ROWS = {"DPPM": "dppm", "Random": "random", "FixedBox": "fixed"}


@dataclass
class AblationReport:
    kind: str
    rows: list[dict]

    def table(self) -> str:
        header = ["variant", "accuracy", "meanIoU"]
        body = [[str(r["variant"]), f"{r['accuracy']:.4f}", f"{r['meanIoU']:.4f}"] for r in self.rows]
        widths = [max(len(x[i]) for x in [header, *body]) for i in range(3)]
        fmt = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()  # noqa: E731
        rule = "  ".join("-" * w for w in widths)
        return "\n".join([f"# {self.kind}", fmt(header), rule, *(fmt(b) for b in body)]) + "\n"

    def tsv(self) -> str:
        lines = ["variant\taccuracy\tmeanIoU"]
        lines += [f"{r['variant']}\t{r['accuracy']!r}\t{r['meanIoU']!r}" for r in self.rows]
        return "\n".join(lines) + "\n"


def resize_dataset(ds: Dataset, size: int) -> Dataset:
    if ds.image_size == size:
        return ds
    scale = size / ds.image_size
    images = np.stack([bilinear_resize(img, size, size) for img in ds.images]).astype(np.float32)
    boxes = None
    if ds.boxes is not None:
        boxes = ds.boxes.astype(np.float64) * scale
        boxes = np.stack([np.floor(boxes[:, 0]), np.floor(boxes[:, 1]), np.ceil(boxes[:, 2]), np.ceil(boxes[:, 3])], axis=1)
        boxes = np.clip(boxes, 0, size).astype(np.int64)
    return Dataset(images, ds.labels, boxes)


def run_ablation(
    kind: str,
    grid: Sequence | None,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_set: Dataset,
    test_set: Dataset,
) -> AblationReport:
    """One training run per grid point with a shared seed; reports scale-1 accuracy and IoU."""
    if kind not in ABLATION_KINDS:
        raise ValueError(f"unknown ablation kind {kind!r}; expected one of {ABLATION_KINDS}")
    grid = list(DEFAULT_GRIDS[kind] if grid is None else grid)
    if not grid:
        raise ValueError("ablation grid is empty")
    rows = []
    for value in grid:
        mcfg, tcfg, tr, te = model_cfg, train_cfg, train_set, test_set
        iou_kind = "dppm"
        if kind == "alpha-sweep":
            tcfg = dataclasses.replace(tcfg, alpha=float(value))
        elif kind == "proposal-compare":
            if value not in _PROPOSAL_ROWS:
                raise ValueError(f"proposal-compare rows are {tuple(_PROPOSAL_ROWS)}")
            iou_kind = _PROPOSAL_ROWS[value]
            tcfg = dataclasses.replace(tcfg, proposal=iou_kind)
        elif kind == "cls-mode":
            tcfg = dataclasses.replace(tcfg, cls_mode=str(value))
        elif kind == "patch-size":
            mcfg = dataclasses.replace(mcfg, patch_size=int(value))
        else:
            size = int(value)
            mcfg = dataclasses.replace(mcfg, image_size=size)
            tr, te = resize_dataset(train_set, size), resize_dataset(test_set, size)
        log.info("ablation %s: training variant %s", kind, value)
        result = train(mcfg, tr, tcfg)
        acc, _ = evaluate(result.model, te, tcfg.alpha, tcfg.eval_batch)
        miou = (
            float(proposal_ious(result.model, te, tcfg.alpha, iou_kind, seed=tcfg.seed).mean())
            if te.boxes is not None
            else math.nan
        )
        rows.append({"variant": value, "accuracy": acc, "meanIoU": miou})
    return AblationReport(kind, rows)
