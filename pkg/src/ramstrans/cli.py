"""Command-line entry point: synth, train, eval, propose, gradcheck, ablate.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Config files are UTF-8 ``key=value`` lines; flags override file values,
which override defaults.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, dppm
from .gradcheck import TINY, gradcheck_model
from .model import CLS_MODES, PROPOSALS, propose_batch
from .train import (
    ABLATION_KINDS,
    TrainConfig,
    evaluate,
    load_checkpoint,
    run_ablation,
    save_checkpoint,
    train,
    write_metrics_tsv,
)
from .vit import ModelConfig

log = logging.getLogger("ramstrans")


class UsageError(Exception):
    """Bad flags or config contents (exit code 2)."""


# ---------------------------------------------------------------- config handling
def _coerce(field: dataclasses.Field, raw: str):
    kind = field.type if isinstance(field.type, str) else field.type.__name__
    try:
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise UsageError(f"bad value for {field.name}: {raw!r}") from exc


def _build(cls, values: dict[str, str], allowed_extra=()):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {k: _coerce(fields[k], v) for k, v in values.items() if k in fields}
    unknown = set(values) - set(fields) - set(allowed_extra)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _read_config(path: str | None) -> dict[str, str]:
    if path is None:
        return {}
    try:
        return data.read_kv_file(path)
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)} - {"num_cls_tokens"}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


def _train_configs(args, image_size: int | None = None) -> tuple[ModelConfig, TrainConfig]:
    values = _read_config(getattr(args, "config", None))
    flag_map = {
        "alpha": "alpha", "lam": "lam", "cls_mode": "cls_mode", "steps": "total_steps",
        "seed": "seed", "lr": "base_lr", "batch_size": "batch_size", "warmup": "warmup_steps",
        "proposal": "proposal",
    }
    for attr, key in flag_map.items():
        v = getattr(args, attr, None)
        if v is not None:
            values[key] = str(v)
    unknown = set(values) - _MODEL_KEYS - _TRAIN_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    mvals = {k: v for k, v in values.items() if k in _MODEL_KEYS}
    if image_size is not None:
        if "image_size" in mvals and int(mvals["image_size"]) != image_size:
            raise UsageError(f"config image_size {mvals['image_size']} does not match data resolution {image_size}")
        mvals["image_size"] = str(image_size)
    tcfg = _build(TrainConfig, {k: v for k, v in values.items() if k in _TRAIN_KEYS})
    mvals.setdefault("num_classes", "4")
    mcfg = _build(ModelConfig, mvals)
    return mcfg, tcfg


# ---------------------------------------------------------------- commands
def cmd_synth(args) -> int:
    values = _read_config(args.spec)
    if args.seed is not None:
        values["seed"] = str(args.seed)
    spec = _build(data.SynthSpec, values)
    train_set, test_set = data.generate(spec)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        data.save_dataset(out, train_set, test_set)
    except OSError as exc:
        print(f"error: cannot write dataset to {out}: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {len(train_set)} train / {len(test_set)} test images to {out}")
    return 0


def _load_data(root: str):
    try:
        return data.load_dataset(root)
    except (FileNotFoundError, ValueError, data.PPMError) as exc:
        raise RuntimeError(f"bad data layout under {root}: {exc}") from exc


def cmd_train(args) -> int:
    train_set, test_set = _load_data(args.data)
    num_classes = int(max(train_set.labels.max(), test_set.labels.max())) + 1
    mcfg, tcfg = _train_configs(args, train_set.image_size)
    if "num_classes" not in _read_config(args.config):
        mcfg = dataclasses.replace(mcfg, num_classes=num_classes)

    def report(row):
        if row["evalAcc"] == row["evalAcc"]:
            log.info("step %d loss %.4f acc %.4f iou %.4f", row["step"], row["lossTotal"], row["evalAcc"], row["meanIoU"])

    result = train(mcfg, train_set, tcfg, test_set, on_step=report)
    save_checkpoint(args.out, result.model, result.manifest)
    metrics = args.metrics or f"{args.out}.metrics.tsv"
    write_metrics_tsv(metrics, result.metrics)
    print(f"checkpoint={args.out} metrics={metrics}")
    return 0


def _load_ckpt(path: str):
    if not Path(path).exists():
        raise RuntimeError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_eval(args) -> int:
    model, manifest = _load_ckpt(args.ckpt)
    ds = data.load_split(args.data, args.split)
    if ds.image_size != model.cfg.image_size:
        raise RuntimeError(f"checkpoint expects {model.cfg.image_size}px images, data has {ds.image_size}px")
    if int(ds.labels.max()) >= model.cfg.num_classes:
        raise RuntimeError("data has more classes than the checkpoint head")
    alpha = args.alpha if args.alpha is not None else float(manifest.get("alpha", 1.3))
    acc, miou = evaluate(model, ds, alpha)
    print(f"accuracy={acc:.6f} meanIoU={miou:.6f}")
    return 0


def cmd_propose(args) -> int:
    model, manifest = _load_ckpt(args.ckpt)
    cfg = model.cfg
    image = data.read_ppm(args.image)
    if image.shape[:2] != (cfg.image_size, cfg.image_size):
        image = dppm.bilinear_resize(image, cfg.image_size, cfg.image_size)
    alpha = args.alpha if args.alpha is not None else float(manifest.get("alpha", 1.3))
    prop = propose_batch(model, image, alpha)[0]
    prefix = args.out
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    Path(f"{prefix}.mask.txt").write_text(dppm.mask_to_text(prop.mask), encoding="utf-8")
    Path(f"{prefix}.region.txt").write_text(prop.region.as_text() + "\n", encoding="utf-8")
    heat = dppm.heatmap_u8(dppm.patch_scores(prop.rollout, cfg))
    heat = np.kron(heat, np.ones((cfg.patch_size, cfg.patch_size), dtype=np.uint8))
    data.write_ppm(np.repeat(heat[:, :, None], 3, axis=2), f"{prefix}.heatmap.ppm")
    data.write_ppm(prop.crop, f"{prefix}.crop.ppm")
    if prop.fallback:
        print("note: empty patch mask; fell back to the full image", file=sys.stderr)
    print(f"region={prop.region.as_text().replace(' ', ',')} patches={int(prop.mask.grid.sum())}")
    return 0


def cmd_gradcheck(args) -> int:
    values = _read_config(args.config)
    extra = ("seed", "samples", "step", "tolerance", "lam", "batch")
    cfg = _build(ModelConfig, {k: v for k, v in values.items() if k not in extra} or {}, extra) if values else TINY
    try:
        opts = {
            "seed": int(values.get("seed", args.seed)),
            "samples": int(values.get("samples", 8)),
            "step": float(values.get("step", 1e-3)),
            "tolerance": float(values.get("tolerance", 1e-3)),
            "lam": float(values.get("lam", 1.0)),
            "batch": int(values.get("batch", 2)),
        }
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    report = gradcheck_model(cfg, corrupt=args.corrupt_grad, **opts)
    print("\n".join(report.lines()))
    return 0 if report.passed else 1


def cmd_ablate(args) -> int:
    grid = None
    if args.grid:
        parts = [g.strip() for g in args.grid.split(",") if g.strip()]
        if args.kind in ("alpha-sweep",):
            grid = [float(g) for g in parts]
        elif args.kind in ("patch-size", "resolution"):
            grid = [int(g) for g in parts]
        else:
            grid = parts
    train_set, test_set = _load_data(args.data)
    mcfg, tcfg = _train_configs(args, train_set.image_size)
    if "num_classes" not in _read_config(args.config):
        num_classes = int(max(train_set.labels.max(), test_set.labels.max())) + 1
        mcfg = dataclasses.replace(mcfg, num_classes=num_classes)
    try:
        report = run_ablation(args.kind, grid, mcfg, tcfg, train_set, test_set)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(report.table(), end="")
    if args.out:
        Path(args.out).write_text(report.tsv(), encoding="utf-8")
    return 0


# ---------------------------------------------------------------- parser
def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--alpha", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--cls-mode", choices=CLS_MODES)
    p.add_argument("--proposal", choices=PROPOSALS)
    p.add_argument("--steps", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ramstrans", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic glyph dataset")
    p.add_argument("--spec", help="key=value SynthSpec file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="joint two-scale training")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics", help="metrics TSV path (default: <out>.metrics.tsv)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="scale-1 accuracy and proposal IoU")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--alpha", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("propose", help="export mask, region, heatmap and crop for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output path prefix")
    p.add_argument("--alpha", type=float)
    p.set_defaults(func=cmd_propose)

    p = sub.add_parser("gradcheck", help="finite-difference check of the two-scale loss")
    p.add_argument("--config", help="key=value ModelConfig overrides plus seed/samples/step/tolerance")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt-grad", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train one model per grid point and tabulate")
    p.add_argument("--kind", required=True, choices=ABLATION_KINDS)
    p.add_argument("--grid", help="comma-separated grid values")
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="write the report TSV here")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
