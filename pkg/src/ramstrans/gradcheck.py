"""End-to-end finite-difference check of the two-scale loss.

Analytic gradients come from the float32 model; the reference is a central
difference of the same loss evaluated on a float64 copy of the parameters.
The crop regions are proposed once and then held fixed, since the proposal
is a discrete decision that gradients do not pass through.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from .dppm import propose_or_full
from .model import RamsModel, forward_two_scale, scale_forward
from .tensor import Tensor, backward, no_grad
from .vit import ModelConfig

TINY = ModelConfig(image_size=32, patch_size=8, embed_dim=32, layers=2, heads=2, num_classes=3, num_cls_tokens=2)


@dataclass
class GradcheckReport:
    errors: dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def lines(self) -> list[str]:
        width = max(len(k) for k in self.errors)
        out = [f"{name.ljust(width)}  {err:.3e}" for name, err in self.errors.items()]
        out.append(f"max_rel_error={self.max_error:.3e} tolerance={self.tolerance:.0e} {'PASS' if self.passed else 'FAIL'}")
        return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """||a - n|| / max(||a||, ||n||, floor).

    The floor keeps gradients that are exactly zero in theory (key biases
    under softmax shift invariance) from turning float32 round-off into a
    relative error of 1.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)


def central_difference(f: Callable[[], float], arr: np.ndarray, flat_idx, h: float) -> np.ndarray:
    """d f / d arr at the given flat positions; ``arr`` is perturbed in place and restored."""
    view = arr.reshape(-1)
    out = np.empty(len(flat_idx))
    for j, i in enumerate(flat_idx):
        orig = view[i]
        view[i] = orig + h
        up = f()
        view[i] = orig - h
        down = f()
        view[i] = orig
        out[j] = (up - down) / (2 * h)
    return out


def gradcheck_model(
    cfg: ModelConfig = TINY,
    seed: int = 0,
    samples: int = 8,
    step: float = 1e-3,
    tolerance: float = 1e-3,
    lam: float = 1.0,
    batch: int = 2,
    corrupt: bool = False,
) -> GradcheckReport:
    """Per-parameter relative error of float32 backward vs float64 central differences.

    ``corrupt`` scales one analytic gradient by 1.5 as a negative control.
    """
    rng = np.random.default_rng(seed)
    model = RamsModel.create(cfg, rng)
    images = rng.random((batch, cfg.image_size, cfg.image_size, 3)).astype(np.float32)
    labels = rng.integers(0, cfg.num_classes, size=batch)

    with no_grad():
        _, stack = scale_forward(model, images, 1)
    regions = [propose_or_full(stack.weights[i], images[i], cfg, 1.0).region for i in range(batch)]

    out = forward_two_scale(model, images, labels, lam=lam, regions=regions)
    backward(out.loss_total)
    analytic = {k: p.grad.astype(np.float64) for k, p in model.params.items()}
    if corrupt:
        analytic["head.weight"] = analytic["head.weight"] * 1.5

    ref = RamsModel(cfg, {k: Tensor(p.data.astype(np.float64), requires_grad=False) for k, p in model.params.items()})
    images64 = images.astype(np.float64)

    def loss() -> float:
        with no_grad():
            return forward_two_scale(ref, images64, labels, lam=lam, regions=regions).loss_total.item()

    errors = {}
    for name, p in ref.params.items():
        k = min(samples, p.size)
        idx = rng.choice(p.size, size=k, replace=False)
        numeric = central_difference(loss, p.data, idx, step)
        errors[name] = relative_error(analytic[name].reshape(-1)[idx], numeric)
    return GradcheckReport(errors, tolerance)
