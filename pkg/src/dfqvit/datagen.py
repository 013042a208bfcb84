"""Synthetic calibration data: Gaussian noise refined by gradient descent on the generation loss."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ContractError, NumericalError
from .losses import ContrastiveConfig, TargetSpec, stage1_loss
from .vit import ViTConfig

logger = logging.getLogger(__name__)

INIT_MEAN = 0.5
INIT_STD = 0.25


@dataclass
class SyntheticBatch:
    images: np.ndarray  # (B, H, W, C), always within [0, 1]
    targets: TargetSpec
    generation_count: int = 0
    loss_trace: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)


def init_batch(B: int, config: ViTConfig, seed: int) -> SyntheticBatch:
    """Clamped Gaussian images plus random probability targets with at least two labels."""
    if B < 2:
        raise ContractError("synthetic batch needs at least 2 images")
    rng = np.random.default_rng(seed)
    shape = (B, config.image_size, config.image_size, config.channels)
    images = np.clip(rng.normal(INIT_MEAN, INIT_STD, shape), 0.0, 1.0)
    if config.num_classes < 2:
        raise ContractError("need at least 2 classes for label-diverse targets")
    while True:
        targets = TargetSpec.random(B, config.num_classes, rng)
        if len(np.unique(targets.labels)) >= 2:
            break
    return SyntheticBatch(images, targets)


def generation_loss(images, fp_model, q_model, targets: TargetSpec, cfg: ContrastiveConfig):
    """Differentiable generation loss of ``images`` (a Tensor) through both frozen models."""
    fp_logits, fp_trace = fp_model.forward(images, trace=True)
    q_logits, q_trace = q_model.forward(images, trace=True)
    return stage1_loss(q_trace, fp_trace, q_logits, fp_logits, targets, cfg, fp_model.config.grid)


def refine(batch: SyntheticBatch, fp_model, q_model, iters: int, lr: float = 0.05,
           cfg: ContrastiveConfig = ContrastiveConfig()) -> SyntheticBatch:
    """Run ``iters`` plain gradient-descent steps on the images, clamping to [0, 1] each step.

    Returns a new batch; the input batch and both models are left untouched.
    """
    images = batch.images.copy()
    trace = list(batch.loss_trace)
    for step in range(iters):
        x = T.Tensor(images, requires_grad=True)
        loss = generation_loss(x, fp_model, q_model, batch.targets, cfg)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericalError(
                f"generation loss became {value} at step {step}",
                state={"step": step, "generation_count": batch.generation_count + step,
                       "loss_trace": trace[-10:], "pixel_min": float(images.min()),
                       "pixel_max": float(images.max())})
        loss.backward()
        trace.append(value)
        images = np.clip(images - lr * x.grad, 0.0, 1.0)
    return replace(batch, images=images, generation_count=batch.generation_count + iters,
                   loss_trace=trace)


def warm_refresh(batch: SyntheticBatch, fp_model, q_model, G: int, lr: float = 0.05,
                 cfg: ContrastiveConfig = ContrastiveConfig()) -> SyntheticBatch:
    """Continue refining an already generated batch for ⌊G/2⌋ steps."""
    if batch.generation_count <= 0:
        raise ContractError("warm_refresh needs a batch that has been refined at least once")
    return refine(batch, fp_model, q_model, G // 2, lr, cfg)


def dump_images(batch: SyntheticBatch, directory) -> Path:
    """Write each image as binary PPM (3 channels) or PGM (1 channel) plus ``manifest.json``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, img in enumerate(batch.images):
        H, W, C = img.shape
        pix = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
        if C == 3:
            name, magic, body = f"img_{i:03d}.ppm", b"P6", pix.tobytes()
        elif C == 1:
            name, magic, body = f"img_{i:03d}.pgm", b"P5", pix[..., 0].tobytes()
        else:
            raise ContractError(f"cannot dump {C}-channel images as PPM/PGM")
        (out / name).write_bytes(magic + f"\n{W} {H}\n255\n".encode() + body)
        entries.append({"file": name, "label": int(batch.targets.labels[i]),
                        "target": batch.targets.values[i].tolist()})
    manifest = {"generation_count": batch.generation_count, "images": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out
