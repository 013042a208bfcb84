"""Contrastive and output losses driving data generation and the quantization search.

Similarities inside the contrastive loss are cosines (dot products of
L2-normalized vectors) so the temperature keeps one meaning across layer
widths.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.07
    neighborhood: int = 3
    top_n: int = 4

    def __post_init__(self):
        if not self.tau > 0:
            raise ContractError("tau must be positive")
        if self.neighborhood < 1 or self.neighborhood % 2 == 0:
            raise ContractError("neighborhood side length must be a positive odd integer")
        if not 1 <= self.top_n < self.neighborhood ** 2 - 1:
            raise ContractError("top_n must leave at least one negative in the neighborhood")


@dataclass(frozen=True)
class TargetSpec:
    """Random class-probability rows; ``labels`` is the per-row argmax."""

    values: np.ndarray
    kind: str = "classification"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or (v < 0).any() or not np.allclose(v.sum(1), 1.0, atol=1e-12):
            raise ContractError("targets must be non-negative rows summing to 1")
        object.__setattr__(self, "values", v)

    @property
    def labels(self) -> np.ndarray:
        return self.values.argmax(axis=1)

    @classmethod
    def random(cls, batch: int, num_classes: int, rng: np.random.Generator) -> "TargetSpec":
        return cls(rng.dirichlet(np.ones(num_classes), size=batch))


# -- the contrastive term -------------------------------------------------
def info_nce(anchor, positives, negatives, tau: float) -> Tensor:
    """-log( Σ_pos e^{a·p/τ} / (Σ_pos e^{a·p/τ} + Σ_neg e^{a·n/τ}) ), log-sum-exp stabilized."""
    a = T.as_tensor(anchor)
    pos = T.as_tensor(positives)
    neg = T.as_tensor(negatives)
    if pos.ndim != 2 or pos.shape[0] == 0:
        raise ContractError("info_nce needs at least one positive")
    if neg.ndim != 2 or neg.shape[0] == 0:
        raise ContractError("info_nce needs at least one negative")
    if not (pos.shape[1] == neg.shape[1] == a.shape[-1]):
        raise DimensionError(f"info_nce: anchor {a.shape}, positives {pos.shape}, negatives {neg.shape}")
    sims = T.concat([pos, neg], axis=0) @ T.reshape(a, (a.shape[-1], 1))
    sims = T.reshape(sims, (sims.shape[0],)) / tau
    is_pos = np.arange(sims.shape[0]) < pos.shape[0]
    return contrastive_from_similarities(sims, is_pos, np.ones_like(is_pos))


def contrastive_from_similarities(sims, pos_mask, cand_mask) -> Tensor:
    """Row-wise contrastive loss from already temperature-scaled similarities.

    The last axis indexes samples; ``pos_mask`` marks positives and
    ``cand_mask`` marks positives plus negatives.
    """
    return T.masked_logsumexp(sims, cand_mask, axis=-1) - T.masked_logsumexp(sims, pos_mask, axis=-1)


# -- patch neighborhoods --------------------------------------------------
@lru_cache(maxsize=64)
def neighborhood(k: int, grid: int, size: int) -> tuple:
    """Flat indices of the size×size window around patch ``k``, minus ``k``, clipped at borders."""
    r, c = divmod(k, grid)
    h = size // 2
    out = []
    for rr in range(max(0, r - h), min(grid, r + h + 1)):
        for cc in range(max(0, c - h), min(grid, c + h + 1)):
            idx = rr * grid + cc
            if idx != k:
                out.append(idx)
    return tuple(out)


def _cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    return (a / np.maximum(na, 1e-12)) @ np.swapaxes(b / np.maximum(nb, 1e-12), -1, -2)


def select_patches(anchor: np.ndarray, fp_patches: np.ndarray, k: int, grid: int,
                   cfg: ContrastiveConfig) -> tuple[list, list]:
    """Split the neighborhood of patch ``k`` into positives and negatives.

    ``anchor`` is the quantized model's patch k (length D); ``fp_patches``
    (N, D) are the full-precision patches of the same layer and head.  The
    ``top_n`` neighbors with the highest cosine to the anchor are positives
    (ties go to the lower index); the rest are negatives.
    """
    cands = neighborhood(k, grid, cfg.neighborhood)
    if len(cands) < 2:
        raise ContractError(f"patch {k}: neighborhood has {len(cands)} candidates, need at least 2")
    n = min(cfg.top_n, len(cands) - 1)
    rho = _cosine(np.asarray(anchor)[None, :], np.asarray(fp_patches)[list(cands)])[0]
    order = np.argsort(-rho, kind="stable")
    chosen = {cands[o] for o in order[:n]}
    return sorted(chosen), [c for c in cands if c not in chosen]


def patch_masks(sims: np.ndarray, grid: int, cfg: ContrastiveConfig) -> tuple[np.ndarray, np.ndarray]:
    """Positive and candidate masks for every anchor, vectorized over leading axes.

    ``sims[..., k, m]`` is the cosine between anchor patch k and FP patch m.
    """
    N = grid * grid
    pos = np.zeros(sims.shape, dtype=bool)
    cand = np.zeros(sims.shape, dtype=bool)
    for k in range(N):
        cands = np.array(neighborhood(k, grid, cfg.neighborhood))
        if len(cands) < 2:
            raise ContractError(f"patch {k}: neighborhood has {len(cands)} candidates, need at least 2")
        n = min(cfg.top_n, len(cands) - 1)
        vals = sims[..., k, cands]
        order = np.argsort(-vals, axis=-1, kind="stable")[..., :n]
        chosen = cands[order]
        cand[..., k, cands] = True
        np.put_along_axis(pos[..., k, :], chosen, True, axis=-1)
    return pos, cand


# -- output loss ----------------------------------------------------------
def output_loss(q_out, fp_out, targets) -> Tensor:
    """(1/n_c)(‖Q - T‖₁ + ‖FP - T‖₁), averaged over the batch."""
    q, f = T.as_tensor(q_out), T.as_tensor(fp_out)
    t = targets.values if isinstance(targets, TargetSpec) else np.asarray(targets, dtype=np.float64)
    if q.shape != f.shape or q.shape != t.shape or q.ndim != 2:
        raise DimensionError(f"output_loss: shapes {q.shape}, {f.shape}, targets {t.shape}")
    B, nc = t.shape
    return (T.l1_norm(q - t) + T.l1_norm(f - t)) / (nc * B)


# -- stage losses ---------------------------------------------------------
def patch_contrastive_loss(q_trace, fp_trace, grid: int, cfg: ContrastiveConfig) -> Tensor:
    """Patch-level contrastive term over every layer, head and anchor patch.

    Summed over layers and heads; averaged over anchor patches and the batch.
    """
    total = None
    for q_heads, fp_heads in zip(q_trace.heads, fp_trace.heads):
        a = T.normalize(q_heads, axis=-1)
        f = T.normalize(fp_heads, axis=-1)
        sims = a @ T.transpose(f, (0, 1, 3, 2))
        pos, cand = patch_masks(sims.data, grid, cfg)
        rows = contrastive_from_similarities(sims / cfg.tau, pos, cand)
        B, _, N = rows.shape
        term = T.tsum(rows) / (B * N)
        total = term if total is None else total + term
    return total


def stage1_loss(q_trace, fp_trace, q_logits, fp_logits, targets: TargetSpec,
                cfg: ContrastiveConfig, grid: int) -> Tensor:
    """Sample-generation loss: patch contrastive term plus output loss (differentiable)."""
    lo = output_loss(T.softmax(q_logits, axis=-1), T.softmax(fp_logits, axis=-1), targets)
    return patch_contrastive_loss(q_trace, fp_trace, grid, cfg) + lo


def pooled_layer_outputs(trace) -> list[np.ndarray]:
    """Each layer output (B, N, d) averaged over the embedding axis to (B, N)."""
    return [np.asarray(o.data if isinstance(o, Tensor) else o).mean(axis=-1) for o in trace.layer_outputs]


def _np_logsumexp(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    masked = np.where(mask, x, -np.inf)
    m = masked.max(axis=-1, keepdims=True)
    return (np.log(np.where(mask, np.exp(masked - m), 0.0).sum(-1, keepdims=True)) + m)[..., 0]


def batch_contrastive_loss(q_pooled, fp_pooled, labels: np.ndarray, cfg: ContrastiveConfig) -> float:
    """Batch-level contrastive term: anchors are quantized outputs, positives share the label."""
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ContractError("all targets share one label, so no negatives exist; regenerate the targets")
    pos = labels[:, None] == labels[None, :]
    cand = np.ones_like(pos)
    total = 0.0
    for q, f in zip(q_pooled, fp_pooled):
        sims = _cosine(q, f) / cfg.tau
        total += float(np.sum(_np_logsumexp(sims, cand) - _np_logsumexp(sims, pos)))
    return total


def _np_softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def stage2_fitness(q_trace, fp_trace, q_logits, fp_logits, targets: TargetSpec,
                   cfg: ContrastiveConfig) -> float:
    """Search fitness: batch contrastive term over all layers plus output loss."""
    qz = np.asarray(q_logits.data if isinstance(q_logits, Tensor) else q_logits)
    fz = np.asarray(fp_logits.data if isinstance(fp_logits, Tensor) else fp_logits)
    if qz.shape[0] < 2:
        raise ContractError("fitness needs a batch of at least 2 samples")
    c2 = batch_contrastive_loss(pooled_layer_outputs(q_trace), pooled_layer_outputs(fp_trace),
                                targets.labels, cfg)
    t = targets.values
    lo = (np.abs(_np_softmax(qz) - t).sum() + np.abs(_np_softmax(fz) - t).sum()) / (t.shape[1] * t.shape[0])
    return c2 + float(lo)
