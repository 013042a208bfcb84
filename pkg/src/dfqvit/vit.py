"""A small Vision Transformer on top of :mod:`dfqvit.tensor`.

Patch tokens only (no class token): tokens are mean-pooled before the
classifier head, so every per-layer activation has exactly N rows, one per
image patch.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, TrainingError
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 16
    channels: int = 3
    patch_size: int = 4
    embed_dim: int = 16
    num_heads: int = 2
    num_layers: int = 2
    mlp_ratio: float = 2.0
    num_classes: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.num_layers < 1 or self.num_classes < 1:
            raise ConfigError("num_layers and num_classes must be >= 1")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2 * self.channels

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


def quantizable_layers(cfg: ViTConfig) -> list[str]:
    """Names of every weight matrix that gets a ⟨bits, scale⟩ pair, in forward order."""
    names = ["patch_embed.weight"]
    for i in range(cfg.num_layers):
        p = f"blocks.{i}."
        names += [p + "attn.q.weight", p + "attn.k.weight", p + "attn.v.weight",
                  p + "attn.proj.weight", p + "mlp.fc1.weight", p + "mlp.fc2.weight"]
    names.append("head.weight")
    return names


def layer_groups(cfg: ViTConfig) -> list[list[int]]:
    """Indices into :func:`quantizable_layers` owned by each transformer layer.

    The patch embedding belongs to the first transformer layer and the
    classifier head to the last.
    """
    groups = []
    for i in range(cfg.num_layers):
        idx = list(range(1 + 6 * i, 1 + 6 * (i + 1)))
        if i == 0:
            idx.insert(0, 0)
        if i == cfg.num_layers - 1:
            idx.append(1 + 6 * cfg.num_layers)
        groups.append(idx)
    return groups


def layer_macs(cfg: ViTConfig) -> dict[str, int]:
    """Multiply-accumulates per image for each quantizable weight matrix."""
    N, d, m = cfg.num_patches, cfg.embed_dim, cfg.mlp_dim
    macs = {"patch_embed.weight": N * cfg.patch_dim * d}
    for i in range(cfg.num_layers):
        p = f"blocks.{i}."
        for w in ("q", "k", "v", "proj"):
            macs[p + f"attn.{w}.weight"] = N * d * d
        macs[p + "mlp.fc1.weight"] = N * d * m
        macs[p + "mlp.fc2.weight"] = N * m * d
    macs["head.weight"] = d * cfg.num_classes
    return macs


class ViTModel:
    """Named parameter tensors plus the config that shapes them."""

    def __init__(self, config: ViTConfig, params: Mapping[str, np.ndarray]):
        self.config = config
        self.params = {k: Tensor(v) for k, v in params.items()}
        expected = param_shapes(config)
        if set(expected) != set(self.params):
            missing = set(expected) ^ set(self.params)
            raise DimensionError(f"parameter set does not match config: {sorted(missing)}")
        for k, shape in expected.items():
            if self.params[k].shape != shape:
                raise DimensionError(f"{k}: expected shape {shape}, got {self.params[k].shape}")

    @classmethod
    def init(cls, config: ViTConfig, seed: int = 0) -> "ViTModel":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in param_shapes(config).items():
            if name.endswith(".gain"):
                params[name] = np.ones(shape)
            elif name.endswith(".bias"):
                params[name] = np.zeros(shape)
            elif name == "pos_embed":
                params[name] = rng.normal(0.0, 0.02, shape)
            else:
                params[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
        return cls(config, params)

    def copy(self) -> "ViTModel":
        return ViTModel(self.config, {k: v.data.copy() for k, v in self.params.items()})

    def numpy_params(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k].data).tobytes())
        return h.hexdigest()

    def forward(self, batch, trace: bool = False):
        return forward(self, batch, trace=trace)

    __call__ = forward


def param_shapes(cfg: ViTConfig) -> dict[str, tuple]:
    d, m = cfg.embed_dim, cfg.mlp_dim
    shapes = {
        "patch_embed.weight": (cfg.patch_dim, d),
        "patch_embed.bias": (d,),
        "pos_embed": (cfg.num_patches, d),
    }
    for i in range(cfg.num_layers):
        p = f"blocks.{i}."
        shapes.update({
            p + "ln1.gain": (d,), p + "ln1.bias": (d,),
            p + "attn.q.weight": (d, d), p + "attn.q.bias": (d,),
            p + "attn.k.weight": (d, d), p + "attn.k.bias": (d,),
            p + "attn.v.weight": (d, d), p + "attn.v.bias": (d,),
            p + "attn.proj.weight": (d, d), p + "attn.proj.bias": (d,),
            p + "ln2.gain": (d,), p + "ln2.bias": (d,),
            p + "mlp.fc1.weight": (d, m), p + "mlp.fc1.bias": (m,),
            p + "mlp.fc2.weight": (m, d), p + "mlp.fc2.bias": (d,),
        })
    shapes.update({"norm.gain": (d,), "norm.bias": (d,),
                   "head.weight": (d, cfg.num_classes), "head.bias": (cfg.num_classes,)})
    return shapes


@dataclass
class ActivationTrace:
    """Intermediate activations of one forward pass.

    ``heads[i]`` has shape (B, h, N, d/h) and holds every head output of
    layer i; ``layer_outputs[i]`` has shape (B, N, d).
    """

    heads: list = field(default_factory=list)
    layer_outputs: list = field(default_factory=list)
    logits: Tensor | None = None

    @property
    def mhsa_head_outputs(self) -> list[list[Tensor]]:
        return [[h[:, j] for j in range(h.shape[1])] for h in self.heads]


def patchify(x: Tensor, cfg: ViTConfig) -> Tensor:
    B = x.shape[0]
    g, p, C = cfg.grid, cfg.patch_size, cfg.channels
    x = T.reshape(x, (B, g, p, g, p, C))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (B, g * g, p * p * C))


def forward(model: ViTModel, batch, trace: bool = False,
            weights: Mapping[str, Tensor] | None = None, act_quant=None):
    """Run the ViT on a (B, H, W, C) batch.

    ``weights`` overrides individual parameters by name (used for quantized
    weights).  ``act_quant`` is an optional per-layer list of ``(gamma, bits)``
    applied as fake quantization to each transformer-layer output.

    Returns ``(logits, trace)``; ``trace`` is None unless requested.
    """
    cfg = model.config
    x = T.as_tensor(batch)
    want = (cfg.image_size, cfg.image_size, cfg.channels)
    if x.ndim != 4 or tuple(x.shape[1:]) != want:
        raise DimensionError(f"forward: batch shape {x.shape} does not match (B, {want[0]}, {want[1]}, {want[2]})")
    P = dict(model.params)
    if weights:
        P.update(weights)
    B, N, d, h, dh = x.shape[0], cfg.num_patches, cfg.embed_dim, cfg.num_heads, cfg.head_dim
    tr = ActivationTrace() if trace else None

    z = patchify(x, cfg) @ P["patch_embed.weight"] + P["patch_embed.bias"] + P["pos_embed"]
    for i in range(cfg.num_layers):
        p = f"blocks.{i}."
        u = T.layernorm(z, P[p + "ln1.gain"], P[p + "ln1.bias"])

        def heads_of(w):
            t = u @ P[p + f"attn.{w}.weight"] + P[p + f"attn.{w}.bias"]
            return T.transpose(T.reshape(t, (B, N, h, dh)), (0, 2, 1, 3))

        q, k, v = heads_of("q"), heads_of("k"), heads_of("v")
        att = T.softmax(q @ T.transpose(k, (0, 1, 3, 2)) / np.sqrt(dh), axis=-1)
        phi = att @ v
        merged = T.reshape(T.transpose(phi, (0, 2, 1, 3)), (B, N, d))
        z = z + merged @ P[p + "attn.proj.weight"] + P[p + "attn.proj.bias"]

        u = T.layernorm(z, P[p + "ln2.gain"], P[p + "ln2.bias"])
        u = T.gelu(u @ P[p + "mlp.fc1.weight"] + P[p + "mlp.fc1.bias"])
        z = z + u @ P[p + "mlp.fc2.weight"] + P[p + "mlp.fc2.bias"]

        if act_quant is not None and act_quant[i] is not None:
            gamma, bits = act_quant[i]
            if bits < 32:
                z = T.fake_quant(z, gamma, bits)
        if tr is not None:
            tr.heads.append(phi)
            tr.layer_outputs.append(z)

    pooled = T.mean(T.layernorm(z, P["norm.gain"], P["norm.bias"]), axis=1)
    logits = pooled @ P["head.weight"] + P["head.bias"]
    if tr is not None:
        tr.logits = logits
    return logits, tr


def predict(model: ViTModel, images: np.ndarray, batch_size: int = 256, **kw) -> np.ndarray:
    """Logits for a whole array of images, evaluated without a graph."""
    out = []
    with T.no_grad():
        for s in range(0, len(images), batch_size):
            logits, _ = forward(model, images[s:s + batch_size], **kw)
            out.append(logits.data)
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes))


# -- training -------------------------------------------------------------
def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return -T.tsum(T.log_softmax(logits, axis=-1) * onehot) / len(labels)


def train_toy(model: ViTModel, dataset, epochs: int, lr: float, batch_size: int = 32,
              seed: int = 0, weight_decay: float = 0.0) -> ViTModel:
    """Fit a copy of ``model`` with Adam and cross-entropy.

    The returned model carries ``train_accuracy`` and ``loss_history``
    attributes.  Raises :class:`TrainingError` if the loss becomes non-finite.
    """
    model = model.copy()
    images, labels = dataset.images, dataset.labels
    if len(images) == 0:
        raise TrainingError("empty training set")
    rng = np.random.default_rng(seed)
    names = sorted(model.params)
    m = {k: np.zeros_like(model.params[k].data) for k in names}
    v = {k: np.zeros_like(model.params[k].data) for k in names}
    b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(images))
        total = 0.0
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            for k in names:
                model.params[k].requires_grad = True
                model.params[k].grad = None
            logits, _ = forward(model, images[idx])
            loss = cross_entropy(logits, labels[idx])
            if not np.isfinite(loss.item()):
                raise TrainingError(f"loss diverged at epoch {epoch}: {loss.item()}")
            loss.backward()
            total += loss.item() * len(idx)
            step += 1
            for k in names:
                p = model.params[k]
                g = p.grad if p.grad is not None else np.zeros_like(p.data)
                if weight_decay and k.endswith(".weight"):
                    g = g + weight_decay * p.data
                m[k] = b1 * m[k] + (1 - b1) * g
                v[k] = b2 * v[k] + (1 - b2) * g * g
                mhat = m[k] / (1 - b1 ** step)
                vhat = v[k] / (1 - b2 ** step)
                p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)
        history.append(total / len(images))
    for p in model.params.values():
        p.requires_grad = False
        p.grad = None
    model.loss_history = history
    model.train_accuracy = float(np.mean(predict(model, images).argmax(-1) == labels))
    logger.info("trained %d epochs, final loss %.4f, train acc %.4f",
                epochs, history[-1] if history else float("nan"), model.train_accuracy)
    return model


# -- checkpoint I/O -------------------------------------------------------
_MAGIC = b"DFQVITCK"


def save_checkpoint(model: ViTModel, path) -> None:
    """Write ``magic | u64 header length | JSON header | little-endian f64 arrays``.

    Byte offsets in the manifest are relative to the start of the data section.
    """
    manifest, offset, blobs = [], 0, []
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name].data, dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"config": asdict(model.config), "tensors": manifest}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> ViTModel:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    base = 16 + hlen
    params = {}
    for t in header["tensors"]:
        start = base + t["offset"]
        arr = np.frombuffer(raw[start:start + t["nbytes"]], dtype="<f8")
        params[t["name"]] = arr.reshape(t["shape"]).astype(np.float64)
    return ViTModel(ViTConfig(**header["config"]), params)
