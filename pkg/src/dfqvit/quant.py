"""Uniform symmetric quantization of ViT weights and layer-output activations."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, ParameterError
from .vit import ViTConfig, ViTModel, forward, layer_macs, param_shapes, quantizable_layers

logger = logging.getLogger(__name__)

BYPASS_BITS = 32
MAX_ACT_BITS = 8
MIN_GAMMA = 1e-8


def quantize(x, gamma: float, b: int) -> np.ndarray:
    """Map ``x`` to integers in [-(2^(b-1) - 1), 2^(b-1) - 1] with step ``gamma``.

    Rounding is half-to-even.
    """
    if not gamma > 0:
        raise ParameterError(f"gamma must be positive, got {gamma}")
    if not 2 <= b <= BYPASS_BITS:
        raise ParameterError(f"bit-width must be in [2, {BYPASS_BITS}], got {b}")
    qmax = 2 ** (b - 1) - 1
    x = np.asarray(x.data if isinstance(x, T.Tensor) else x, dtype=np.float64)
    return np.clip(np.round(x / gamma), -qmax, qmax).astype(np.int64)


def dequantize(q: np.ndarray, gamma: float) -> np.ndarray:
    return gamma * np.asarray(q, dtype=np.float64)


def initial_gamma(weights, b: int) -> float:
    """Scale that spreads the weight range over 2^b - 1 steps.

    A constant tensor has no range; it falls back to ``MIN_GAMMA`` with a warning.
    """
    w = np.asarray(weights.data if isinstance(weights, T.Tensor) else weights)
    span = float(w.max() - w.min())
    if span <= 0:
        warnings.warn("constant weight tensor; using minimal scale factor", RuntimeWarning, stacklevel=2)
        return MIN_GAMMA
    return span / (2 ** b - 1)


@dataclass(frozen=True)
class LayerQuant:
    b: int
    gamma: float

    def __post_init__(self):
        if not (2 <= self.b <= MAX_ACT_BITS or self.b == BYPASS_BITS):
            raise ParameterError(f"bit-width {self.b} outside [2, 8] (or {BYPASS_BITS} for bypass)")
        if not self.gamma > 0:
            raise ParameterError(f"scale factor must be positive, got {self.gamma}")


@dataclass(frozen=True)
class QuantScheme:
    """Per-layer weight ⟨bits, scale⟩ pairs and the activation pairs derived from them."""

    weight_params: tuple
    act_params: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "weight_params", tuple(self.weight_params))
        object.__setattr__(self, "act_params", tuple(self.act_params))

    @classmethod
    def build(cls, weight_params: Sequence[LayerQuant]) -> "QuantScheme":
        return derive_activation_params(cls(tuple(weight_params)))

    @classmethod
    def bypass(cls, num_layers: int) -> "QuantScheme":
        return cls.build([LayerQuant(BYPASS_BITS, 1.0)] * num_layers)

    @property
    def bits(self) -> list[int]:
        return [p.b for p in self.weight_params]

    @property
    def gammas(self) -> list[float]:
        return [p.gamma for p in self.weight_params]

    def __len__(self) -> int:
        return len(self.weight_params)

    def replace(self, index: int, lq: LayerQuant) -> "QuantScheme":
        wp = list(self.weight_params)
        wp[index] = lq
        return QuantScheme.build(wp)


def derive_activation_params(scheme: QuantScheme) -> QuantScheme:
    """Activation bits are ``min(8, 2 b)``; activation scales accumulate the weight scales.

    The first layer's activation scale is its own weight scale.  Bypassed
    (32-bit) layers keep 32-bit activations.
    """
    acts, running = [], 0.0
    for p in scheme.weight_params:
        running += p.gamma
        b_act = BYPASS_BITS if p.b == BYPASS_BITS else min(MAX_ACT_BITS, 2 * p.b)
        acts.append((b_act, running))
    return QuantScheme(scheme.weight_params, tuple(acts))


def check_scheme(scheme: QuantScheme, cfg: ViTConfig) -> None:
    n = len(quantizable_layers(cfg))
    if len(scheme) != n:
        raise ContractError(f"scheme has {len(scheme)} layers, model has {n} quantizable layers")
    for (b_act, _), p in zip(scheme.act_params, scheme.weight_params):
        if p.b != BYPASS_BITS and b_act != min(MAX_ACT_BITS, 2 * p.b):
            raise ContractError("activation parameters are stale; rebuild the scheme")


def output_act_index(cfg: ViTConfig, layer: int) -> int:
    """Scheme index whose activation pair quantizes transformer layer ``layer``'s output.

    The output of layer i is produced by its second MLP matrix.
    """
    return quantizable_layers(cfg).index(f"blocks.{layer}.mlp.fc2.weight")


class QuantizedModel:
    """An immutable quantized view of a frozen full-precision ViT.

    Weights are replaced by ``gamma * quantize(w)``; each transformer-layer
    output is fake-quantized with its derived activation parameters.
    """

    def __init__(self, fp_model: ViTModel, scheme: QuantScheme, quantize_activations: bool = True):
        cfg = fp_model.config
        check_scheme(scheme, cfg)
        self.fp_model = fp_model
        self.scheme = scheme
        self.quantize_activations = quantize_activations
        self.int_weights: dict[str, np.ndarray] = {}
        self.weights: dict[str, T.Tensor] = {}
        for name, lq in zip(quantizable_layers(cfg), scheme.weight_params):
            if lq.b == BYPASS_BITS:
                continue
            q = quantize(fp_model.params[name].data, lq.gamma, lq.b)
            self.int_weights[name] = q
            self.weights[name] = T.Tensor(dequantize(q, lq.gamma))
        self.act_quant = None
        if quantize_activations:
            self.act_quant = []
            for i in range(cfg.num_layers):
                b_act, g_act = scheme.act_params[output_act_index(cfg, i)]
                self.act_quant.append(None if b_act == BYPASS_BITS else (g_act, b_act))

    @property
    def config(self) -> ViTConfig:
        return self.fp_model.config

    def forward(self, batch, trace: bool = False, weights=None):
        w = self.weights if weights is None else weights
        return forward(self.fp_model, batch, trace=trace, weights=w, act_quant=self.act_quant)

    __call__ = forward


# -- footprint accounting -------------------------------------------------
def footprint(params: Sequence[int], macs: Sequence[int], bits: Sequence[int],
              act_bits: Sequence[int]) -> dict:
    """Size in MB (10^6 bytes), BOPS, and unweighted mean bit-widths."""
    size_mb = sum(p * b for p, b in zip(params, bits)) / (8 * 10 ** 6)
    bops = sum(m * b * a for m, b, a in zip(macs, bits, act_bits))
    return {
        "size_mb": size_mb,
        "avg_bw_weights": float(np.mean(bits)) if len(bits) else 0.0,
        "avg_bw_acts": float(np.mean(act_bits)) if len(act_bits) else 0.0,
        "bops": int(bops),
    }


def report_footprint(model, scheme: QuantScheme) -> dict:
    cfg = model.config if isinstance(model, ViTModel) else model
    check_scheme(scheme, cfg)
    names = quantizable_layers(cfg)
    shapes, macs = param_shapes(cfg), layer_macs(cfg)
    return footprint([int(np.prod(shapes[n])) for n in names], [macs[n] for n in names],
                     scheme.bits, [a for a, _ in scheme.act_params])


# -- serialization --------------------------------------------------------
def scheme_records(scheme: QuantScheme, cfg: ViTConfig) -> list[dict]:
    names = quantizable_layers(cfg)
    shapes, macs = param_shapes(cfg), layer_macs(cfg)
    return [
        {"layer": n, "b": p.b, "gamma": p.gamma, "b_act": a[0], "gamma_act": a[1],
         "params": int(np.prod(shapes[n])), "macs": macs[n]}
        for n, p, a in zip(names, scheme.weight_params, scheme.act_params)
    ]


def scheme_to_json(scheme: QuantScheme, cfg: ViTConfig) -> str:
    return json.dumps(scheme_records(scheme, cfg), indent=1)


def scheme_from_json(text: str) -> QuantScheme:
    recs = json.loads(text)
    scheme = QuantScheme.build([LayerQuant(int(r["b"]), float(r["gamma"])) for r in recs])
    for r, (b_act, g_act) in zip(recs, scheme.act_params):
        if "b_act" in r and (r["b_act"] != b_act or not np.isclose(r["gamma_act"], g_act, rtol=1e-12)):
            raise ContractError(f"layer {r.get('layer')}: stored activation params disagree with derivation")
    return scheme


def footprint_from_records(recs: list[dict]) -> dict:
    return footprint([r["params"] for r in recs], [r["macs"] for r in recs],
                     [r["b"] for r in recs], [r["b_act"] for r in recs])
