"""Data-free post-training quantization of a small Vision Transformer.

Synthetic calibration images are generated from noise with a patch-level
contrastive objective, and per-layer bit-widths and scale factors are found
by a layer-wise evolutionary search; the two stages alternate.
"""

from .datagen import SyntheticBatch, init_batch, refine, warm_refresh
from .evosearch import Candidate, FitnessEvaluator, Population, SearchBudget, SearchSpace, search
from .losses import ContrastiveConfig, TargetSpec, info_nce, output_loss, stage1_loss, stage2_fitness
from .pipeline import RunConfig, RunReport, evaluate, landscape_grid, run
from .quant import (LayerQuant, QuantizedModel, QuantScheme, derive_activation_params,
                    initial_gamma, quantize, report_footprint)
from .tensor import Tensor, no_grad
from .vit import ViTConfig, ViTModel, forward, load_checkpoint, save_checkpoint, train_toy

__version__ = "0.1.0"
