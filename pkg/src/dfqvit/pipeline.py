"""End-to-end driver: generate data, search quantization parameters, alternate, report."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .data import ToyDataset, make_shapes_dataset
from .datagen import SyntheticBatch, dump_images, init_batch, refine, warm_refresh
from .errors import ConfigError, ContractError, NumericalError
from .evosearch import (FitnessEvaluator, Population, SearchBudget, SearchSpace,
                        init_population, search)
from .losses import ContrastiveConfig, stage2_fitness
from .quant import (QuantizedModel, QuantScheme, report_footprint,
                    scheme_to_json)
from .vit import ViTConfig, ViTModel, load_checkpoint, quantizable_layers, save_checkpoint

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ("update_index", "pass", "layer", "cycle", "best_fitness", "mean_fitness",
                   "avg_bw_w", "avg_bw_a")


@dataclass
class RunConfig:
    checkpoint: str = "fp.ckpt"
    output_dir: str = "run"
    seed: int = 0
    generation_iters: int = 500  # G
    neighborhood: int = 3
    top_n: int = 4
    passes: int = 10
    cycles: int = 6
    population: int = 15  # K
    batch_size: int = 32  # B
    tau: float = 0.07
    lr_gen: float = 0.05
    bit_range: tuple = (2, 8)
    fixed_bits: Optional[int] = None
    diverse_parents: int = 5
    refresh: str = "per_layer"
    max_avg_bits: Optional[float] = None
    eval_size: int = 1024
    eval_seed: int = 10_007
    dump_images: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "bit_range" in d:
            d["bit_range"] = tuple(d["bit_range"])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def contrastive(self) -> ContrastiveConfig:
        return ContrastiveConfig(tau=self.tau, neighborhood=self.neighborhood, top_n=self.top_n)

    def budget(self) -> SearchBudget:
        return SearchBudget(passes=self.passes, cycles=self.cycles,
                            diverse_parents=self.diverse_parents, population=self.population,
                            bit_range=tuple(self.bit_range), fixed_bits=self.fixed_bits,
                            refresh=self.refresh, max_avg_bits=self.max_avg_bits)


@dataclass
class RunReport:
    fp_accuracy: float
    quantized_accuracy: float
    avg_bw_weights: float
    avg_bw_acts: float
    size_mb: float
    bops: int
    fitness_history: list = field(default_factory=list)
    wall_time: float = 0.0
    refreshes: int = 0
    mode: str = "mixed"

    def to_json(self) -> str:
        """Deterministic JSON; wall time is excluded (it lives in timing.json)."""
        d = asdict(self)
        d.pop("wall_time")
        return json.dumps(d, indent=1, sort_keys=True)


def evaluate(model, dataset: ToyDataset, batch_size: int = 256) -> float:
    """Top-1 accuracy of ``model.forward`` on a labelled dataset."""
    if len(dataset.labels) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    correct = 0
    with T.no_grad():
        for s in range(0, len(dataset.labels), batch_size):
            logits, _ = model.forward(dataset.images[s:s + batch_size])
            logits = logits.data if isinstance(logits, T.Tensor) else np.asarray(logits)
            correct += int(np.sum(logits.argmax(-1) == dataset.labels[s:s + batch_size]))
    return correct / len(dataset.labels)


def _check_finite(value: float, stage: str) -> None:
    if not math.isfinite(value):
        raise NumericalError(f"non-finite value in {stage}", state={"stage": stage})


def quantized_checkpoint(fp_model: ViTModel, scheme: QuantScheme) -> ViTModel:
    """FP model copy whose quantizable weights hold their dequantized values."""
    q = QuantizedModel(fp_model, scheme)
    out = fp_model.copy()
    for name, w in q.weights.items():
        out.params[name] = T.Tensor(w.data)
    return out


def write_history(history: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row[c] for c in HISTORY_COLUMNS])


def run(config: RunConfig, fp_model: ViTModel | None = None) -> RunReport:
    """Execute the full alternating pipeline and write its artifacts to ``config.output_dir``."""
    t0 = time.perf_counter()
    if fp_model is None:
        if not Path(config.checkpoint).exists():
            raise ConfigError(f"checkpoint {config.checkpoint} not found; run `train` first")
        fp_model = load_checkpoint(config.checkpoint)
    cfg = fp_model.config
    checksum = fp_model.checksum()
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ccfg = config.contrastive()
    budget = config.budget()
    G, lr = config.generation_iters, config.lr_gen

    batch = init_batch(config.batch_size, cfg, config.seed)
    evaluator = FitnessEvaluator(fp_model, batch, ccfg)
    space = SearchSpace(fp_model, budget)
    rng = np.random.default_rng([config.seed, 1])
    population = init_population(evaluator, space, budget.population, rng)

    def stage1(b: SyntheticBatch, scheme: QuantScheme, iters: int) -> SyntheticBatch:
        try:
            return refine(b, fp_model, QuantizedModel(fp_model, scheme), iters, lr, ccfg)
        except NumericalError as e:
            raise NumericalError(f"stage 1 (data generation): {e}", e.state) from e

    if G > 0:
        batch = stage1(batch, population.best.scheme, G)
        evaluator.set_batch(batch)
        rescore(population, evaluator)

    def on_refresh(best_scheme: QuantScheme) -> SyntheticBatch:
        nonlocal batch
        if batch.generation_count > 0:
            try:
                batch = warm_refresh(batch, fp_model, QuantizedModel(fp_model, best_scheme), G, lr, ccfg)
            except NumericalError as e:
                raise NumericalError(f"stage 1 (cyclic refresh): {e}", e.state) from e
        return batch

    result = search(evaluator, space, population, rng, on_refresh=on_refresh)
    best = result.best.scheme
    for row in result.history:
        _check_finite(row["best_fitness"], "stage 2 (search)")

    eval_set = make_shapes_dataset(config.eval_size, cfg.image_size, cfg.channels,
                                   seed=config.eval_seed, num_classes=cfg.num_classes)
    fp_acc = evaluate(fp_model, eval_set)
    q_acc = evaluate(QuantizedModel(fp_model, best), eval_set)
    fp = report_footprint(cfg, best)
    report = RunReport(
        fp_accuracy=fp_acc, quantized_accuracy=q_acc,
        avg_bw_weights=fp["avg_bw_weights"], avg_bw_acts=fp["avg_bw_acts"],
        size_mb=fp["size_mb"], bops=fp["bops"],
        fitness_history=[row["best_fitness"] for row in result.history],
        refreshes=result.refreshes, mode=budget.mode)

    if fp_model.checksum() != checksum:
        raise NumericalError("full-precision weights changed during the run", {"stage": "pipeline"})
    (out / "report.json").write_text(report.to_json())
    (out / "scheme.json").write_text(scheme_to_json(best, cfg))
    write_history(result.history, out / "history.csv")
    save_checkpoint(quantized_checkpoint(fp_model, best), out / "quantized.ckpt")
    if config.dump_images:
        dump_images(batch, out / "images")
    report.wall_time = time.perf_counter() - t0
    (out / "timing.json").write_text(json.dumps({"wall_time": report.wall_time}, indent=1))
    logger.info("run finished: fp %.4f -> q %.4f, W%.2f/A%.2f, %.4f MB in %.1fs",
                fp_acc, q_acc, report.avg_bw_weights, report.avg_bw_acts, report.size_mb,
                report.wall_time)
    return report


def rescore(population: Population, evaluator: FitnessEvaluator) -> None:
    """Re-evaluate every member on the evaluator's current batch and re-rank."""
    kept = []
    for c in population.members:
        c.fitness = evaluator(c.scheme)
        if math.isfinite(c.fitness):
            kept.append(c)
        else:
            logger.warning("dropping member with non-finite fitness after rescoring")
    kept.sort(key=lambda c: (c.fitness, c.order))
    population.members = kept


# -- loss landscape -------------------------------------------------------
def _filter_normalized(direction: np.ndarray, ref: np.ndarray, axis: int) -> np.ndarray:
    dn = np.sqrt(np.sum(direction ** 2, axis=axis, keepdims=True))
    rn = np.sqrt(np.sum(ref ** 2, axis=axis, keepdims=True))
    return direction * rn / np.where(dn > 0, dn, 1.0)


def landscape_grid(fp_model: ViTModel, scheme: QuantScheme, batch: SyntheticBatch, steps: int,
                   radius: float, seed: int = 0,
                   cfg: ContrastiveConfig = ContrastiveConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Fitness over a plane spanned by one weight direction and one pixel direction.

    Weight directions are drawn per quantizable matrix and rescaled so each
    output column has the norm of the matching weight column; the pixel
    direction is rescaled per image.  The weight perturbation is applied
    before quantization; the FP reference sees the perturbed images only.

    Returns ``(coords, grid)`` where ``grid[i, j]`` is the fitness at weight
    offset ``coords[i]`` and pixel offset ``coords[j]``.
    """
    rng = np.random.default_rng(seed)
    names = quantizable_layers(fp_model.config)
    w_dirs = {n: _filter_normalized(rng.standard_normal(fp_model.params[n].shape),
                                    fp_model.params[n].data, axis=0) for n in names}
    X = batch.images
    x_dir = _filter_normalized(rng.standard_normal(X.shape), X, axis=(1, 2, 3))
    coords = np.linspace(-radius, radius, 2 * steps + 1) if steps > 0 else np.zeros(1)
    grid = np.empty((len(coords), len(coords)))
    for i, a in enumerate(coords):
        perturbed = fp_model.copy()
        for n in names:
            perturbed.params[n] = T.Tensor(fp_model.params[n].data + a * w_dirs[n])
        q = QuantizedModel(perturbed, scheme)
        for j, b in enumerate(coords):
            xb = X + b * x_dir
            with T.no_grad():
                fl, ft = fp_model.forward(xb, trace=True)
                ql, qt = q.forward(xb, trace=True)
            grid[i, j] = stage2_fitness(qt, ft, ql, fl, batch.targets, cfg)
    return coords, grid


def write_landscape(coords: np.ndarray, grid: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("weight_offset", "pixel_offset", "fitness"))
        for i, a in enumerate(coords):
            for j, b in enumerate(coords):
                w.writerow((repr(float(a)), repr(float(b)), repr(float(grid[i, j]))))
