import csv
import json

import numpy as np
import pytest

from conftest import TOY
from dfqvit.cli import main as cli_main
from dfqvit.data import ToyDataset, make_shapes_dataset
from dfqvit.datagen import init_batch
from dfqvit.errors import ConfigError, ContractError
from dfqvit.evosearch import FitnessEvaluator, SearchSpace, init_population
from dfqvit.pipeline import HISTORY_COLUMNS, RunConfig, evaluate, landscape_grid, run, write_landscape
from dfqvit.quant import QuantizedModel, QuantScheme, footprint_from_records, scheme_from_json
from dfqvit.vit import load_checkpoint, quantizable_layers, save_checkpoint

SMALL = dict(generation_iters=2, passes=1, cycles=2, population=4, batch_size=4,
             diverse_parents=1, eval_size=64)


class _Stub:
    def __init__(self, fn):
        self.fn = fn

    def forward(self, images):
        return self.fn(images), None


def test_run_config_defaults_follow_reference_hyperparameters():
    c = RunConfig()
    assert (c.generation_iters, c.neighborhood, c.top_n, c.passes, c.cycles, c.population,
            c.batch_size, c.diverse_parents) == (500, 3, 4, 10, 6, 15, 32, 5)
    assert c.bit_range == (2, 8) and c.fixed_bits is None


def test_run_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"passes": 1, "colour": "blue"})


def test_evaluate_all_correct_stub():
    data = make_shapes_dataset(40, seed=0)
    # one batch covers the whole set, so the stub can echo the labels
    assert evaluate(_Stub(lambda x: np.eye(4)[data.labels]), data, batch_size=40) == 1.0


def test_evaluate_random_logits_near_chance():
    rng = np.random.default_rng(0)
    data = ToyDataset(np.zeros((10_000, 1)), rng.integers(0, 4, 10_000))
    acc = evaluate(_Stub(lambda x: rng.normal(size=(len(x), 4))), data)
    assert abs(acc - 0.25) <= 0.02


def test_evaluate_empty_dataset():
    with pytest.raises(ContractError):
        evaluate(_Stub(None), ToyDataset(np.zeros((0, 1)), np.zeros(0, int)))


def test_bypass_accuracy_equals_fp(trained_model):
    data = make_shapes_dataset(128, seed=5)
    q = QuantizedModel(trained_model, QuantScheme.bypass(len(quantizable_layers(TOY))))
    assert evaluate(q, data) == evaluate(trained_model, data)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(ConfigError):
        run(RunConfig(checkpoint=str(tmp_path / "nope.ckpt"), output_dir=str(tmp_path), **SMALL))


def test_degenerate_budget_reports_initial_best(trained_model, tmp_path):
    cfg = RunConfig(output_dir=str(tmp_path), seed=3, **{**SMALL, "generation_iters": 0, "passes": 0})
    report = run(cfg, fp_model=trained_model)
    assert report.fitness_history == [] and report.refreshes == 0

    batch = init_batch(cfg.batch_size, TOY, cfg.seed)
    ev = FitnessEvaluator(trained_model, batch, cfg.contrastive())
    pop = init_population(ev, SearchSpace(trained_model, cfg.budget()), cfg.population,
                          np.random.default_rng([cfg.seed, 1]))
    assert scheme_from_json((tmp_path / "scheme.json").read_text()) == pop.best.scheme
    data = make_shapes_dataset(cfg.eval_size, seed=cfg.eval_seed)
    assert report.quantized_accuracy == evaluate(QuantizedModel(trained_model, pop.best.scheme), data)


def test_run_artifacts_and_invariants(trained_model, tmp_path):
    before = trained_model.checksum()
    cfg = RunConfig(output_dir=str(tmp_path), seed=1, dump_images=True, **SMALL)
    report = run(cfg, fp_model=trained_model)
    assert trained_model.checksum() == before
    assert len(report.fitness_history) == 1 * 2 * 2 and report.refreshes == 1 * 2
    h = report.fitness_history
    assert all(b <= a for a, b in zip(h, h[1:]))

    recs = json.loads((tmp_path / "scheme.json").read_text())
    fp = footprint_from_records(recs)
    assert (fp["size_mb"], fp["bops"]) == (report.size_mb, report.bops)
    with open(tmp_path / "history.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == HISTORY_COLUMNS and len(rows) == 1 + len(h)
    assert "wall_time" not in json.loads((tmp_path / "report.json").read_text())
    assert json.loads((tmp_path / "timing.json").read_text())["wall_time"] > 0
    assert (tmp_path / "images" / "manifest.json").exists()
    qck = load_checkpoint(tmp_path / "quantized.ckpt")
    best = scheme_from_json((tmp_path / "scheme.json").read_text())
    ref = QuantizedModel(trained_model, best)
    for name, w in ref.weights.items():
        np.testing.assert_array_equal(qck.params[name].data, w.data)


# -- landscape ------------------------------------------------------------
@pytest.fixture(scope="module")
def landscape_inputs(trained_model):
    space = SearchSpace(trained_model, RunConfig().budget())
    return space.random_scheme(np.random.default_rng(0)), init_batch(4, TOY, 0)


def test_landscape_shape_and_center(trained_model, landscape_inputs):
    scheme, batch = landscape_inputs
    coords, grid = landscape_grid(trained_model, scheme, batch, steps=2, radius=0.05)
    assert grid.shape == (5, 5) and len(coords) == 5 and coords[2] == 0.0
    direct = FitnessEvaluator(trained_model, batch)(scheme)
    assert abs(grid[2, 2] - direct) <= 1e-12 * max(1.0, abs(direct))


def test_landscape_zero_radius_is_flat(trained_model, landscape_inputs):
    scheme, batch = landscape_inputs
    _, grid = landscape_grid(trained_model, scheme, batch, steps=1, radius=0.0)
    assert np.all(grid == grid[1, 1])


def test_landscape_csv(tmp_path):
    coords = np.array([-1.0, 0.0, 1.0])
    write_landscape(coords, np.arange(9.0).reshape(3, 3), tmp_path / "g.csv")
    rows = list(csv.reader(open(tmp_path / "g.csv")))
    assert rows[0] == ["weight_offset", "pixel_offset", "fitness"] and len(rows) == 10
    assert rows[6] == ["0.0", "1.0", "5.0"]


# -- command line ---------------------------------------------------------
def test_cli_end_to_end(trained_model, tmp_path, capsys):
    ck = tmp_path / "fp.ckpt"
    save_checkpoint(trained_model, ck)
    conf = tmp_path / "run.json"
    conf.write_text(json.dumps({**SMALL, "checkpoint": str(ck)}))
    out = tmp_path / "out"
    assert cli_main(["quantize", "--config", str(conf), "--seed", "0", "--output-dir", str(out),
                     "--fixed-bits", "8"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["mode"] == "fixed" and report["avg_bw_weights"] == 8.0

    assert cli_main(["report", "--scheme", str(out / "scheme.json")]) == 0
    fp = json.loads(capsys.readouterr().out)
    assert fp["bops"] == report["bops"]

    assert cli_main(["eval", "--checkpoint", str(ck), "--scheme", str(out / "scheme.json"),
                     "--eval-size", "64"]) == 0
    ev = json.loads(capsys.readouterr().out)
    assert ev["quantized_accuracy"] == report["quantized_accuracy"]

    assert cli_main(["landscape", "--checkpoint", str(ck), "--scheme", str(out / "scheme.json"),
                     "--out", str(tmp_path / "l.csv"), "--steps", "1", "--batch-size", "4"]) == 0
    assert (tmp_path / "l.csv").exists()


def test_cli_exit_codes(tmp_path, capsys):
    assert cli_main(["quantize", "--checkpoint", str(tmp_path / "missing"), "--seed", "0"]) == 2
    assert cli_main(["quantize", "--checkpoint", "x"]) == 2  # --seed is mandatory
    assert cli_main(["quantize", "--seed", "0", "--bit-range", "1", "8"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli_main(["quantize", "--seed", "0", "--config", str(bad)]) == 2
    capsys.readouterr()


def test_cli_train(tmp_path, capsys):
    assert cli_main(["train", "--out", str(tmp_path / "m.ckpt"), "--epochs", "1",
                     "--train-size", "16", "--eval-size", "16"]) == 0
    assert (tmp_path / "m.ckpt").exists()
    assert "train_accuracy" in json.loads(capsys.readouterr().out)
