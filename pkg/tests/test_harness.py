import csv
import shutil

import numpy as np
import pytest
import tifffile

from cldenoise import cli, losses
from cldenoise.errors import InvalidConfig, SchemaMismatch
from cldenoise.harness import (
    Cell,
    Experiment,
    ExperimentPlan,
    build_table,
    cell_config,
    load_plan,
    make_table,
    parse_plan,
    run_plan,
)
from cldenoise.metrics import MetricReport, MetricRow
from cldenoise.training import EXPERIMENTS, steps_per_epoch

TINY_PLAN = """
[plan]
name = tiny
few_shot = all, 4
seeds = 0

[dataset:shapes]
format = synthetic
n_images = 8
size = 16
noise_sigma = 0.1
patch_size = 16
test_fraction = 0.25

[train]
batch_size = 4
epochs = 1
decay_start_epoch = 1
steps_per_epoch = 1
lr = 1e-3

[generator]
n_down = 3
n_up = 3
base_channels = 4
max_channels = 16
input_size = 16

[discriminator]
n_layers = 2
base_channels = 4

[head]
hidden_dim = 8
output_dim = 8

[tiling]
tile = 16
overlap = 4

[experiment:baseline]

[experiment:CL]
use_cl = true
"""


def _row(ds, exp, psnr, ns="all", image_id=0, ssim=0.9, nrmse=0.05):
    return MetricRow(ds, exp, ns, image_id, psnr, ssim, nrmse)


# -- plans --------------------------------------------------------------------

def test_full_scale_preset_mirrors_the_published_grid():
    plan = load_plan(preset="paper-faithful")
    assert len(plan.datasets) == 3
    per_dataset = {}
    for cell in plan.cells():
        per_dataset.setdefault(cell.dataset, []).append((cell.experiment.name, cell.n_samples))
    for cells in per_dataset.values():
        assert len(cells) == 11
        assert {e for e, ns in cells if ns != "all"} == {"baseline", "CL", "CL + TV + SSIM"}
    cfg = plan.train
    assert (cfg.batch_size, cfg.epochs, cfg.decay_start_epoch, cfg.lr) == (32, 1000, 500, 2e-4)
    assert (cfg.weights.lambda_ssim, cfg.weights.lambda_tv, cfg.weights.tau) == (10.0, 1e-4, 0.1)
    assert cfg.generator.n_down == 7 and cfg.generator.input_size == 256


def test_full_grid_gives_fifteen_cells_per_dataset():
    text = "[plan]\nfew_shot = all, 32, 16\n[dataset:convallaria]\npath = x.tif\n" + "".join(
        f"[experiment:{name}]\n" + "".join(f"{k} = {v}\n" for k, v in flags.items())
        for name, flags in EXPERIMENTS.items())
    plan = parse_plan(text)
    assert len(plan.cells()) == 15
    assert {c.experiment.name for c in plan.cells()} == set(EXPERIMENTS)


def test_desk_scale_preset():
    plan = load_plan(preset="desk-scale")
    assert plan.datasets["shapes"]["format"] == "synthetic"
    assert plan.train.generator.input_size == 64
    n_steps = plan.train.epochs * plan.train.steps_per_epoch
    assert n_steps <= 500


def test_plan_validation():
    with pytest.raises(InvalidConfig):
        load_plan(preset="nope")
    with pytest.raises(InvalidConfig):
        parse_plan("[dataset:x]\npath = a\n")
    with pytest.raises(InvalidConfig):
        ExperimentPlan("p", {}, [Experiment("a"), Experiment("a")])
    with pytest.raises(InvalidConfig):
        parse_plan("[plan]\n[train]\nepochs = 5\ndecay_start_epoch = 9\n")


def test_few_shot_cells_keep_the_step_budget():
    plan = parse_plan(TINY_PLAN.replace("steps_per_epoch = 1\n", "batch_size = 2\n").replace(
        "batch_size = 4\n", ""))
    full = cell_config(plan, Cell("shapes", plan.experiments[0], "all", 0), full_n_train=40)
    few = cell_config(plan, Cell("shapes", plan.experiments[0], "4", 0), full_n_train=40)
    assert few.steps_per_epoch == full.steps_per_epoch == steps_per_epoch(40, plan.train)


# -- running ------------------------------------------------------------------

def test_empty_plan(tmp_path):
    plan = ExperimentPlan("empty", {}, [], output_dir=tmp_path)
    result = run_plan(plan)
    assert len(result.report) == 0 and not result.failed
    assert (tmp_path / "report.csv").read_text().startswith("dataset,experiment")


def test_rerun_is_idempotent_and_cells_are_independent(tmp_path):
    plan = parse_plan(TINY_PLAN, output_dir=tmp_path)
    first = run_plan(plan, make_figures=False)
    assert len(first.ran) == 4 and not first.skipped and not first.failed
    assert (tmp_path / "table.csv").exists() and (tmp_path / "table.txt").exists()

    second = run_plan(plan, make_figures=False)
    assert not second.ran and len(second.skipped) == 4
    assert second.report.sorted_rows() == first.report.sorted_rows()

    victim = tmp_path / "cells" / first.ran[1]
    before = (victim / "metrics.csv").read_bytes()
    shutil.rmtree(victim)
    third = run_plan(plan, make_figures=False)
    assert third.ran == [first.ran[1]]
    assert (victim / "metrics.csv").read_bytes() == before


def test_failing_cell_is_logged_and_the_rest_proceed(tmp_path):
    text = TINY_PLAN.replace("few_shot = all, 4", "few_shot = all, 500")
    plan = parse_plan(text, output_dir=tmp_path)
    result = run_plan(plan, make_figures=False)
    assert len(result.ran) == 2 and len(result.failed) == 2
    with open(tmp_path / "failures.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["error"] for r in rows} == {"SubsetTooLarge"}
    reported = {(r.experiment, r.n_samples) for r in result.report.rows}
    failed = {r["cell"] for r in rows}
    assert len(reported) + len(failed) == len(plan.cells())


def test_plan_writes_figures(tmp_path):
    plan = parse_plan(TINY_PLAN.replace("few_shot = all, 4", "few_shot = all"), output_dir=tmp_path)
    run_plan(plan)
    assert (tmp_path / "table_psnr.png").stat().st_size > 0
    assert any((tmp_path / "cells").glob("*/loss.png"))


# -- tables -------------------------------------------------------------------

def test_single_report_table_equals_its_aggregates():
    report = MetricReport([_row("conv", "baseline", 30.0 + i, image_id=i) for i in range(3)])
    table = build_table(report)
    assert table.cells == report.aggregates


def test_best_value_is_marked(tmp_path):
    report = MetricReport([_row("Convallaria", "CL + TV + SSIM", 37.04),
                           _row("Convallaria", "baseline", 35.59)])
    table = make_table([report], tmp_path, make_figures=False)
    assert table.is_best("Convallaria", "CL + TV + SSIM", "all", "psnr")
    assert not table.is_best("Convallaria", "baseline", "all", "psnr")
    text = (tmp_path / "table.txt").read_text()
    assert "37.04*" in text and "35.59*" not in text
    with open(tmp_path / "table.csv") as fh:
        rows = {r["experiment"]: r for r in csv.DictReader(fh)}
    assert "psnr" in rows["CL + TV + SSIM"]["Convallaria_best"].split(";")


def test_marking_agrees_with_brute_force_scan():
    rng = np.random.default_rng(0)
    rows = [_row(ds, exp, float(rng.uniform(25, 40)), ns, 0, float(rng.uniform(0.5, 1)),
                 float(rng.uniform(0.01, 0.1)))
            for ds in ("a", "b") for exp in EXPERIMENTS for ns in ("all", "32")]
    table = build_table(MetricReport(rows))
    for ds in ("a", "b"):
        for ns in ("all", "32"):
            subset = [r for r in rows if r.dataset == ds and r.n_samples == ns]
            assert table.best[(ds, ns, "psnr")] == max(subset, key=lambda r: r.psnr).experiment
            assert table.best[(ds, ns, "ssim")] == max(subset, key=lambda r: r.ssim).experiment
            assert table.best[(ds, ns, "nrmse")] == min(subset, key=lambda r: r.nrmse).experiment


def test_ties_go_to_the_simpler_experiment():
    report = MetricReport([_row("d", "CL + TV + SSIM", 30.0), _row("d", "CL", 30.0),
                           _row("d", "baseline", 30.0)])
    assert build_table(report).best[("d", "all", "psnr")] == "baseline"


def test_table_rejects_foreign_reports(tmp_path):
    (tmp_path / "r.csv").write_text("a,b\n1,2\n")
    with pytest.raises(SchemaMismatch):
        make_table([tmp_path / "r.csv"])


# -- command line -------------------------------------------------------------

TINY_FLAGS = ["--config", "PLAN", "--epochs", "2", "--steps-per-epoch", "1"]


@pytest.fixture
def plan_file(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_PLAN)
    return path


def _flags(plan_file):
    return [str(plan_file) if f == "PLAN" else f for f in TINY_FLAGS]


def test_cli_end_to_end(tmp_path, plan_file, capsys):
    manifest = tmp_path / "m.txt"
    assert cli.main(["ingest", "--synthetic", "--n-images", "8", "--size", "16", "--patch-size", "16",
                     "--test-fraction", "0.25", "--out", str(manifest)]) == 0
    run = tmp_path / "run"
    assert cli.main(["train", "--manifest", str(manifest), "--out", str(run), "--experiment", "CL",
                     *_flags(plan_file)]) == 0
    assert (run / "checkpoint.pt").exists()
    assert len((run / "loss.csv").read_text().splitlines()) == 3

    assert cli.main(["train", "--manifest", str(manifest), "--out", str(run), "--resume",
                     "--experiment", "CL", "--config", str(plan_file), "--epochs", "3",
                     "--steps-per-epoch", "1"]) == 0
    assert len((run / "loss.csv").read_text().splitlines()) == 4

    assert cli.main(["eval", "--checkpoint", str(run / "checkpoint.pt"), "--manifest", str(manifest),
                     "--overlap", "4", "--out", str(tmp_path / "metrics.csv")]) == 0
    assert MetricReport.from_csv(tmp_path / "metrics.csv").rows

    frames = np.random.default_rng(0).integers(0, 4000, (2, 40, 40)).astype(np.uint16)
    tifffile.imwrite(tmp_path / "in.tif", frames)
    assert cli.main(["denoise", "--checkpoint", str(run / "checkpoint.pt"), "--input",
                     str(tmp_path / "in.tif"), "--overlap", "4", "--out", str(tmp_path / "out.tif"),
                     "--raw-out", str(tmp_path / "raw.tif"), "--crop", "0,16,0,24"]) == 0
    out = tifffile.imread(tmp_path / "out.tif")
    assert out.shape == (2, 40, 40) and out.dtype == np.float32
    assert (tmp_path / "denoised_crop_0_16_0_24.png").exists()

    assert cli.main(["table", str(tmp_path / "metrics.csv"), "--no-figures"]) == 0
    assert "shapes" in capsys.readouterr().out


def test_cli_plan_dry_run(capsys):
    assert cli.main(["plan", "--preset", "paper-faithful", "--dry-run"]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 33


def test_cli_plan_runs_and_skips(tmp_path, plan_file, capsys):
    out = tmp_path / "out"
    assert cli.main(["plan", "--config", str(plan_file), "--out", str(out), "--no-figures"]) == 0
    assert cli.main(["plan", "--config", str(plan_file), "--out", str(out), "--no-figures"]) == 0
    assert "0 ran, 4 skipped, 0 failed" in capsys.readouterr().out


def test_cli_empty_plan(tmp_path):
    (tmp_path / "empty.ini").write_text("[plan]\nname = empty\n")
    assert cli.main(["plan", "--config", str(tmp_path / "empty.ini"), "--out", str(tmp_path / "o")]) == 0


def test_cli_exit_codes(tmp_path, plan_file, monkeypatch):
    assert cli.main(["plan", "--config", str(tmp_path / "missing.ini")]) == cli.EXIT_CONFIG
    assert cli.main(["train", "--manifest", str(tmp_path / "m.txt"), "--out", str(tmp_path),
                     "--experiment", "everything"]) == cli.EXIT_CONFIG
    assert cli.main(["ingest", "--stack", str(tmp_path / "none.tif"), "--out",
                     str(tmp_path / "m.txt")]) == cli.EXIT_DATA

    manifest = tmp_path / "m.txt"
    cli.main(["ingest", "--synthetic", "--n-images", "8", "--size", "16", "--patch-size", "16",
              "--out", str(manifest)])
    monkeypatch.setattr(losses, "tv_loss", lambda y, normalize=True: y.sum() * float("inf"))
    code = cli.main(["train", "--manifest", str(manifest), "--out", str(tmp_path / "run"),
                     "--use-tv", *_flags(plan_file)])
    assert code == cli.EXIT_DIVERGED
