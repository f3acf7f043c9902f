"""Ablation x few-shot experiment plans and results-table aggregation."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .data import (
    AugmentationChain,
    DenoisingDataset,
    FewShotSpec,
    few_shot_subset,
    ingest,
    manifest_text,
    synthetic_dataset,
    write_manifest,
)
from .errors import CLDenoiseError, InvalidConfig
from .inference import TilingSpec
from .losses import LossWeights, SSIMParams
from .metrics import METRICS, MetricReport, evaluate
from .models import DiscriminatorConfig, GeneratorConfig
from .training import EXPERIMENTS, TrainConfig, fit, steps_per_epoch

log = logging.getLogger(__name__)

PRESETS = ("paper-faithful", "desk-scale")
HIGHER_IS_BETTER = {"psnr": True, "ssim": True, "nrmse": False}


@dataclass(frozen=True)
class Experiment:
    name: str
    use_tv: bool = False
    use_ssim: bool = False
    use_cl: bool = False
    weights: Optional[LossWeights] = None
    few_shot: Optional[tuple] = None  # overrides the plan-wide sizes

    @property
    def n_terms(self) -> int:
        return int(self.use_tv) + int(self.use_ssim) + int(self.use_cl)


@dataclass
class ExperimentPlan:
    name: str
    datasets: dict  # name -> dataset section (dict of strings)
    experiments: list
    few_shot: list = field(default_factory=lambda: ["all"])
    seeds: list = field(default_factory=lambda: [0])
    output_dir: Path = Path("runs")
    train: TrainConfig = TrainConfig()
    tiling: TilingSpec = TilingSpec()
    match_step_budget: bool = True

    def __post_init__(self):
        names = [e.name for e in self.experiments]
        if len(set(names)) != len(names):
            raise InvalidConfig(f"experiment names must be unique: {names}")

    def cells(self) -> list:
        out = []
        for ds in self.datasets:
            for exp in self.experiments:
                for ns in exp.few_shot or self.few_shot:
                    for seed in self.seeds:
                        out.append(Cell(ds, exp, str(ns), int(seed)))
        return out


@dataclass(frozen=True)
class Cell:
    dataset: str
    experiment: Experiment
    n_samples: str
    seed: int

    @property
    def cell_id(self) -> str:
        slug = re.sub(r"[^A-Za-z0-9]+", "-", self.experiment.name).strip("-")
        return f"{self.dataset}__{slug}__ns-{self.n_samples}__seed-{self.seed}"


# -- plan files ---------------------------------------------------------------

def _coerce(cls, section, base=None):
    """Build dataclass ``cls`` from a config section, typed by the field defaults."""
    base = base or cls()
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in section:
            continue
        raw = section[f.name].strip()
        default = getattr(base, f.name)
        if isinstance(default, bool):
            value = section.getboolean(f.name)
        elif isinstance(default, int) or default is None:
            value = None if raw.lower() in ("none", "") else int(raw)
        elif isinstance(default, float):
            value = float(raw)
        elif isinstance(default, tuple):
            value = tuple(float(v) if "." in v or "e" in v.lower() else int(v)
                          for v in re.split(r"[,\s]+", raw) if v)
        else:
            value = raw
        kwargs[f.name] = value
    return dataclasses.replace(base, **kwargs)


def _list(raw: str) -> list:
    return [v.strip() for v in raw.split(",") if v.strip()]


def train_config_from_parser(parser: configparser.ConfigParser, base: TrainConfig = TrainConfig()):
    def section(name):
        return parser[name] if parser.has_section(name) else {}

    weights = _coerce(LossWeights, section("train"), base.weights)
    generator = _coerce(GeneratorConfig, section("generator"), base.generator)
    discriminator = _coerce(DiscriminatorConfig, section("discriminator"), base.discriminator)
    ssim = _coerce(SSIMParams, section("ssim"), base.ssim_params)
    aug = _coerce(AugmentationChain, section("augmentation"), base.augmentation)
    cfg = dataclasses.replace(base, weights=weights, generator=generator, discriminator=discriminator,
                              ssim_params=ssim, augmentation=aug)
    head = section("head")
    if head:
        cfg = dataclasses.replace(
            cfg,
            head_hidden_dim=int(head.get("hidden_dim", cfg.head_hidden_dim)),
            head_output_dim=int(head.get("output_dim", cfg.head_output_dim)),
        )
    return _coerce(TrainConfig, section("train"), cfg)


def parse_plan(text: str, output_dir=None) -> ExperimentPlan:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise InvalidConfig(f"malformed plan file: {exc}") from exc
    if not parser.has_section("plan"):
        raise InvalidConfig("plan file needs a [plan] section")
    plan = parser["plan"]
    try:
        train = train_config_from_parser(parser)
        tiling = _coerce(TilingSpec, parser["tiling"]) if parser.has_section("tiling") else TilingSpec(
            tile=train.generator.input_size, overlap=train.generator.input_size // 8)
    except (ValueError, TypeError) as exc:
        raise InvalidConfig(str(exc)) from exc
    datasets, experiments = {}, []
    for name in parser.sections():
        kind, _, label = name.partition(":")
        if kind == "dataset":
            datasets[label] = dict(parser[name])
        elif kind == "experiment":
            sec = parser[name]
            flags = {k: sec.getboolean(k, fallback=False) for k in ("use_tv", "use_ssim", "use_cl")}
            overrides = {k: v for k, v in sec.items() if k.startswith("lambda_") or k == "tau"}
            weights = _coerce(LossWeights, overrides, train.weights) if overrides else None
            few = tuple(_list(sec["few_shot"])) if "few_shot" in sec else None
            experiments.append(Experiment(label, weights=weights, few_shot=few, **flags))
    out = Path(output_dir or plan.get("output_dir", "runs"))
    return ExperimentPlan(
        name=plan.get("name", "plan"),
        datasets=datasets,
        experiments=experiments,
        few_shot=_list(plan.get("few_shot", "all")),
        seeds=[int(s) for s in _list(plan.get("seeds", "0"))],
        output_dir=out,
        train=train,
        tiling=tiling,
        match_step_budget=plan.getboolean("match_step_budget", fallback=True),
    )


def load_plan(path=None, preset: Optional[str] = None, output_dir=None) -> ExperimentPlan:
    if preset is not None:
        if preset not in PRESETS:
            raise InvalidConfig(f"unknown preset {preset!r}; choose from {PRESETS}")
        text = resources.files("cldenoise.presets").joinpath(f"{preset}.ini").read_text()
    else:
        path = Path(path)
        if not path.exists():
            raise InvalidConfig(f"plan file {path} not found")
        text = path.read_text()
    return parse_plan(text, output_dir)


# -- running ------------------------------------------------------------------

def load_plan_dataset(name: str, spec: dict) -> DenoisingDataset:
    fmt = spec.get("format", "tiff-stack")
    patch = int(spec.get("patch_size", 256))
    test_fraction = float(spec.get("test_fraction", 0.1))
    seed = int(spec.get("seed", 0))
    if fmt == "synthetic":
        return synthetic_dataset(
            n_images=int(spec.get("n_images", 20)), size=int(spec.get("size", 96)),
            noise_sigma=float(spec.get("noise_sigma", 0.1)), seed=seed, patch_size=patch,
            test_fraction=test_fraction, name=name,
        )
    if "path" not in spec:
        raise InvalidConfig(f"dataset {name!r} needs a path")
    return ingest(spec["path"], fmt, patch_size=patch, test_fraction=test_fraction, seed=seed,
                  low_pct=float(spec.get("low_pct", 0.1)), high_pct=float(spec.get("high_pct", 99.9)),
                  name=name)


def cell_config(plan: ExperimentPlan, cell: Cell, full_n_train: Optional[int] = None) -> TrainConfig:
    """Training config of one cell.

    With ``match_step_budget`` and no explicit ``steps_per_epoch``, few-shot
    cells run as many steps per epoch as the all-data cell would.
    """
    exp = cell.experiment
    cfg = dataclasses.replace(plan.train, seed=cell.seed, use_tv=exp.use_tv, use_ssim=exp.use_ssim,
                              use_cl=exp.use_cl, weights=exp.weights or plan.train.weights)
    if plan.match_step_budget and cfg.steps_per_epoch is None and full_n_train:
        cfg = dataclasses.replace(cfg, steps_per_epoch=steps_per_epoch(full_n_train, cfg))
    return cfg


def cell_hash(cfg: TrainConfig, dataset: DenoisingDataset, tiling: TilingSpec, cell: Cell) -> str:
    blob = json.dumps({
        "code_version": __version__,
        "cell": cell.cell_id,
        "experiment": cell.experiment.name,
        "train": cfg.to_dict(),
        "tiling": dataclasses.asdict(tiling),
        "dataset": manifest_text(dataset),
    }, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class PlanResult:
    report: MetricReport
    ran: list
    skipped: list
    failed: list  # (cell_id, error type, message)
    report_path: Optional[Path] = None


def run_cell(plan: ExperimentPlan, cell: Cell, dataset: DenoisingDataset, force: bool = False):
    """Train and evaluate one cell; returns (report, ran) where ran is False when skipped."""
    from .plotting import plot_loss_curves

    subset = few_shot_subset(dataset, FewShotSpec.parse(cell.n_samples, seed=cell.seed))
    cfg = cell_config(plan, cell, dataset.n_train)
    digest = cell_hash(cfg, subset, plan.tiling, cell)
    cell_dir = plan.output_dir / "cells" / cell.cell_id
    done = cell_dir / "done"
    if not force and done.exists() and done.read_text().strip() == digest:
        return MetricReport.from_csv(cell_dir / "metrics.csv"), False
    cell_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(subset, cell_dir / "dataset_manifest.txt")
    state = fit(subset, cfg, out_dir=cell_dir)
    report = evaluate(state.generator, subset, tiling=plan.tiling, dataset_name=cell.dataset,
                      experiment=cell.experiment.name, n_samples=cell.n_samples)
    report.to_csv(cell_dir / "metrics.csv")
    plot_loss_curves(cell_dir / "loss.csv", cell_dir / "loss.png")
    done.write_text(digest + "\n")
    return report, True


def run_plan(plan: ExperimentPlan, force: bool = False, make_figures: bool = True) -> PlanResult:
    """Run every (dataset, experiment, few-shot size, seed) cell.

    Completed cells whose hash matches are skipped; a failing cell is logged
    to ``failures.csv`` and the remaining cells still run.
    """
    plan.output_dir.mkdir(parents=True, exist_ok=True)
    result = PlanResult(MetricReport(), [], [], [])
    cache = {}
    for cell in plan.cells():
        try:
            if cell.dataset not in cache:
                cache[cell.dataset] = load_plan_dataset(cell.dataset, plan.datasets[cell.dataset])
            report, ran = run_cell(plan, cell, cache[cell.dataset], force=force)
        except CLDenoiseError as exc:
            log.warning("cell %s failed: %s", cell.cell_id, exc)
            result.failed.append((cell.cell_id, type(exc).__name__, str(exc)))
            continue
        (result.ran if ran else result.skipped).append(cell.cell_id)
        result.report.extend(report)

    with open(plan.output_dir / "failures.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("cell", "error", "message"))
        writer.writerows(result.failed)
    result.report_path = result.report.to_csv(plan.output_dir / "report.csv")
    if result.report.rows:
        make_table([result.report], plan.output_dir, make_figures=make_figures,
                   complexity={e.name: e.n_terms for e in plan.experiments})
    return result


# -- tables -------------------------------------------------------------------

def experiment_complexity(name: str) -> int:
    if name in EXPERIMENTS:
        return sum(EXPERIMENTS[name].values())
    parts = [p.strip() for p in name.split("+") if p.strip()]
    return 0 if parts in ([], ["baseline"]) else len(parts)


def _ns_key(ns: str):
    return (0, 0) if ns == "all" else (1, -int(ns)) if ns.isdigit() else (2, ns)


@dataclass
class Table:
    cells: dict  # (dataset, experiment, n_samples) -> metric means
    best: dict  # (dataset, n_samples, metric) -> experiment
    datasets: list
    experiments: list
    n_samples: list

    def cell(self, dataset, experiment, n_samples):
        return self.cells.get((dataset, experiment, n_samples))

    def is_best(self, dataset, experiment, n_samples, metric) -> bool:
        return self.best.get((dataset, n_samples, metric)) == experiment

    def to_csv(self, path) -> Path:
        header = ["n_samples", "experiment"]
        for ds in self.datasets:
            header += [f"{ds}_{m}" for m in METRICS] + [f"{ds}_best"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for ns in self.n_samples:
                for exp in self.experiments:
                    if not any(self.cell(ds, exp, ns) for ds in self.datasets):
                        continue
                    row = [ns, exp]
                    for ds in self.datasets:
                        c = self.cell(ds, exp, ns)
                        row += [repr(c[m]) if c else "" for m in METRICS]
                        row.append(";".join(m for m in METRICS if self.is_best(ds, exp, ns, m)))
                    writer.writerow(row)
        return Path(path)

    def to_text(self) -> str:
        header = ["ns", "experiment"]
        for ds in self.datasets:
            header += [f"{ds} PSNR", "SSIM", "NRMSE"]
        lines = [header]
        for ns in self.n_samples:
            for exp in self.experiments:
                if not any(self.cell(ds, exp, ns) for ds in self.datasets):
                    continue
                row = [ns, exp]
                for ds in self.datasets:
                    c = self.cell(ds, exp, ns)
                    for m, fmt in zip(METRICS, ("{:.2f}", "{:.4f}", "{:.4f}")):
                        if c is None:
                            row.append("-")
                            continue
                        text = fmt.format(c[m])
                        row.append(text + ("*" if self.is_best(ds, exp, ns, m) else ""))
                lines.append(row)
        widths = [max(len(str(r[i])) for r in lines) for i in range(len(header))]
        out = ["  ".join(str(v).ljust(w) for v, w in zip(r, widths)).rstrip() for r in lines]
        out.insert(1, "-" * len(out[0]))
        out.append("* best value per dataset and sample count")
        return "\n".join(out) + "\n"


def build_table(report: MetricReport, complexity: Optional[dict] = None) -> Table:
    complexity = complexity or {}
    aggs = report.aggregates
    datasets, experiments, sizes = [], [], []
    for ds, exp, ns in aggs:
        for seq, v in ((datasets, ds), (experiments, exp), (sizes, ns)):
            if v not in seq:
                seq.append(v)
    order = list(EXPERIMENTS)
    seen = {e: i for i, e in enumerate(experiments)}
    experiments.sort(key=lambda e: (order.index(e) if e in order else len(order), seen[e]))
    sizes.sort(key=_ns_key)
    best = {}
    for ds in datasets:
        for ns in sizes:
            candidates = [e for e in experiments if (ds, e, ns) in aggs]
            for m in METRICS:
                sign = 1 if HIGHER_IS_BETTER[m] else -1
                # ties go to the experiment with fewer enabled terms
                best[(ds, ns, m)] = max(
                    candidates,
                    key=lambda e: (sign * aggs[(ds, e, ns)][m],
                                   -complexity.get(e, experiment_complexity(e)),
                                   -candidates.index(e)),
                )
    return Table(dict(aggs), best, datasets, experiments, sizes)


def make_table(reports: Sequence, out_dir=None, make_figures: bool = True,
               complexity: Optional[dict] = None) -> Table:
    """Aggregate one or more metric reports (paths or MetricReport objects).

    With ``out_dir``, writes ``aggregates.csv`` (long form), ``table.csv``
    (one row per sample count and experiment), ``table.txt`` and, optionally, metric bar charts.
    """
    merged = MetricReport()
    for rep in reports:
        merged.extend(rep if isinstance(rep, MetricReport) else MetricReport.from_csv(rep))
    table = build_table(merged, complexity)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        merged.aggregates_to_csv(out_dir / "aggregates.csv")
        table.to_csv(out_dir / "table.csv")
        (out_dir / "table.txt").write_text(table.to_text())
        if make_figures and table.cells:
            from .plotting import plot_metric_table

            for m in METRICS:
                plot_metric_table(table, out_dir / f"table_{m}.png", metric=m)
    return table

