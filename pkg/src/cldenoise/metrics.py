"""Evaluation metrics (PSNR, SSIM, NRMSE) and per-image reports."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DegenerateReference, EmptyTestSet, SchemaMismatch, ShapeMismatch
from .losses import SSIMParams, ssim_index

REPORT_COLUMNS = ("dataset", "experiment", "n_samples", "image_id", "psnr", "ssim", "nrmse")
AGGREGATE_COLUMNS = ("dataset", "experiment", "n_samples", "n_images", "psnr", "ssim", "nrmse")
METRICS = ("psnr", "ssim", "nrmse")


def _pair(reference, candidate):
    ref = np.asarray(reference, dtype=np.float64)
    cand = np.asarray(candidate, dtype=np.float64)
    if ref.shape != cand.shape:
        raise ShapeMismatch(f"shapes differ: {ref.shape} vs {cand.shape}")
    return ref, cand


def psnr(reference, candidate, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` when the images match."""
    ref, cand = _pair(reference, candidate)
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    mse = np.mean((ref - cand) ** 2)
    if mse == 0:
        return math.inf
    return float(10 * np.log10(data_range ** 2 / mse))


def ssim_metric(reference, candidate, params: SSIMParams = SSIMParams()) -> float:
    # same code path as the training loss
    ref, cand = _pair(reference, candidate)
    return float(ssim_index(ref, cand, params))


def nrmse(reference, candidate, normalization: str = "range") -> float:
    ref, cand = _pair(reference, candidate)
    rmse = np.sqrt(np.mean((ref - cand) ** 2))
    if normalization == "range":
        denom = ref.max() - ref.min()
    elif normalization == "mean":
        denom = ref.mean()
    elif normalization == "euclidean":
        denom = np.sqrt(np.mean(ref ** 2))
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    if denom == 0:
        raise DegenerateReference(f"{normalization} normalization of the reference is zero")
    return float(rmse / denom)


@dataclass(frozen=True)
class MetricRow:
    dataset: str
    experiment: str
    n_samples: str
    image_id: int
    psnr: float
    ssim: float
    nrmse: float


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def sorted_rows(self):
        return sorted(self.rows, key=lambda r: (r.dataset, r.experiment, r.n_samples, r.image_id))

    @property
    def aggregates(self) -> dict:
        """Mean metrics keyed by (dataset, experiment, n_samples)."""
        groups = defaultdict(list)
        for row in self.rows:
            groups[(row.dataset, row.experiment, row.n_samples)].append(row)
        out = {}
        for key, rows in groups.items():
            out[key] = {m: float(np.mean([getattr(r, m) for r in rows])) for m in METRICS}
            out[key]["n_images"] = len(rows)
        return out

    def extend(self, other: "MetricReport") -> "MetricReport":
        self.rows.extend(other.rows)
        return self

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(REPORT_COLUMNS)
            for r in self.sorted_rows():
                writer.writerow([r.dataset, r.experiment, r.n_samples, r.image_id,
                                 repr(r.psnr), repr(r.ssim), repr(r.nrmse)])
        return path

    def aggregates_to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(AGGREGATE_COLUMNS)
            for (ds, exp, ns), agg in sorted(self.aggregates.items()):
                writer.writerow([ds, exp, ns, agg["n_images"],
                                 repr(agg["psnr"]), repr(agg["ssim"]), repr(agg["nrmse"])])
        return path

    @classmethod
    def from_csv(cls, path) -> "MetricReport":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader, ()))
            if header != REPORT_COLUMNS:
                raise SchemaMismatch(f"{path}: header {header} != {REPORT_COLUMNS}")
            rows = [
                MetricRow(ds, exp, ns, int(iid), float(p), float(s), float(e))
                for ds, exp, ns, iid, p, s, e in reader
            ]
        return cls(rows)


def evaluate(model, dataset, *, tiling=None, ssim_params: SSIMParams = SSIMParams(),
             data_range: float = 1.0, nrmse_normalization: str = "range",
             dataset_name: Optional[str] = None, experiment: str = "model",
             n_samples: Optional[str] = None) -> MetricReport:
    """Denoise every test frame and score it against the clean reference.

    ``model`` is anything :func:`cldenoise.inference.denoise_frame` accepts.
    """
    from .inference import TilingSpec, denoise_frame

    pairs = dataset.test_pairs()
    if not pairs:
        raise EmptyTestSet(f"dataset {dataset.name!r} has no test pairs")
    tiling = tiling or TilingSpec(tile=dataset.patch_size, overlap=dataset.patch_size // 8)
    name = dataset_name or dataset.name
    ns = n_samples or dataset.few_shot.label
    report = MetricReport()
    for image_id, noisy, clean in pairs:
        out = denoise_frame(model, noisy, tiling)
        report.rows.append(MetricRow(
            name, experiment, ns, int(image_id),
            psnr(clean, out, data_range),
            ssim_metric(clean, out, ssim_params),
            nrmse(clean, out, nrmse_normalization),
        ))
    report.rows = report.sorted_rows()
    return report
