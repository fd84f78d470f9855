"""Timing studies: PCA cost vs grid size, patch trade-offs, pipeline stages.

Benchmark cases run sequentially (each case may use its own internal
parallelism) and report the median wall time over a configurable repetition
count. Pipeline stage timings are taken from the pipeline's own
instrumentation rather than re-measured around it.
"""

from __future__ import annotations

import csv
import json
import os
import platform
from dataclasses import dataclass, field as dc_field, replace
from pathlib import Path
from statistics import median
from time import perf_counter

import numpy as np

from .errors import ParameterError
from .field_data import GrfParams, sample_grf
from .patching import extract_patches, make_layout
from .pca import (
    field_side_matrix,
    fit_patch_bank,
    fit_pca,
)
from .pipelines import evaluate, fit_pipeline, predict_fields, split_indices

STAGES = (
    "input_pca",
    "output_pca",
    "training",
    "inference",
    "refiner_training",
    "extraction",
)


def machine_descriptor():
    """Stable description of the host running the benchmark."""
    return {
        "platform": platform.platform(),
        "processor": platform.processor() or platform.machine(),
        "python": platform.python_version(),
        "cpu_count": os.cpu_count(),
    }


@dataclass(frozen=True)
class TimingRecord:
    """One labeled measurement: median wall seconds over its repetitions."""

    label: str
    stage: str
    wall_seconds: float
    repetitions: int
    config: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ParameterError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.wall_seconds < 0.0:
            raise ParameterError("wall_seconds must be >= 0")
        if self.repetitions < 1:
            raise ParameterError("repetitions must be >= 1")


def _timeit(fn, repetitions):
    """Median wall time of fn over repetitions, plus the last return value."""
    times = []
    value = None
    for _ in range(repetitions):
        start = perf_counter()
        value = fn()
        times.append(perf_counter() - start)
    return float(median(times)), value


def _record(label, stage, seconds, repetitions, **config):
    config["machine"] = machine_descriptor()
    return TimingRecord(label, stage, seconds, repetitions, config)


def bench_pca_vs_grid(
    grid_sizes,
    m,
    repetitions=3,
    variance_target=0.99,
    seed=0,
    memory_budget_bytes=2 << 30,
):
    """Global PCA fit time and retained component count per grid size.

    Fields are random coefficient draws at each resolution. Sizes whose
    working set would exceed the memory budget are skipped with an
    annotation instead of attempted.
    """
    if m < 2:
        raise ParameterError("need at least 2 samples to fit a PCA")
    records = []
    for d in grid_sizes:
        d = int(d)
        # data matrix plus Gram/eig scratch, conservative 4x factor
        estimate = 4 * m * d * d * 8
        if estimate > memory_budget_bytes:
            records.append(
                _record(
                    f"global_pca_D{d}",
                    "input_pca",
                    0.0,
                    1,
                    resolution=d,
                    samples=m,
                    skipped=f"estimated {estimate} bytes exceeds budget {memory_budget_bytes}",
                )
            )
            continue
        params = GrfParams(seed=seed)
        fields = np.stack([sample_grf(params, d, i) for i in range(m)])
        matrix = field_side_matrix(fields)
        seconds, basis = _timeit(
            lambda: fit_pca(matrix, variance_target=variance_target), repetitions
        )
        records.append(
            _record(
                f"global_pca_D{d}",
                "input_pca",
                seconds,
                repetitions,
                resolution=d,
                samples=m,
                components=basis.k,
                variance_target=variance_target,
            )
        )
    return records


def bench_patch_tradeoff(
    pairs,
    dataset,
    repetitions=3,
    variance_target=0.99,
    variant_spec=None,
    threads=1,
):
    """Extraction and bank-fit cost per (patch size, stride) pair.

    Returns (records, table). Each table row carries the exact patch count
    from the shared layout rule plus the measured times; when variant_spec
    is given (an l2l VariantSpec template), the pair is additionally trained
    end to end and held-out MSE/SSIM are filled in.
    """
    records = []
    table = []
    fields = dataset.f.astype(np.float64)
    for p, s in pairs:
        layout = make_layout(dataset.resolution, int(p), int(s))
        label = f"patch_p{p}_s{s}"

        t_extract, _ = _timeit(lambda: extract_patches(fields[0], layout), repetitions)
        t_fit, bank = _timeit(
            lambda: fit_patch_bank(
                fields, layout, variance_target=variance_target, threads=threads
            ),
            repetitions,
        )
        records.append(
            _record(
                label,
                "extraction",
                t_extract,
                repetitions,
                patch_size=int(p),
                stride=int(s),
                n_patches=layout.n_patches,
            )
        )
        records.append(
            _record(
                label,
                "input_pca",
                t_fit,
                repetitions,
                patch_size=int(p),
                stride=int(s),
                n_patches=layout.n_patches,
                components=sum(bank.segment_widths),
                variance_target=variance_target,
            )
        )
        row = {
            "patch_size": int(p),
            "stride": int(s),
            "n_patches": layout.n_patches,
            "extraction_seconds": t_extract,
            "bank_fit_seconds": t_fit,
            "mse": None,
            "ssim": None,
        }
        if variant_spec is not None:
            spec = replace(
                variant_spec,
                kind="l2l",
                patch_size=int(p),
                stride=int(s),
                blend=int(s) < int(p),
            )
            model, _ = fit_pipeline(dataset, spec, threads=threads)
            report, _ = evaluate(model, dataset, threads=threads)
            row["mse"] = report.mse
            row["ssim"] = report.ssim
        table.append(row)
    return records, table


def bench_pipeline(variants, dataset, inference_repetitions=3, threads=1):
    """Fit each variant once and report its stage costs and total.

    variants is a list of (label, VariantSpec). Stage timings come from the
    pipeline's own breakdown; inference is measured on the held-out split
    with a median over repetitions. Returns (records, summary) where the
    summary maps labels to totals and, when a "global"-kind variant is
    present, speedup ratios of every variant against it.
    """
    if len(variants) < 1:
        raise ParameterError("need at least one variant to benchmark")
    records = []
    totals = {}
    inference = {}
    global_label = None
    for label, spec in variants:
        if spec.kind == "global" and global_label is None:
            global_label = label
        model, timing = fit_pipeline(dataset, spec, threads=threads)
        for stage in ("input_pca", "output_pca", "extraction", "training", "refiner_training"):
            records.append(
                _record(
                    label,
                    stage,
                    timing[stage],
                    1,
                    kind=spec.kind,
                    resolution=dataset.resolution,
                    samples=int(dataset.n),
                )
            )
        totals[label] = timing["total"]

        _, test_idx = split_indices(dataset.n, spec)
        held_out = dataset.f[test_idx].astype(np.float64)
        t_infer, _ = _timeit(
            lambda: predict_fields(model, held_out), inference_repetitions
        )
        inference[label] = t_infer
        records.append(
            _record(
                label,
                "inference",
                t_infer,
                inference_repetitions,
                kind=spec.kind,
                resolution=dataset.resolution,
                samples=int(len(test_idx)),
            )
        )

    speedup = {}
    if global_label is not None:
        base = totals[global_label]
        speedup = {
            label: base / totals[label] for label in totals if label != global_label
        }
    summary = {
        "totals": totals,
        "inference_seconds": inference,
        "speedup_vs_global": speedup,
        "baseline": global_label,
        "resolution": dataset.resolution,
        "sample_count": int(dataset.n),
        "machine": machine_descriptor(),
    }
    return records, summary


_FIXED_COLUMNS = ("label", "stage", "wall_seconds", "repetitions")


def write_records_csv(records, path):
    """One row per record: label, stage, wall_seconds, repetitions, then the
    union of scalar config keys in sorted order, then the machine descriptor
    as a JSON string."""
    extras = sorted(
        {
            key
            for rec in records
            for key, val in rec.config.items()
            if key != "machine" and (val is None or isinstance(val, (str, int, float, bool)))
        }
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(list(_FIXED_COLUMNS) + extras + ["machine"])
        for rec in records:
            row = [rec.label, rec.stage, repr(rec.wall_seconds), rec.repetitions]
            row += [rec.config.get(key, "") for key in extras]
            row.append(json.dumps(rec.config.get("machine", {}), sort_keys=True))
            writer.writerow(row)


def write_summary_json(summary, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")


__all__ = [
    "STAGES",
    "TimingRecord",
    "machine_descriptor",
    "bench_pca_vs_grid",
    "bench_patch_tradeoff",
    "bench_pipeline",
    "write_records_csv",
    "write_summary_json",
]
