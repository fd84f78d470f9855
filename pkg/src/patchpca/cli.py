"""Command-line entry point: generate, fit, predict, evaluate, bench, inspect.

Configuration lives in a single YAML tree; every flag that mirrors a config
key names that key in its help text, and flag values override the file. The
full effective configuration is echoed into each output directory so any
artifact can be reproduced from it.

Exit codes: 0 success, 1 usage or validation, 2 runtime or numeric failure,
3 I/O or file-format failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from .bench import (
    bench_patch_tradeoff,
    bench_pca_vs_grid,
    bench_pipeline,
    write_records_csv,
    write_summary_json,
)
from .errors import (
    DataFormatError,
    MagicError,
    ParameterError,
    PatchPcaError,
)
from .field_data import (
    DATASET_MAGIC,
    GrfParams,
    SolverConfig,
    dataset_overview,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from .metrics import write_report
from .neuralnet import TrainConfig
from .pipelines import (
    MODEL_MAGIC,
    RefinerSpec,
    VariantSpec,
    evaluate,
    fit_pipeline,
    load_model,
    model_overview,
    predict,
    predict_fields,
    save_model,
)

DEFAULT_CONFIG = {
    "output_dir": None,
    "threads": None,
    "dataset": {
        "n": 100,
        "grid": 64,
        "alpha": 3.0,
        "tau": 3.0,
        "seed": 0,
        "method": "cg",
        "tolerance": 1e-10,
        "max_iterations": 0,
        "path": None,
    },
    "variant": {
        "kind": "global",
        "patch_size": 16,
        "stride": None,
        "blend": False,
        "refine": False,
        "refiner_channels": [16, 16],
        "kernel_size": 5,
        "input_variance": 0.999,
        "input_k": None,
        "output_variance": 0.9999,
        "output_k": None,
        "hidden": [256, 256],
        "split_seed": 0,
        "test_fraction": 0.1,
    },
    "training": {
        "batch_size": 32,
        "initial_lr": 1e-3,
        "l2_penalty": 1e-4,
        "epochs": 500,
        "plateau_patience": 30,
        "plateau_factor": 0.5,
        "min_lr": 1e-6,
        "seed": 0,
        "validation_fraction": 0.1,
    },
    "refiner_training": {
        "batch_size": 8,
        "initial_lr": 1e-3,
        "l2_penalty": 1e-4,
        "epochs": 500,
        "plateau_patience": 30,
        "plateau_factor": 0.5,
        "min_lr": 1e-6,
        "seed": 0,
        "validation_fraction": 0.1,
    },
    "metrics": {"pdf_bins": 64, "ssim_window": 7},
    "bench": {
        "grids": [32, 64, 128],
        "samples": 200,
        "pairs": [[16, 8], [16, 16]],
        "repetitions": 3,
        "variants": ["global", "l2l"],
    },
}

VARIANT_PRESETS = ("global", "l2g", "l2l", "l2l-overlap", "l2l-refine")


def _check_keys(raw, template, prefix=""):
    for key, value in raw.items():
        path = f"{prefix}{key}"
        if not isinstance(template, dict) or key not in template:
            raise ParameterError(f"unknown config key {path!r}")
        if isinstance(template[key], dict):
            if not isinstance(value, dict):
                raise ParameterError(f"config key {path!r} must be a mapping")
            _check_keys(value, template[key], prefix=path + ".")


def _merge(base, override):
    for key, value in override.items():
        if isinstance(value, dict):
            _merge(base[key], value)
        else:
            base[key] = value


def load_config(path):
    """Defaults, deep-merged with the YAML file at path if one is given."""
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path is None:
        return config
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as err:
        raise ParameterError(f"config file {path} is not valid YAML: {err}") from err
    if raw is None:
        return config
    if not isinstance(raw, dict):
        raise ParameterError(f"config file {path} must contain a mapping at top level")
    _check_keys(raw, DEFAULT_CONFIG)
    _merge(config, raw)
    return config


def apply_overrides(config, args):
    """Copy flag values over config entries; dests encode paths with '__'."""
    values = vars(args)
    if values.get("out") is not None:
        config["output_dir"] = values["out"]
    if values.get("threads") is not None:
        config["threads"] = values["threads"]
    for dest, value in values.items():
        if value is None or "__" not in dest:
            continue
        node = config
        *heads, leaf = dest.split("__")
        for head in heads:
            node = node[head]
        node[leaf] = value


def resolve_threads(config):
    value = config.get("threads")
    if value is None:
        env = os.environ.get("PPCA_THREADS")
        if env is not None:
            try:
                value = int(env)
            except ValueError as err:
                raise ParameterError(f"PPCA_THREADS must be an integer, got {env!r}") from err
    if value is None:
        value = os.cpu_count() or 1
    value = int(value)
    if value < 1:
        raise ParameterError(f"threads must be >= 1, got {value}")
    config["threads"] = value
    return value


def require_outdir(config, create=True):
    out = config.get("output_dir")
    if not out:
        raise ParameterError("an output directory is required (--out or output_dir)")
    out = Path(out)
    if create:
        out.mkdir(parents=True, exist_ok=True)
    return out


def echo_config(config, outdir, command, **extras):
    payload = copy.deepcopy(config)
    payload["command"] = {"name": command, **extras}
    text = yaml.safe_dump(payload, sort_keys=True, default_flow_style=False)
    (Path(outdir) / "effective_config.yaml").write_text(text)


def build_variant_spec(config, **overrides):
    v = config["variant"]
    train = TrainConfig(**config["training"])
    refiner = None
    if v["refine"]:
        refiner = RefinerSpec(
            channels=tuple(v["refiner_channels"]),
            kernel_size=int(v["kernel_size"]),
            train=TrainConfig(**config["refiner_training"]),
        )
    fields = dict(
        kind=v["kind"],
        patch_size=int(v["patch_size"]),
        stride=None if v["stride"] is None else int(v["stride"]),
        blend=bool(v["blend"]),
        refiner=refiner,
        input_variance=float(v["input_variance"]),
        input_k=None if v["input_k"] is None else int(v["input_k"]),
        output_variance=float(v["output_variance"]),
        output_k=None if v["output_k"] is None else int(v["output_k"]),
        hidden=tuple(int(h) for h in v["hidden"]),
        train=train,
        split_seed=int(v["split_seed"]),
        test_fraction=float(v["test_fraction"]),
    )
    fields.update(overrides)
    return VariantSpec(**fields)


def preset_variant(name, config):
    """Named pipeline configurations used by the benchmark command."""
    v = config["variant"]
    if name == "global":
        return build_variant_spec(config, kind="global", blend=False, refiner=None)
    if name == "l2g":
        return build_variant_spec(config, kind="l2g", blend=False, refiner=None)
    if name == "l2l":
        return build_variant_spec(
            config, kind="l2l", stride=None, blend=False, refiner=None
        )
    if name == "l2l-overlap":
        stride = v["stride"] if v["stride"] is not None else int(v["patch_size"]) // 2
        return build_variant_spec(
            config, kind="l2l", stride=int(stride), blend=True, refiner=None
        )
    if name == "l2l-refine":
        refiner = RefinerSpec(
            channels=tuple(v["refiner_channels"]),
            kernel_size=int(v["kernel_size"]),
            train=TrainConfig(**config["refiner_training"]),
        )
        return build_variant_spec(
            config, kind="l2l", stride=None, blend=False, refiner=refiner
        )
    raise ParameterError(
        f"unknown variant preset {name!r}; choose from {VARIANT_PRESETS}"
    )


def _require_path(value, what, hint):
    if not value:
        raise ParameterError(f"a {what} is required ({hint})")
    return Path(value)


def _load_array(path):
    try:
        return np.load(path, allow_pickle=False)
    except ValueError as err:
        raise DataFormatError(f"{path} is not a readable array file: {err}") from err


# ---------------------------------------------------------------------------
# Commands.


def cmd_generate(config, args, threads):
    outdir = require_outdir(config)
    d = config["dataset"]
    params = GrfParams(alpha=float(d["alpha"]), tau=float(d["tau"]), seed=int(d["seed"]))
    solver = SolverConfig(
        tolerance=float(d["tolerance"]),
        max_iterations=int(d["max_iterations"]),
        method=d["method"],
    )
    dataset = generate_dataset(int(d["n"]), int(d["grid"]), params, solver, threads=threads)
    path = outdir / "dataset.ppca"
    save_dataset(dataset, path)
    echo_config(config, outdir, "generate")
    print(f"wrote {dataset.n} samples at {dataset.resolution}x{dataset.resolution} to {path}")
    print(
        f"f: mean {dataset.f.mean():.6e} std {dataset.f.std():.6e}; "
        f"u: mean {dataset.u.mean():.6e} std {dataset.u.std():.6e}"
    )
    return 0


def cmd_fit(config, args, threads):
    outdir = require_outdir(config)
    spec = build_variant_spec(config)
    data_path = _require_path(
        args.dataset or config["dataset"]["path"], "dataset file", "--dataset or dataset.path"
    )
    dataset = load_dataset(data_path)
    model, timing = fit_pipeline(dataset, spec, threads=threads)
    model_path = outdir / "model.ppcm"
    save_model(model, model_path)
    with open(outdir / "timing.json", "w") as handle:
        json.dump(timing, handle, sort_keys=True, indent=2)
        handle.write("\n")
    echo_config(config, outdir, "fit", dataset=str(data_path))
    print(f"fitted {spec.kind} variant on {model.meta['train_count']} training samples")
    print(f"latent widths: in {model.latent_in}, out {model.latent_out}")
    for stage in ("input_pca", "output_pca", "extraction", "training", "refiner_training"):
        print(f"  {stage}: {timing[stage]:.3f} s")
    print(f"total {timing['total']:.3f} s; model at {model_path}")
    return 0


def cmd_predict(config, args, threads):
    outdir = require_outdir(config)
    model = load_model(_require_path(args.model, "model file", "--model"))
    source = _require_path(args.input, "input field file or directory", "--input")
    written = []
    if source.is_dir():
        inputs = sorted(source.glob("*.npy"))
        if not inputs:
            raise ParameterError(f"no .npy field files found in {source}")
        for item in inputs:
            arr = _load_array(item)
            out_path = outdir / f"{item.stem}_pred.npy"
            np.save(out_path, predict(model, arr))
            written.append((item.name, out_path.name))
        manifest = {
            "inputs": [pair[0] for pair in written],
            "outputs": [pair[1] for pair in written],
        }
        with open(outdir / "manifest.json", "w") as handle:
            json.dump(manifest, handle, sort_keys=True, indent=2)
            handle.write("\n")
    else:
        arr = _load_array(source)
        out_path = outdir / f"{source.stem}_pred.npy"
        if arr.ndim == 3:
            np.save(out_path, predict_fields(model, arr))
        else:
            np.save(out_path, predict(model, arr))
        written.append((source.name, out_path.name))
    echo_config(config, outdir, "predict", model=str(args.model), input=str(source))
    print(f"wrote {len(written)} prediction file(s) to {outdir}")
    return 0


def cmd_evaluate(config, args, threads):
    outdir = require_outdir(config)
    model = load_model(_require_path(args.model, "model file", "--model"))
    data_path = _require_path(
        args.dataset or config["dataset"]["path"], "dataset file", "--dataset or dataset.path"
    )
    dataset = load_dataset(data_path)
    report, extras = evaluate(
        model,
        dataset,
        split=args.split,
        threads=threads,
        pdf_bins=int(config["metrics"]["pdf_bins"]),
        ssim_window=int(config["metrics"]["ssim_window"]),
    )
    write_report(report, extras, outdir)
    echo_config(
        config, outdir, "evaluate", model=str(args.model), dataset=str(data_path),
        split=args.split,
    )
    tag = " (in-sample)" if report.in_sample else ""
    print(f"evaluated {report.sample_count} samples{tag}")
    print(f"mse {report.mse:.6e}  mae {report.mae:.6e}  ssim {report.ssim:.6f}")
    return 0


def cmd_bench(config, args, threads):
    outdir = require_outdir(config)
    b = config["bench"]
    repetitions = int(b["repetitions"])
    if repetitions < 1:
        raise ParameterError(f"repetitions must be >= 1, got {repetitions}")

    if args.mode == "pca-grid":
        records = bench_pca_vs_grid(
            [int(g) for g in b["grids"]], int(b["samples"]), repetitions=repetitions
        )
        write_records_csv(records, outdir / "pca_grid.csv")
        print(f"wrote {len(records)} records to {outdir / 'pca_grid.csv'}")
    elif args.mode == "patch-sweep":
        data_path = _require_path(
            args.dataset or config["dataset"]["path"],
            "dataset file",
            "--dataset or dataset.path",
        )
        dataset = load_dataset(data_path)
        pairs = [(int(p), int(s)) for p, s in b["pairs"]]
        records, table = bench_patch_tradeoff(
            pairs, dataset, repetitions=repetitions, threads=threads
        )
        write_records_csv(records, outdir / "patch_records.csv")
        with open(outdir / "patch_table.csv", "w", newline="") as handle:
            writer = csv.writer(handle)
            columns = [
                "patch_size",
                "stride",
                "n_patches",
                "extraction_seconds",
                "bank_fit_seconds",
                "mse",
                "ssim",
            ]
            writer.writerow(columns)
            for row in table:
                writer.writerow(["" if row[c] is None else repr(row[c]) for c in columns])
        print(f"wrote {len(table)} patch rows to {outdir / 'patch_table.csv'}")
    elif args.mode == "pipeline":
        data_path = _require_path(
            args.dataset or config["dataset"]["path"],
            "dataset file",
            "--dataset or dataset.path",
        )
        dataset = load_dataset(data_path)
        names = [str(n) for n in b["variants"]]
        variants = [(name, preset_variant(name, config)) for name in names]
        records, summary = bench_pipeline(variants, dataset, threads=threads)
        write_records_csv(records, outdir / "pipeline_records.csv")
        write_summary_json(summary, outdir / "pipeline_summary.json")
        for label in names:
            print(f"{label}: total {summary['totals'][label]:.3f} s")
        for label, ratio in summary["speedup_vs_global"].items():
            print(f"speedup {label} vs {summary['baseline']}: {ratio:.2f}x")
    else:  # pragma: no cover - argparse restricts choices
        raise ParameterError(f"unknown bench mode {args.mode!r}")
    echo_config(config, outdir, "bench", mode=args.mode)
    return 0


def cmd_inspect(config, args, threads):
    path = Path(args.path)
    with open(path, "rb") as handle:
        magic = handle.read(4)
    if magic == DATASET_MAGIC:
        overview = dataset_overview(path)
    elif magic == MODEL_MAGIC:
        overview = model_overview(path)
    else:
        raise MagicError(f"{DATASET_MAGIC} or {MODEL_MAGIC}", magic)
    print(json.dumps(overview, sort_keys=True, indent=2))
    return 0


# ---------------------------------------------------------------------------
# Parser.


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _int_list(text):
    try:
        return [int(part) for part in str(text).split(",") if part != ""]
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers: {err}")


def _pair_list(text):
    pairs = []
    try:
        for part in str(text).split(","):
            p, s = part.split(":")
            pairs.append([int(p), int(s)])
    except ValueError as err:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated patch:stride pairs like 16:8: {err}"
        )
    return pairs


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument(
        "--config", metavar="FILE", help="YAML configuration file (flags override it)"
    )
    common.add_argument(
        "--out", metavar="DIR", help="output directory for artifacts [config: output_dir]"
    )
    common.add_argument(
        "--threads",
        type=int,
        help="worker threads; falls back to PPCA_THREADS, then CPU count [config: threads]",
    )

    parser = _Parser(
        prog="patchpca",
        description="Patch-based PCA neural operator for the 2D Poisson problem.",
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser(
        "generate", parents=[common], help="synthesize a coefficient/solution dataset"
    )
    gen.add_argument("--n", type=int, dest="dataset__n", help="number of samples [config: dataset.n]")
    gen.add_argument("--grid", type=int, dest="dataset__grid", help="grid resolution D [config: dataset.grid]")
    gen.add_argument("--alpha", type=float, dest="dataset__alpha", help="random-field smoothness exponent [config: dataset.alpha]")
    gen.add_argument("--tau", type=float, dest="dataset__tau", help="random-field inverse length scale [config: dataset.tau]")
    gen.add_argument("--seed", type=int, dest="dataset__seed", help="dataset seed [config: dataset.seed]")
    gen.add_argument(
        "--method",
        choices=["cg", "dst"],
        dest="dataset__method",
        help="Poisson solver [config: dataset.method]",
    )
    gen.add_argument("--tolerance", type=float, dest="dataset__tolerance", help="solver residual tolerance [config: dataset.tolerance]")
    gen.add_argument(
        "--max-iterations",
        type=int,
        dest="dataset__max_iterations",
        help="solver iteration cap, 0 means 10*D [config: dataset.max_iterations]",
    )
    gen.set_defaults(func=cmd_generate)

    fit = sub.add_parser("fit", parents=[common], help="fit a pipeline variant")
    fit.add_argument("--dataset", metavar="FILE", help="dataset file to fit on [config: dataset.path]")
    fit.add_argument(
        "--variant",
        choices=["global", "l2g", "l2l"],
        dest="variant__kind",
        help="pipeline kind [config: variant.kind]",
    )
    fit.add_argument("--patch", type=int, dest="variant__patch_size", help="patch size [config: variant.patch_size]")
    fit.add_argument("--stride", type=int, dest="variant__stride", help="patch stride, defaults to patch size [config: variant.stride]")
    fit.add_argument(
        "--blend",
        choices=["hanning"],
        dest="variant__blend",
        help="window-blend overlapping patches [config: variant.blend]",
    )
    fit.add_argument(
        "--refine",
        action="store_const",
        const=True,
        dest="variant__refine",
        help="append a convolutional refiner [config: variant.refine]",
    )
    fit.add_argument(
        "--refiner-channels",
        type=_int_list,
        dest="variant__refiner_channels",
        help="refiner hidden channels, comma-separated [config: variant.refiner_channels]",
    )
    fit.add_argument("--kernel", type=int, dest="variant__kernel_size", help="refiner kernel size [config: variant.kernel_size]")
    fit.add_argument("--input-variance", type=float, dest="variant__input_variance", help="retained variance, input side [config: variant.input_variance]")
    fit.add_argument("--input-k", type=int, dest="variant__input_k", help="fixed latent width, input side [config: variant.input_k]")
    fit.add_argument("--output-variance", type=float, dest="variant__output_variance", help="retained variance, output side [config: variant.output_variance]")
    fit.add_argument("--output-k", type=int, dest="variant__output_k", help="fixed latent width, output side [config: variant.output_k]")
    fit.add_argument("--hidden", type=_int_list, dest="variant__hidden", help="operator hidden widths, comma-separated [config: variant.hidden]")
    fit.add_argument("--split-seed", type=int, dest="variant__split_seed", help="train/test split seed [config: variant.split_seed]")
    fit.add_argument("--test-fraction", type=float, dest="variant__test_fraction", help="held-out fraction [config: variant.test_fraction]")
    fit.add_argument("--epochs", type=int, dest="training__epochs", help="training epochs [config: training.epochs]")
    fit.add_argument("--batch-size", type=int, dest="training__batch_size", help="mini-batch size [config: training.batch_size]")
    fit.add_argument("--lr", type=float, dest="training__initial_lr", help="initial learning rate [config: training.initial_lr]")
    fit.add_argument("--l2", type=float, dest="training__l2_penalty", help="L2 penalty weight [config: training.l2_penalty]")
    fit.add_argument("--patience", type=int, dest="training__plateau_patience", help="plateau patience, epochs [config: training.plateau_patience]")
    fit.add_argument("--min-lr", type=float, dest="training__min_lr", help="learning-rate floor [config: training.min_lr]")
    fit.add_argument("--val-fraction", type=float, dest="training__validation_fraction", help="validation fraction [config: training.validation_fraction]")
    fit.add_argument("--train-seed", type=int, dest="training__seed", help="training seed [config: training.seed]")
    fit.set_defaults(func=cmd_fit)

    pred = sub.add_parser(
        "predict", parents=[common], help="run a model on field files"
    )
    pred.add_argument("--model", metavar="FILE", help="model file (no config equivalent)")
    pred.add_argument(
        "--input",
        metavar="PATH",
        help=".npy field file, stack, or directory of .npy files (no config equivalent)",
    )
    pred.set_defaults(func=cmd_predict)

    ev = sub.add_parser("evaluate", parents=[common], help="score a model on a dataset split")
    ev.add_argument("--model", metavar="FILE", help="model file (no config equivalent)")
    ev.add_argument("--dataset", metavar="FILE", help="dataset file [config: dataset.path]")
    ev.add_argument(
        "--split",
        choices=["test", "train"],
        default="test",
        help="which split to score; train is flagged in-sample (no config equivalent)",
    )
    ev.add_argument("--pdf-bins", type=int, dest="metrics__pdf_bins", help="value-histogram bins [config: metrics.pdf_bins]")
    ev.add_argument("--ssim-window", type=int, dest="metrics__ssim_window", help="SSIM window size [config: metrics.ssim_window]")
    ev.set_defaults(func=cmd_evaluate)

    ben = sub.add_parser("bench", parents=[common], help="run timing studies")
    ben.add_argument(
        "mode",
        choices=["pca-grid", "patch-sweep", "pipeline"],
        help="which study to run",
    )
    ben.add_argument("--dataset", metavar="FILE", help="dataset file for dataset-driven modes [config: dataset.path]")
    ben.add_argument("--grids", type=_int_list, dest="bench__grids", help="grid sizes, comma-separated [config: bench.grids]")
    ben.add_argument("--samples", type=int, dest="bench__samples", help="samples per timing case [config: bench.samples]")
    ben.add_argument(
        "--pairs",
        type=_pair_list,
        dest="bench__pairs",
        help="patch:stride pairs like 16:8,32:16 [config: bench.pairs]",
    )
    ben.add_argument("--repetitions", type=int, dest="bench__repetitions", help="timing repetitions, median reported [config: bench.repetitions]")
    ben.add_argument(
        "--variants",
        type=lambda s: [part for part in s.split(",") if part],
        dest="bench__variants",
        help=f"pipeline presets from {VARIANT_PRESETS}, comma-separated [config: bench.variants]",
    )
    ben.set_defaults(func=cmd_bench)

    ins = sub.add_parser("inspect", parents=[common], help="print dataset or model file headers")
    ins.add_argument("path", help="dataset or model file (no config equivalent)")
    ins.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config)
        apply_overrides(config, args)
        threads = resolve_threads(config)
        return args.func(config, args, threads)
    except ParameterError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (DataFormatError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except PatchPcaError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
