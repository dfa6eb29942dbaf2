"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error (missing
or malformed dataset/model file, shape mismatch), 3 numerical failure.
Every command writes ``resolved_config.ini`` into its output directory, which
is ``--out-dir``, else ``run.output_dir`` from the config, else
``$EEGFLOW_OUTPUT_DIR``, else ``./eegflow_out``.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError, ShapeError
from .config import ConfigError, RunConfig, format_config, load_config
from .layers import FlowModel, build_architecture, flow_forward, flow_inverse
from .modelio import ModelFormatError, load_model, save_model
from .procedures import (dimension_sweep, match_generated_real, mean_spectra, prototype_invert,
                         sample_signals, spectra_band_error)
from .selfcheck import check_model_file, format_table, run_all
from .signals import (VIRTUAL_CHANNEL, DatasetError, SignalDataset, load_dataset,
                      pad_virtual_channel, save_dataset, split_train_valid, strip_virtual_channel,
                      synth_generate)
from .training import NumericalError, class_log_likelihoods, log_likelihoods, train
from .transport import TransportError

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ------------------------------------------------------------------- helpers

def _setup(args) -> tuple[RunConfig, Path]:
    config = load_config(args.config, args.set)
    if args.out_dir:
        config.run.output_dir = args.out_dir
    out = config.run.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.ini").write_text(format_config(config))
    return config, out


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _num(x: float) -> str:
    return repr(float(x))


def _read_dataset(path) -> SignalDataset:
    try:
        return load_dataset(path)
    except FileNotFoundError:
        raise DatasetError(f"dataset file not found: {path}") from None


def _read_model(path) -> FlowModel:
    try:
        return load_model(path)
    except FileNotFoundError:
        raise ModelFormatError(f"model file not found: {path}") from None


def _fit_to_model(ds: SignalDataset, model: FlowModel) -> SignalDataset:
    """Pad the virtual channel if the model was trained with one; check shapes."""
    if ds.shape[0] + 1 == model.input_shape[0] and model.channel_names[-1:] == [VIRTUAL_CHANNEL]:
        ds = pad_virtual_channel(ds)
    if ds.shape != model.input_shape:
        raise DatasetError(f"dataset trials are {ds.shape} (C, T) but the model expects {model.input_shape}")
    if ds.n_classes > model.prior.n_classes:
        raise DatasetError(f"dataset has {ds.n_classes} classes, model only {model.prior.n_classes}")
    return ds


def _class_index(model: FlowModel, value: str) -> int:
    if value in model.class_names:
        return model.class_names.index(value)
    try:
        y = int(value)
    except ValueError:
        raise UsageError(f"unknown class {value!r}; model classes: {', '.join(model.class_names)}") from None
    if not 0 <= y < model.prior.n_classes:
        raise UsageError(f"class index {y} out of range [0, {model.prior.n_classes})")
    return y


def _as_output(model: FlowModel, data: np.ndarray, labels) -> SignalDataset:
    ds = SignalDataset(data, np.asarray(labels, dtype=np.int64), model.sample_rate_hz,
                       list(model.channel_names), list(model.class_names))
    return strip_virtual_channel(ds)


def _signal_rows(model: FlowModel, signal: np.ndarray, *prefix):
    """(time_s, channel, value) rows for one (C, T) signal, virtual channel dropped."""
    for c, name in enumerate(model.channel_names):
        if name == VIRTUAL_CHANNEL:
            continue
        for t, v in enumerate(signal[c]):
            yield [*prefix, _num(t / model.sample_rate_hz), name, _num(v)]


# ------------------------------------------------------------------ commands

def cmd_synth(args) -> int:
    config, out = _setup(args)
    ds = synth_generate(config.synth)
    path = Path(args.out) if args.out else out / "dataset.sgds"
    save_dataset(ds, path)
    _write_json(out / "dataset_summary.json", {
        "path": str(path), "n_trials": len(ds), "n_channels": ds.shape[0], "n_times": ds.shape[1],
        "sample_rate_hz": ds.sample_rate_hz, "class_names": ds.class_names,
        "class_counts": np.bincount(ds.labels, minlength=ds.n_classes).tolist()})
    print(f"wrote {len(ds)} trials to {path}")
    return 0


def _split(config: RunConfig, ds: SignalDataset):
    if config.run.valid_fraction >= 1.0:
        return ds, None
    return split_train_valid(ds, config.run.valid_fraction, config.run.split_seed)


def cmd_train(args) -> int:
    config, out = _setup(args)
    ds = pad_virtual_channel(_read_dataset(args.dataset))
    train_set, valid = _split(config, ds)
    arch = config.architecture.build(ds.shape[0], ds.shape[1], ds.n_classes)
    model = build_architecture(arch, ds.class_names)
    model.channel_names = list(ds.channel_names)
    model.sample_rate_hz = ds.sample_rate_hz
    initial_valid_ll = float(np.mean(log_likelihoods(model, valid.data, valid.labels))) if valid else None

    def progress(epoch, _model, rec):
        if not args.quiet:
            print(f"epoch {epoch:4d}  loss {rec.train_loss:.6g}  valid ll {rec.valid_ll:.6g}  "
                  f"train acc {rec.train_acc:.3f}  valid acc {rec.valid_acc:.3f}", flush=True)

    report = train(model, train_set, config.train_config(), valid=valid, callback=progress,
                   checkpoint_dir=out / "checkpoints")
    save_model(model, out / "model.sgfl")
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.jsonl").write_text(report.to_jsonl())
    (out / "timing.csv").write_text(report.timing_csv())
    last = report.records[-1] if report.records else None
    _write_json(out / "summary.json", {
        "objective": config.run.objective, "epochs": len(report),
        "n_train": len(train_set), "n_valid": len(valid) if valid else 0,
        "initial_valid_ll": initial_valid_ll,
        "final_valid_ll": last.valid_ll if last else initial_valid_ll,
        "train_accuracy": last.train_acc if last else None,
        "valid_accuracy": last.valid_acc if last else None})
    print(f"wrote {out / 'model.sgfl'}")
    return 0


def cmd_sample(args) -> int:
    config, out = _setup(args)
    model = _read_model(args.model)
    y = _class_index(model, args.cls)
    if args.count < 0:
        raise UsageError("count must be >= 0")
    labels = np.full(args.count, y, dtype=np.int64)
    data = sample_signals(model, labels, np.random.default_rng(args.seed))
    path = Path(args.out) if args.out else out / "samples.sgds"
    save_dataset(_as_output(model, data, labels), path)
    print(f"wrote {args.count} samples of class {model.class_names[y]!r} to {path}")
    return 0


def _classify_rows(model: FlowModel, ds: SignalDataset):
    lp = class_log_likelihoods(model, ds.data) if len(ds) else np.zeros((0, model.prior.n_classes))
    pred = np.argmax(lp, axis=1)
    post = np.exp(lp - lp.max(1, keepdims=True)) if len(ds) else lp
    post = post / post.sum(1, keepdims=True) if len(ds) else post
    rows = [[i, int(ds.labels[i]), int(pred[i]), int(pred[i] == ds.labels[i]), *map(_num, post[i])]
            for i in range(len(ds))]
    return rows, pred, lp


def cmd_classify(args) -> int:
    config, out = _setup(args)
    model = _read_model(args.model)
    ds = _fit_to_model(_read_dataset(args.dataset), model)
    rows, pred, _ = _classify_rows(model, ds)
    _write_csv(out / "predictions.csv",
               ["index", "label", "predicted", "correct"] + [f"posterior_{c}" for c in model.class_names], rows)
    correct = int(np.sum(pred == ds.labels))
    acc = correct / len(ds) if len(ds) else None
    _write_json(out / "classify_summary.json", {"n": len(ds), "correct": correct, "accuracy": acc})
    print(f"accuracy {acc} ({correct}/{len(ds)})")
    return 0


def _split_stats(model: FlowModel, ds: SignalDataset | None) -> dict:
    if ds is None or len(ds) == 0:
        return {"n": 0, "accuracy": None, "mean_log_likelihood": None}
    _, pred, lp = _classify_rows(model, ds)
    return {"n": len(ds), "accuracy": float(np.mean(pred == ds.labels)),
            "mean_log_likelihood": float(np.mean(lp[np.arange(len(ds)), ds.labels]))}


def cmd_eval(args) -> int:
    """Train/test accuracy; without a test file the training split is reproduced."""
    config, out = _setup(args)
    model = _read_model(args.model)
    ds = _fit_to_model(_read_dataset(args.dataset), model)
    if args.test:
        train_set, test_set = ds, _fit_to_model(_read_dataset(args.test), model)
    else:
        train_set, test_set = _split(config, ds)
    tr, te = _split_stats(model, train_set), _split_stats(model, test_set)
    _write_json(out / "eval_summary.json", {
        "train_accuracy": tr["accuracy"], "test_accuracy": te["accuracy"],
        "train_mean_log_likelihood": tr["mean_log_likelihood"],
        "test_mean_log_likelihood": te["mean_log_likelihood"], "n_train": tr["n"], "n_test": te["n"]})
    print(f"train accuracy {tr['accuracy']}  test accuracy {te['accuracy']}")
    return 0


def cmd_spectra(args) -> int:
    config, out = _setup(args)
    model = _read_model(args.model)
    ds = _fit_to_model(_read_dataset(args.dataset), model)
    if len(ds) == 0:
        raise DatasetError("dataset is empty; nothing to compare")
    gen = sample_signals(model, ds.labels, np.random.default_rng(args.seed))
    real_ds, gen_ds = strip_virtual_channel(ds), _as_output(model, gen, ds.labels)
    rows, errors = [], {}
    groups = [("all", np.arange(len(ds)))] + [
        (name, np.flatnonzero(ds.labels == y)) for y, name in enumerate(ds.class_names) if np.any(ds.labels == y)]
    for group, idx in groups:
        real = mean_spectra(real_ds.data[idx], ds.sample_rate_hz)
        fake = mean_spectra(gen_ds.data[idx], ds.sample_rate_hz)
        errors[group] = dict(zip(real_ds.channel_names, spectra_band_error(real, fake, args.low, args.high).tolist()))
        for c, ch in enumerate(real_ds.channel_names):
            for k, f in enumerate(real.freqs_hz):
                rows.append([group, ch, _num(f), _num(real.power[c, k]), _num(fake.power[c, k])])
    _write_csv(out / "spectra.csv", ["class", "channel", "freq_hz", "real_power", "generated_power"], rows)
    _write_json(out / "spectra_summary.json", {
        "band_hz": [args.low, args.high], "median_abs_log10_power_difference": errors})
    print(json.dumps(errors["all"]))
    return 0


def cmd_prototype(args) -> int:
    config, out = _setup(args)
    model = _read_model(args.model)
    rows = []
    for y, name in enumerate(model.class_names):
        rows.extend(_signal_rows(model, prototype_invert(model, y), name))
    _write_csv(out / "prototype.csv", ["class", "time_s", "channel", "value"], rows)
    print(f"wrote {out / 'prototype.csv'}")
    return 0


def cmd_sweep(args) -> int:
    config, out = _setup(args)
    model = _read_model(args.model)
    y = _class_index(model, args.cls)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--values must be comma-separated numbers, got {args.values!r}") from None
    try:
        signals = dimension_sweep(model, y, args.dim, values)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rows = []
    for v, sig in zip(values, signals):
        rows.extend(_signal_rows(model, sig, _num(v)))
    _write_csv(out / "sweep.csv", ["latent_value", "time_s", "channel", "value"], rows)
    print(f"wrote {out / 'sweep.csv'}")
    return 0


def cmd_match(args) -> int:
    config, out = _setup(args)
    model = _read_model(args.model)
    ds = _fit_to_model(_read_dataset(args.dataset), model)
    if len(ds) == 0:
        raise DatasetError("dataset is empty; nothing to match")
    matches, generated = match_generated_real(model, ds, args.ratio, args.seed, args.metric, args.solver)
    _write_csv(out / "plan.csv", ["i", "j", "mass", "distance"],
               [[m.real_index, m.generated_index, _num(m.mass), _num(m.distance)] for m in matches])
    gen_labels = np.sort(np.repeat(ds.labels, args.ratio))
    save_dataset(_as_output(model, generated, gen_labels), out / "generated.sgds")
    cost = float(sum(m.mass * m.distance for m in matches))
    _write_json(out / "match_summary.json", {"cost": cost, "n_real": len(ds),
                                             "n_generated": len(generated), "metric": args.metric})
    print(f"transport cost {cost:.6g}")
    return 0


def cmd_selfcheck(args) -> int:
    extra = []
    if args.model:
        model = _read_model(args.model)
        extra.append(lambda: check_model_file(model))
    config, out = _setup(args)
    results = run_all(extra)
    print(format_table(results))
    _write_csv(out / "selfcheck.csv", ["check", "value", "tolerance", "passed", "detail"],
               [[r.name, _num(r.value), _num(r.tolerance), int(r.passed), r.detail] for r in results])
    return 0 if all(r.passed for r in results) else 1


# ------------------------------------------------------------------- parsing

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
    common.add_argument("--out-dir", help="output directory")

    parser = _Parser(prog="eegflow", description="Volume-preserving flows for multichannel time series.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate the synthetic alpha dataset")
    p.add_argument("--out", help="dataset path (default: OUT_DIR/dataset.sgds)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a model (run.objective = ml | ot)")
    p.add_argument("dataset")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", parents=[common], help="draw generated signals for one class")
    p.add_argument("model")
    p.add_argument("--class", dest="cls", required=True, help="class name or index")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="dataset path (default: OUT_DIR/samples.sgds)")
    p.set_defaults(func=cmd_sample)

    for name, fn, text in [("classify", cmd_classify, "per-trial predictions and accuracy"),
                           ("eval", cmd_eval, "train and test accuracy summary")]:
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("model")
        p.add_argument("dataset")
        if name == "eval":
            p.add_argument("--test", help="held-out dataset; default: reproduce the training split")
        p.set_defaults(func=fn)

    p = sub.add_parser("spectra", parents=[common], help="real vs generated Welch spectra")
    p.add_argument("model")
    p.add_argument("dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--low", type=float, default=5.0)
    p.add_argument("--high", type=float, default=15.0)
    p.set_defaults(func=cmd_spectra)

    p = sub.add_parser("prototype", parents=[common], help="class means mapped to signal space")
    p.add_argument("model")
    p.set_defaults(func=cmd_prototype)

    p = sub.add_parser("sweep", parents=[common], help="vary one latent coordinate of a class mean")
    p.add_argument("model")
    p.add_argument("--class", dest="cls", required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--values", default="-3,-1.5,0,1.5,3")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("match", parents=[common], help="transport plan between generated and real")
    p.add_argument("model")
    p.add_argument("dataset")
    p.add_argument("--ratio", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--metric", choices=["euclidean", "squared_euclidean"], default="euclidean")
    p.add_argument("--solver", choices=["exact", "sinkhorn"], default="exact")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("selfcheck", parents=[common], help="run the invariant suites")
    p.add_argument("--model", help="also load and round-trip this model file")
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError, TransportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, ModelFormatError, ShapeError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, NonFiniteError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
