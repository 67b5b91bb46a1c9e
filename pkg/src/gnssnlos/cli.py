"""Command-line surface for the NLOS detection pipeline.

One executable with subcommands covering the experiment sequence:
data generation, labeling, training, evaluation, prediction, feature
importance, component ablation, the exclusion experiment, and report
rendering. Every run is driven by one key-value config file plus flag
overrides (flags win), writes its outputs atomically, and records a
manifest with input hashes so artifacts are reproducible.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import tempfile
from dataclasses import asdict, fields, replace

import numpy as np

from . import __version__, dataset, evaluation, exclusion, geodesy, network, training

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

_USAGE_ERRORS = (
    FileNotFoundError,
    IsADirectoryError,
    dataset.ConfigError,
    training.TrainConfigError,
    network.ModelConfigError,
)
_DATA_ERRORS = (
    dataset.CsvFormatError,
    network.CheckpointError,
    evaluation.EvaluationError,
    exclusion.ExclusionError,
)
_NUMERIC_ERRORS = (
    training.TrainingDivergedError,
    training.NonFiniteGradientError,
    geodesy.SingularGeometryError,
    geodesy.InsufficientObservationsError,
    geodesy.DegenerateGeometryError,
)


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting with its own status code."""

    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config files and manifests


def parse_config_file(path) -> dict:
    """KEY = VALUE per line; '#' comments; values typed heuristically.

    Comma-separated numbers become tuples, true/false become booleans,
    and anything else that is not a number stays a string.
    """
    values: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path} line {line_no}: expected KEY = VALUE")
            key, _, value = line.partition("=")
            values[key.strip()] = _parse_value(value.strip())
    return values


def _parse_value(text: str):
    if "," in text:
        return tuple(_parse_value(part.strip()) for part in text.split(",") if part.strip())
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def apply_overrides(values: dict, overrides) -> dict:
    out = dict(values)
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        out[key.strip()] = _parse_value(value.strip())
    return out


def _build_dataclass(cls, values: dict, where: str):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise UsageError(f"{where}: unknown keys {sorted(unknown)}")
    return cls(**values)


def _split_keys(values: dict, cls) -> tuple[dict, dict]:
    names = {f.name for f in fields(cls)}
    mine = {k: v for k, v in values.items() if k in names}
    rest = {k: v for k, v in values.items() if k not in names}
    return mine, rest


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def atomic_write_text(path, text: str):
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_output(path, writer):
    """Run `writer(tmp_path)` then atomically rename onto `path`."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_manifest(command: str, seed, inputs: dict, artifacts: list, out_path):
    manifest = {
        "command": command,
        "tool_version": __version__,
        "seed": seed,
        "inputs": {str(k): sha256_file(k) for k in inputs if k and os.path.exists(str(k))},
        "artifacts": [str(a) for a in artifacts],
    }
    atomic_write_text(out_path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _manifest_path(primary_artifact) -> str:
    return str(primary_artifact) + ".manifest.json"


# ---------------------------------------------------------------------------
# shared pipeline helpers


def _load_epochs(path) -> list:
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset file not found: {path}")
    return dataset.read_csv(path)


def _windows_for(epochs, t_window: int, n_max: int):
    windows = dataset.build_windows(epochs, T=t_window, N_max=n_max)
    if not windows:
        raise evaluation.EvaluationError(
            f"no feature windows of length {t_window}; dataset too short or epochs unsolvable"
        )
    return windows


def _metrics_csv_rows(name: str, report: evaluation.MetricReport):
    rows = []
    for cls, counts in (("LOS", report.los), ("NLOS", report.nlos)):
        rows.append([name, cls, repr(counts.precision), repr(counts.recall), repr(counts.f1),
                     repr(report.accuracy), "" if report.mae_m is None else repr(report.mae_m)])
    return rows


def _write_metrics_csv(path, named_reports):
    def writer(tmp):
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "class", "precision", "recall", "f1", "accuracy", "mae_m"])
            for name, report in named_reports:
                w.writerows(_metrics_csv_rows(name, report))

    atomic_output(path, writer)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    values = parse_config_file(args.config) if args.config else {}
    values = apply_overrides(values, args.set)
    preset = values.pop("preset", "standard")
    factories = {
        "standard": dataset.ScenarioConfig.standard,
        "ac_like": dataset.ScenarioConfig.ac_like,
        "hk_like": dataset.ScenarioConfig.hk_like,
        "labeling_study": dataset.ScenarioConfig.labeling_study,
        "open_sky": dataset.ScenarioConfig.open_sky,
        "fully_blocked": dataset.ScenarioConfig.fully_blocked,
    }
    if preset not in factories:
        raise UsageError(f"unknown preset {preset!r}, expected one of {sorted(factories)}")
    config = factories[preset]()
    known, unknown = _split_keys(values, dataset.ScenarioConfig)
    if unknown:
        raise UsageError(f"unknown scenario keys {sorted(unknown)}")
    config = replace(config, **known)
    if args.seed is not None:
        config = replace(config, rng_seed=args.seed)
    config.validate()
    epochs = dataset.generate_scenario(config)
    atomic_output(args.out, lambda tmp: dataset.write_csv(epochs, tmp))
    artifacts = [args.out]
    if args.mask_out:
        atomic_output(args.mask_out, lambda tmp: dataset.write_mask_csv(config.sky_mask(), tmp))
        artifacts.append(args.mask_out)
    r_los, r_nlos = dataset.class_balance(epochs)
    print(f"generated {len(epochs)} epochs "
          f"({sum(len(e.observations) for e in epochs)} observations), "
          f"R_LOS={r_los:.2f}% R_NLOS={r_nlos:.2f}%")
    write_manifest("gen-data", config.rng_seed, {args.config: 1} if args.config else {},
                   artifacts, _manifest_path(args.out))
    return EXIT_OK


def cmd_label(args) -> int:
    epochs = _load_epochs(args.data)
    mask = dataset.read_mask_csv(args.mask)
    labeled, skipped = dataset.label_observations(epochs, mask, args.threshold)
    atomic_output(args.out, lambda tmp: dataset.write_csv(labeled, tmp))
    if skipped:
        print(f"skipped {len(skipped)} epochs with fewer than 4 satellites: {skipped[:10]}"
              + (" ..." if len(skipped) > 10 else ""))
    r_los, r_nlos = dataset.class_balance(labeled)
    print(f"labeled {len(labeled)} epochs, R_LOS={r_los:.2f}% R_NLOS={r_nlos:.2f}%")
    write_manifest("label", args.threshold, {args.data: 1, args.mask: 1}, [args.out],
                   _manifest_path(args.out))
    return EXIT_OK


def _train_configs(args):
    values = parse_config_file(args.config) if args.config else {}
    values = apply_overrides(values, args.set)
    t_window = values.pop("t_window", 5)
    n_max = values.pop("n_max", 25)
    model_values, rest = _split_keys(values, network.ModelConfig)
    train_values, unknown = _split_keys(rest, training.TrainConfig)
    if unknown:
        raise UsageError(f"unknown training keys {sorted(unknown)}")
    model_config = network.ModelConfig(n_max=n_max, T=t_window, **model_values)
    train_config = training.TrainConfig(**train_values)
    if args.seed is not None:
        train_config = replace(train_config, rng_seed=args.seed)
    if getattr(args, "variant", None):
        model_config = replace(model_config, variant=args.variant)
    if getattr(args, "epochs", None) is not None:
        train_config = replace(train_config, epochs=args.epochs)
    model_config.validate()
    train_config.validate()
    return model_config, train_config


def cmd_train(args) -> int:
    model_config, train_config = _train_configs(args)
    epochs = _load_epochs(args.data)
    windows = _windows_for(epochs, model_config.T, model_config.n_max)
    params = network.init_params(model_config, rng_seed=train_config.rng_seed,
                                 dtype=train_config.numpy_dtype())
    result = training.train(params, windows, train_config, model_config)
    atomic_output(args.out, lambda tmp: network.save_checkpoint(
        result.params, model_config, result.normalizer, tmp))
    artifacts = [args.out]
    if args.report:
        atomic_output(args.report, lambda tmp: result.report.to_csv(tmp))
        artifacts.append(args.report)
    last = result.report.epochs[-1] if result.report.epochs else None
    if last is not None:
        print(f"trained {len(result.report.epochs)} epochs "
              f"(best epoch {result.report.best_epoch}); "
              f"final train loss {last.train_total:.4f}, "
              f"val accuracy {last.val_accuracy:.4f}, val MAE {last.val_mae_m:.2f} m")
    else:
        print("trained 0 epochs (initialized checkpoint written)")
    write_manifest("train", train_config.rng_seed,
                   {args.data: 1, args.config: 1} if args.config else {args.data: 1},
                   artifacts, _manifest_path(args.out))
    return EXIT_OK


def cmd_eval(args) -> int:
    predictor = network.Predictor.from_checkpoint(args.model)
    epochs = _load_epochs(args.data)
    windows = _windows_for(epochs, predictor.config.T, predictor.config.n_max)
    report = evaluation.evaluate_windows(predictor, windows, threshold=args.threshold)
    print(report.format_table(model_name=args.name))
    if report.mae_m is not None:
        print(f"\nregression MAE: {report.mae_m:.2f} m over {report.n_samples} samples")
    if args.out:
        _write_metrics_csv(args.out, [(args.name, report)])
        write_manifest("eval", args.threshold, {args.model: 1, args.data: 1}, [args.out],
                       _manifest_path(args.out))
    return EXIT_OK


def cmd_predict(args) -> int:
    predictor = network.Predictor.from_checkpoint(args.model)
    epochs = _load_epochs(args.data)
    windows = _windows_for(epochs, predictor.config.T, predictor.config.n_max)
    probs, errs, valid = predictor.predict_arrays(windows)

    def writer(tmp):
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch_index", "sat_id", "prob_los", "pred_visibility", "pred_error_m"])
            for wi, window in enumerate(windows):
                for slot, sid in sorted(window.slot_to_sat_id.items()):
                    if not valid[wi, slot]:
                        continue
                    p = probs[wi, slot]
                    w.writerow([window.end_epoch_index, sid, repr(float(p)),
                                int(p >= 0.5), repr(float(errs[wi, slot]))])

    atomic_output(args.out, writer)
    n = int(valid.sum())
    flagged = int((probs[valid] < 0.5).sum())
    print(f"classified {n} observations, R_LOS={100 * (n - flagged) / n:.2f}% "
          f"R_NLOS={100 * flagged / n:.2f}%")
    write_manifest("predict", None, {args.model: 1, args.data: 1}, [args.out],
                   _manifest_path(args.out))
    return EXIT_OK


def cmd_importance(args) -> int:
    predictor = network.Predictor.from_checkpoint(args.model)
    epochs = _load_epochs(args.data)
    windows = _windows_for(epochs, predictor.config.T, predictor.config.n_max)
    report = evaluation.permutation_importance(predictor, windows, repeats=args.repeats,
                                               seed=args.seed)
    print(f"baseline accuracy: {report.baseline_accuracy:.4f} ({report.repeats} repeats)")
    for entry in report.ranked():
        print(f"  {entry.feature:<16} {entry.importance:+.4f} (std {entry.std:.4f})")
    artifacts = []
    if args.out:
        atomic_output(args.out, lambda tmp: report.to_csv(tmp))
        artifacts.append(args.out)
    if args.svg:
        from ._svg import bar_chart

        svg = bar_chart([e.feature for e in report.entries],
                        [e.importance for e in report.entries],
                        title="Permutation feature importance")
        atomic_write_text(args.svg, svg)
        artifacts.append(args.svg)
    if artifacts:
        write_manifest("importance", args.seed, {args.model: 1, args.data: 1}, artifacts,
                       _manifest_path(artifacts[0]))
    return EXIT_OK


def cmd_ablate(args) -> int:
    model_config, train_config = _train_configs(args)
    epochs = _load_epochs(args.data)
    windows = _windows_for(epochs, model_config.T, model_config.n_max)
    result = evaluation.run_ablation(windows, train_config, model_config)
    print(result.format_table())
    if args.out:
        atomic_output(args.out, lambda tmp: result.to_csv(tmp))
        write_manifest("ablate", train_config.rng_seed,
                       {args.data: 1, args.config: 1} if args.config else {args.data: 1},
                       [args.out], _manifest_path(args.out))
    return EXIT_OK


def cmd_exclude(args) -> int:
    predictor = network.Predictor.from_checkpoint(args.model)
    epochs = _load_epochs(args.data)
    result = exclusion.trajectory_report(epochs, predictor, csv_path=None, svg_path=None)
    print(result.format_summary())
    artifacts = []
    if args.out:
        atomic_output(args.out, lambda tmp: result.to_csv(tmp))
        artifacts.append(args.out)
    if args.svg:
        exclusion.trajectory_report(epochs, predictor, csv_path=None, svg_path=args.svg)
        artifacts.append(args.svg)
    if artifacts:
        write_manifest("exclude", None, {args.model: 1, args.data: 1}, artifacts,
                       _manifest_path(artifacts[0]))
    return EXIT_OK


def cmd_report(args) -> int:
    lines = []
    header = f"{'Model':<18}{'':6}{'Precision':>10}{'Recall':>8}{'F1-Score':>10}{'Acc.':>7}"
    lines.append(header)
    lines.append("-" * len(header))
    for path in args.metrics:
        if not os.path.exists(path):
            raise FileNotFoundError(f"metrics file not found: {path}")
        with open(path, "r", newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            required = {"model", "class", "precision", "recall", "f1", "accuracy"}
            if reader.fieldnames is None or not required <= set(reader.fieldnames):
                raise dataset.CsvFormatError(
                    f"{path}: expected metric columns {sorted(required)}")
            for row in reader:
                name = row["model"] if row["class"] == "LOS" else ""
                acc = f"{float(row['accuracy']):.2f}" if row["class"] == "LOS" else ""
                lines.append(f"{name:<18}{row['class']:<6}{float(row['precision']):>10.2f}"
                             f"{float(row['recall']):>8.2f}{float(row['f1']):>10.2f}{acc:>7}")
    text = "\n".join(lines)
    print(text)
    if args.out:
        atomic_write_text(args.out, text + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    parser = _Parser(prog="gnssnlos",
                     description="NLOS detection and pseudorange error prediction pipeline")
    parser.add_argument("--version", action="version", version=f"gnssnlos {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic labeled scenario")
    p.add_argument("--config", help="scenario key-value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--out", required=True, help="output dataset CSV")
    p.add_argument("--mask-out", help="also write the sky mask CSV")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("label", help="apply the mask-plus-residual labeling rule")
    p.add_argument("--data", required=True, help="input dataset CSV")
    p.add_argument("--mask", required=True, help="sky mask CSV")
    p.add_argument("--threshold", type=float, default=10.0, help="residual threshold, meters")
    p.add_argument("--out", required=True, help="output labeled CSV")
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("train", help="train the network on a labeled dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="training key-value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, help="override the training seed")
    p.add_argument("--epochs", type=int, help="override the epoch count")
    p.add_argument("--variant", choices=network.VARIANTS, help="architecture variant")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--report", help="per-epoch training report CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labeled dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--name", default="DL (ours)", help="model name in the table")
    p.add_argument("--out", help="metrics CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="per-observation predictions from a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("importance", help="permutation feature importance")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="importance CSV")
    p.add_argument("--svg", help="importance bar chart SVG")
    p.set_defaults(func=cmd_importance)

    p = sub.add_parser("ablate", help="train and compare architecture variants")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="training key-value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", help="ablation metrics CSV")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("exclude", help="positioning with and without flagged satellites")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="per-epoch comparison CSV")
    p.add_argument("--svg", help="east/north trajectory overlay SVG")
    p.set_defaults(func=cmd_exclude)

    p = sub.add_parser("report", help="render metric CSVs as a combined text table")
    p.add_argument("--metrics", nargs="+", required=True)
    p.add_argument("--out", help="output text file")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except _NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
