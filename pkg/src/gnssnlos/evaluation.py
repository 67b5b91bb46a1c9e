"""Classification/regression metrics, permutation feature importance, ablation.

Metric tables follow the two-rows-per-model shape of the reference
experiments: per-class precision/recall/F1 with a single shared accuracy
column, LOS treated as the positive class on the LOS row and NLOS on the
NLOS row.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import FEATURE_NAMES, FeatureWindow


class EvaluationError(ValueError):
    """No valid samples, or mismatched prediction/label shapes."""


@dataclass
class ClassCounts:
    """One-vs-rest confusion counts with this class as positive."""

    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if (self.tp + self.fp) else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if (self.tp + self.fn) else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2.0 * p * r / (p + r) if (p + r) else 0.0

    @property
    def zero_division(self) -> bool:
        return (self.tp + self.fp) == 0 or (self.tp + self.fn) == 0


@dataclass
class ConfusionCounts:
    los: ClassCounts
    nlos: ClassCounts

    @property
    def total(self) -> int:
        return self.los.tp + self.los.fp + self.los.tn + self.los.fn


@dataclass
class MetricReport:
    """Per-class precision/recall/F1 plus overall accuracy and regression MAE."""

    los: ClassCounts
    nlos: ClassCounts
    accuracy: float
    mae_m: float | None = None
    n_samples: int = 0

    def rows(self):
        return [
            ("LOS", self.los.precision, self.los.recall, self.los.f1, self.accuracy),
            ("NLOS", self.nlos.precision, self.nlos.recall, self.nlos.f1, self.accuracy),
        ]

    def format_table(self, model_name: str = "model") -> str:
        lines = [f"{'Model':<18}{'':6}{'Precision':>10}{'Recall':>8}{'F1-Score':>10}{'Acc.':>7}"]
        for cls, p, r, f1, acc in self.rows():
            name = model_name if cls == "LOS" else ""
            acc_cell = f"{acc:.2f}" if cls == "LOS" else ""
            lines.append(f"{name:<18}{cls:<6}{p:>10.2f}{r:>8.2f}{f1:>10.2f}{acc_cell:>7}")
        return "\n".join(lines)


def classification_metrics(probs, labels, mask=None, threshold: float = 0.5) -> MetricReport:
    """Threshold probabilities and count per-class confusion statistics.

    `labels` uses LOS=1 / NLOS=0. Entries can be excluded either by `mask`
    or by NaN labels. Zero-denominator rates are reported as 0.
    """
    probs = np.asarray(probs, dtype=float).ravel()
    labels = np.asarray(labels, dtype=float).ravel()
    if probs.shape != labels.shape:
        raise EvaluationError(f"probs shape {probs.shape} != labels shape {labels.shape}")
    valid = np.isfinite(labels) & np.isfinite(probs)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool).ravel()
    if not valid.any():
        raise EvaluationError("no valid samples for classification metrics")
    p = probs[valid]
    y = labels[valid].astype(int)
    pred = (p >= threshold).astype(int)

    los = ClassCounts(
        tp=int(np.sum((pred == 1) & (y == 1))),
        fp=int(np.sum((pred == 1) & (y == 0))),
        tn=int(np.sum((pred == 0) & (y == 0))),
        fn=int(np.sum((pred == 0) & (y == 1))),
    )
    nlos = ClassCounts(tp=los.tn, fp=los.fn, tn=los.tp, fn=los.fp)
    accuracy = float(np.mean(pred == y))
    return MetricReport(los=los, nlos=nlos, accuracy=accuracy, n_samples=int(valid.sum()))


def regression_metrics(error_pred_m, label_error_m, mask=None) -> float:
    """Mean absolute pseudorange-error prediction error, meters."""
    pred = np.asarray(error_pred_m, dtype=float).ravel()
    label = np.asarray(label_error_m, dtype=float).ravel()
    if pred.shape != label.shape:
        raise EvaluationError(f"pred shape {pred.shape} != label shape {label.shape}")
    valid = np.isfinite(pred) & np.isfinite(label)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool).ravel()
    if not valid.any():
        raise EvaluationError("no valid samples for regression metrics")
    return float(np.mean(np.abs(pred[valid] - label[valid])))


def evaluate_windows(predictor, windows: list[FeatureWindow], threshold: float = 0.5) -> MetricReport:
    """Metrics of a trained predictor over labeled raw windows."""
    probs, errs, valid = predictor.predict_arrays(windows)
    labels = np.stack([w.labels_visibility for w in windows])
    label_err = np.stack([w.labels_error for w in windows])
    report = classification_metrics(probs.ravel(), labels.ravel(), mask=valid.ravel(),
                                    threshold=threshold)
    err_valid = valid & np.isfinite(label_err) & np.isfinite(errs)
    if err_valid.any():
        report.mae_m = regression_metrics(errs.ravel(), label_err.ravel(), mask=err_valid.ravel())
    return report


# ---------------------------------------------------------------------------
# permutation feature importance


@dataclass
class ImportanceEntry:
    feature: str
    importance: float
    std: float


@dataclass
class ImportanceReport:
    baseline_accuracy: float
    repeats: int
    entries: list = field(default_factory=list)

    def by_feature(self) -> dict:
        return {e.feature: e.importance for e in self.entries}

    def ranked(self) -> list:
        return sorted(self.entries, key=lambda e: e.importance, reverse=True)

    def to_csv(self, path):
        import csv

        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["feature", "importance", "std", "baseline_accuracy", "repeats"])
            for e in self.entries:
                writer.writerow([e.feature, repr(e.importance), repr(e.std),
                                 repr(self.baseline_accuracy), self.repeats])


def _window_accuracy(predictor, windows, threshold=0.5) -> float:
    probs, _, valid = predictor.predict_arrays(windows)
    labels = np.stack([w.labels_visibility for w in windows])
    return classification_metrics(probs.ravel(), labels.ravel(), mask=valid.ravel(),
                                  threshold=threshold).accuracy


def permute_channel(windows: list[FeatureWindow], channel: int, rng) -> list[FeatureWindow]:
    """Shuffle one feature channel across all valid slots of all windows.

    Each slot's T-step sequence moves as a unit, so temporal coherence
    within a window survives while the channel's association with the
    label (and the other channels) is destroyed.
    """
    from dataclasses import replace

    slots = [(i, s) for i, w in enumerate(windows) for s in np.flatnonzero(w.sat_mask)]
    sequences = [windows[i].features[s, :, channel].copy() for i, s in slots]
    order = rng.permutation(len(sequences))
    out = [replace(w, features=w.features.copy()) for w in windows]
    for (i, s), j in zip(slots, order):
        out[i].features[s, :, channel] = sequences[j]
    return out


def permutation_importance(predictor, windows: list[FeatureWindow], repeats: int = 5,
                           seed: int = 0, threshold: float = 0.5) -> ImportanceReport:
    """Accuracy drop per feature channel when that channel is shuffled.

    importance = baseline accuracy - accuracy on permuted data, averaged
    over `repeats` independent shuffles.
    """
    if repeats < 1:
        raise EvaluationError("repeats must be >= 1")
    if not windows:
        raise EvaluationError("no windows to evaluate")
    baseline = _window_accuracy(predictor, windows, threshold)
    rng = np.random.default_rng(seed)
    report = ImportanceReport(baseline_accuracy=baseline, repeats=repeats)
    for channel, name in enumerate(FEATURE_NAMES):
        drops = []
        for _ in range(repeats):
            permuted = permute_channel(windows, channel, rng)
            drops.append(baseline - _window_accuracy(predictor, permuted, threshold))
        report.entries.append(ImportanceEntry(
            feature=name, importance=float(np.mean(drops)), std=float(np.std(drops))
        ))
    return report


# ---------------------------------------------------------------------------
# component ablation


@dataclass
class AblationResult:
    reports: dict
    split_hashes: dict
    predictors: dict

    def format_table(self) -> str:
        parts = []
        for variant, report in self.reports.items():
            parts.append(report.format_table(model_name=variant))
        return "\n".join(parts)

    def to_csv(self, path):
        import csv

        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variant", "class", "precision", "recall", "f1", "accuracy", "mae_m"])
            for variant, r in self.reports.items():
                for cls, counts in (("LOS", r.los), ("NLOS", r.nlos)):
                    writer.writerow([variant, cls, repr(counts.precision), repr(counts.recall),
                                     repr(counts.f1), repr(r.accuracy),
                                     "" if r.mae_m is None else repr(r.mae_m)])


def run_ablation(windows: list[FeatureWindow], train_config, model_config,
                 variants=("full", "no_attention", "no_bilstm")) -> AblationResult:
    """Train each architecture variant under identical settings and data splits.

    The split is a pure function of (window count, seed), and its hash is
    recorded per variant so the identical-split guarantee is checkable.
    """
    from dataclasses import replace

    from .network import Predictor, init_params
    from .training import split_hash, split_indices, train

    reports = {}
    hashes = {}
    predictors = {}
    for variant in variants:
        cfg = replace(model_config, variant=variant)
        train_idx, val_idx = split_indices(len(windows), train_config)
        hashes[variant] = split_hash(train_idx, val_idx)
        params = init_params(cfg, rng_seed=train_config.rng_seed,
                             dtype=train_config.numpy_dtype())
        result = train(params, windows, train_config, cfg)
        predictor = Predictor(result.params, cfg, result.normalizer)
        val_windows = [windows[i] for i in val_idx] or windows
        reports[variant] = evaluate_windows(predictor, val_windows)
        predictors[variant] = predictor
    if len(set(hashes.values())) > 1:
        raise EvaluationError(f"ablation split hashes diverged: {hashes}")
    return AblationResult(reports=reports, split_hashes=hashes, predictors=predictors)
