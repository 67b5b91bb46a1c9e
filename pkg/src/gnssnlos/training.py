"""Mini-batch training: Adam, multistep LR schedule, MSE + L1 objective.

The classification head trains against MSE on sigmoid probabilities (not
cross-entropy) and the regression head against L1 in scaled units; both
terms average over valid satellite slots only. Everything is deterministic
given the config seed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as ad
from .dataset import FeatureWindow, Normalizer, apply_normalizer, fit_normalizer
from .network import BatchGraph, ModelConfig, ModelOutput, build_batch_graph
from .tensor import Tensor


class TrainConfigError(ValueError):
    """Training configuration violates its invariants."""


class TrainingDivergedError(RuntimeError):
    """The loss went non-finite; carries the report collected so far."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class NonFiniteGradientError(RuntimeError):
    """An optimizer step saw a NaN/Inf gradient; names the parameter."""


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 150
    base_lr: float = 1e-3
    lr_milestones: tuple = (60, 120)
    lr_gamma: float = 0.1
    loss_weight_lambda: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    rng_seed: int = 0
    val_fraction: float = 0.2
    clip_norm: float = 5.0
    nlos_class_weight: float = 1.0
    dtype: str = "float32"
    # optional early exit for overfit-style runs; None disables
    stop_at_train_accuracy: float | None = None
    stop_at_train_l1_m: float | None = None

    def validate(self):
        if self.batch_size < 1 or self.epochs < 0:
            raise TrainConfigError("batch_size must be >= 1 and epochs >= 0")
        if not (0.0 < self.lr_gamma <= 1.0):
            raise TrainConfigError("lr_gamma must lie in (0, 1]")
        if any(b <= a for a, b in zip(self.lr_milestones, self.lr_milestones[1:])):
            raise TrainConfigError("lr_milestones must be strictly increasing")
        if not (0.0 <= self.val_fraction < 1.0):
            raise TrainConfigError("val_fraction must lie in [0, 1)")
        if self.base_lr <= 0:
            raise TrainConfigError("base_lr must be positive")
        if self.loss_weight_lambda < 0 or self.nlos_class_weight <= 0:
            raise TrainConfigError("loss weights must be positive")
        if self.dtype not in ("float32", "float64"):
            raise TrainConfigError("dtype must be float32 or float64")

    def numpy_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class AdamState:
    """First/second moment buffers mirroring the parameter tree."""

    m: dict
    v: dict
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(
            m={p: np.zeros_like(t.data) for p, t in params.items()},
            v={p: np.zeros_like(t.data) for p, t in params.items()},
            step=0,
        )


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_total: float
    train_mse: float
    train_l1: float
    val_total: float
    val_accuracy: float
    val_nlos_f1: float
    val_mae_m: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1

    def to_csv(self, path):
        import csv

        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["epoch", "lr", "train_total", "train_mse", "train_l1",
                 "val_total", "val_accuracy", "val_nlos_f1", "val_mae_m"]
            )
            for r in self.epochs:
                writer.writerow([r.epoch, repr(r.lr), repr(r.train_total), repr(r.train_mse),
                                 repr(r.train_l1), repr(r.val_total), repr(r.val_accuracy),
                                 repr(r.val_nlos_f1), repr(r.val_mae_m)])


@dataclass
class TrainResult:
    params: dict
    report: TrainReport
    normalizer: Normalizer
    model_config: ModelConfig


def lr_at(epoch: int, config: TrainConfig) -> float:
    """base_lr decayed by gamma once per milestone already reached."""
    hits = sum(1 for m in config.lr_milestones if m <= epoch)
    return config.base_lr * config.lr_gamma**hits


def total_loss(output: ModelOutput, window: FeatureWindow, loss_weight_lambda: float) -> float:
    """Reporting-side objective: MSE on probabilities plus lambda * L1 on errors.

    Both terms average over valid (unmasked, labeled) slots. The graph-side
    twin used inside train() is loss_graph(); this one works on plain model
    output and is the quantity the hand-computed examples pin down.
    """
    valid = output.valid & np.isfinite(window.labels_visibility)
    if not valid.any():
        raise TrainConfigError("loss over a window with no valid labeled slots")
    p = output.visibility_prob[valid]
    y = window.labels_visibility[valid]
    mse = float(np.mean((p - y) ** 2))
    err_valid = valid & np.isfinite(window.labels_error)
    l1 = 0.0
    if err_valid.any():
        l1 = float(np.mean(np.abs(output.error_pred_m[err_valid] - window.labels_error[err_valid])))
    return mse + loss_weight_lambda * l1


def loss_graph(graph: BatchGraph, model_config: ModelConfig, train_config: TrainConfig):
    """Differentiable batch loss; regression compares in scaled units."""
    labels_v = graph.labels_visibility
    if np.isnan(labels_v).any():
        raise TrainConfigError("training batch contains unlabeled valid slots")
    dtype = graph.probs.data.dtype
    y = labels_v.reshape(-1, 1).astype(dtype)
    if train_config.nlos_class_weight != 1.0:
        w = np.where(labels_v == 0.0, train_config.nlos_class_weight, 1.0).reshape(-1, 1)
        w = (w / w.mean()).astype(dtype)
        diff = ad.sub(graph.probs, Tensor(y))
        mse = ad.mean(ad.mul(ad.mul(diff, diff), Tensor(w)))
    else:
        mse = ad.mse_loss(graph.probs, Tensor(y))
    err_targets = (graph.labels_error_m * model_config.error_scale).reshape(-1, 1).astype(dtype)
    l1 = ad.l1_loss(graph.errors_scaled, Tensor(err_targets))
    return ad.add(mse, ad.scale(l1, train_config.loss_weight_lambda)), float(mse.data), float(l1.data)


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float, config: TrainConfig):
    """Standard Adam update with bias correction, in place."""
    state.step += 1
    t = state.step
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    for path, tensor in params.items():
        g = tensor.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(f"non-finite gradient on {path}")
        state.m[path] = b1 * state.m[path] + (1.0 - b1) * g
        state.v[path] = b2 * state.v[path] + (1.0 - b2) * (g * g)
        m_hat = state.m[path] / (1.0 - b1**t)
        v_hat = state.v[path] / (1.0 - b2**t)
        tensor.data = tensor.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Global-norm clipping across the whole parameter tree."""
    total = 0.0
    for t in params.values():
        if t.grad is not None:
            total += float(np.sum(t.grad.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for t in params.values():
            if t.grad is not None:
                t.grad = t.grad * factor
    return norm


def zero_grads(params: dict[str, Tensor]):
    for t in params.values():
        t.zero_grad()


def split_indices(n_windows: int, config: TrainConfig):
    """Deterministic train/validation split; identical across ablation variants."""
    rng = np.random.default_rng(config.rng_seed)
    order = rng.permutation(n_windows)
    n_val = int(round(n_windows * config.val_fraction))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def split_hash(train_idx, val_idx) -> str:
    payload = ",".join(map(str, train_idx)) + "|" + ",".join(map(str, val_idx))
    return hashlib.sha256(payload.encode()).hexdigest()


def _batch_metrics(predictor_params, model_config, train_config, windows):
    """Accuracy / NLOS-F1 / MAE over already-normalized labeled windows."""
    from .evaluation import classification_metrics, regression_metrics

    probs, labels, errs_pred, errs_true = [], [], [], []
    for lo in range(0, len(windows), 64):
        chunk = windows[lo : lo + 64]
        graph = build_batch_graph(chunk, predictor_params, model_config)
        probs.append(graph.probs.data[:, 0])
        labels.append(graph.labels_visibility)
        errs_pred.append(graph.errors_scaled.data[:, 0] / model_config.error_scale)
        errs_true.append(graph.labels_error_m)
    probs = np.concatenate(probs)
    labels = np.concatenate(labels)
    errs_pred = np.concatenate(errs_pred)
    errs_true = np.concatenate(errs_true)
    report = classification_metrics(probs, labels)
    mae = regression_metrics(errs_pred, errs_true)
    return report.accuracy, report.nlos.f1, mae, probs, labels


def train(params: dict[str, Tensor], windows: list[FeatureWindow], train_config: TrainConfig,
          model_config: ModelConfig) -> TrainResult:
    """Fit the model; returns best-validation parameters and the epoch log.

    The normalizer is fitted on the training split only and applied to both
    splits. Shuffling, the split, and every update are driven by the config
    seed, so two runs with equal inputs produce identical reports.
    """
    train_config.validate()
    model_config.validate()
    if not windows:
        raise TrainConfigError("no training windows")
    train_idx, val_idx = split_indices(len(windows), train_config)
    if train_idx.size == 0:
        raise TrainConfigError("training split is empty; lower val_fraction")
    train_windows = [windows[i] for i in train_idx]
    val_windows = [windows[i] for i in val_idx]
    normalizer = fit_normalizer(train_windows)
    train_windows = apply_normalizer(train_windows, normalizer)
    val_windows = apply_normalizer(val_windows, normalizer)

    dtype = train_config.numpy_dtype()
    for t in params.values():
        t.data = t.data.astype(dtype)

    state = AdamState.for_params(params)
    rng = np.random.default_rng(train_config.rng_seed + 1)
    report = TrainReport()
    best_val = np.inf
    best_params = {p: t.data.copy() for p, t in params.items()}
    best_epoch = -1

    for epoch in range(train_config.epochs):
        lr = lr_at(epoch, train_config)
        order = rng.permutation(len(train_windows))
        totals, mses, l1s = [], [], []
        for lo in range(0, len(order), train_config.batch_size):
            batch = [train_windows[i] for i in order[lo : lo + train_config.batch_size]]
            zero_grads(params)
            graph = build_batch_graph(batch, params, model_config)
            loss, mse_val, l1_val = loss_graph(graph, model_config, train_config)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}", report=report
                )
            ad.backward(loss)
            clip_gradients(params, train_config.clip_norm)
            adam_step(params, state, lr, train_config)
            totals.append(loss_val)
            mses.append(mse_val)
            l1s.append(l1_val)

        val_total = val_acc = val_f1 = val_mae = float("nan")
        if val_windows:
            val_acc, val_f1, val_mae, vprobs, vlabels = _batch_metrics(
                params, model_config, train_config, val_windows
            )
            val_total = float(np.mean((vprobs - vlabels) ** 2)) + \
                train_config.loss_weight_lambda * val_mae * model_config.error_scale
            if val_total < best_val:
                best_val = val_total
                best_params = {p: t.data.copy() for p, t in params.items()}
                best_epoch = epoch
        report.epochs.append(EpochRecord(
            epoch=epoch, lr=lr,
            train_total=float(np.mean(totals)), train_mse=float(np.mean(mses)),
            train_l1=float(np.mean(l1s)),
            val_total=val_total, val_accuracy=val_acc, val_nlos_f1=val_f1, val_mae_m=val_mae,
        ))

        if train_config.stop_at_train_accuracy is not None or train_config.stop_at_train_l1_m is not None:
            acc, _, mae, _, _ = _batch_metrics(params, model_config, train_config, train_windows)
            acc_ok = (train_config.stop_at_train_accuracy is None
                      or acc >= train_config.stop_at_train_accuracy)
            mae_ok = (train_config.stop_at_train_l1_m is None
                      or mae < train_config.stop_at_train_l1_m)
            if acc_ok and mae_ok:
                break

    if val_windows and best_epoch >= 0:
        for p, t in params.items():
            t.data = best_params[p]
        report.best_epoch = best_epoch
    else:
        report.best_epoch = len(report.epochs) - 1
    return TrainResult(params=params, report=report, normalizer=normalizer,
                       model_config=model_config)
