"""The attention-enhanced LSTM for satellite visibility and pseudorange error.

Per-satellite LSTM encoders (weights shared across satellites) feed a
shared projection whose outputs act as query/key/value for multi-head
attention over the other satellites. A bi-directional LSTM, seeded with
the target satellite's encoder state, runs over the per-satellite attended
vectors; its output concatenated with the target's encoder state drives
two MLP heads: a sigmoid visibility classifier and an error regressor.

Ablation variants: `no_attention` replaces the attention output with the
mean of the projected context states; `no_bilstm` swaps the Bi-LSTM for a
unidirectional LSTM.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as ad
from .dataset import FEATURE_NAMES, FeatureWindow, Normalizer
from .tensor import Tensor

VARIANTS = ("full", "no_attention", "no_bilstm")

CHECKPOINT_MAGIC = b"GNSSNLOS"
CHECKPOINT_VERSION = 1


class ModelConfigError(ValueError):
    """Model configuration violates its invariants."""


class MaskedTargetError(ValueError):
    """The requested target slot holds no satellite."""


class CheckpointError(ValueError):
    """A checkpoint file is missing, corrupted, or incompatible."""


@dataclass
class ModelConfig:
    input_dim: int = len(FEATURE_NAMES)
    lstm_hidden: int = 32
    lstm_layers: int = 2
    attn_heads: int = 4
    attn_dim: int = 32
    mlp_hidden: int = 64
    mlp_layers: int = 3
    n_max: int = 25
    T: int = 5
    variant: str = "full"
    q_stop_gradient: bool = False
    # regression head works in scaled units; meters = head output / error_scale
    error_scale: float = 0.01

    def validate(self):
        if self.variant not in VARIANTS:
            raise ModelConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.attn_dim % self.attn_heads != 0:
            raise ModelConfigError(
                f"attn_dim {self.attn_dim} must be divisible by attn_heads {self.attn_heads}"
            )
        for name in ("input_dim", "lstm_hidden", "lstm_layers", "attn_heads", "attn_dim",
                     "mlp_hidden", "mlp_layers", "n_max", "T"):
            if getattr(self, name) < 1:
                raise ModelConfigError(f"{name} must be >= 1")
        if self.error_scale <= 0:
            raise ModelConfigError("error_scale must be positive")

    @property
    def head_dim(self) -> int:
        return self.attn_dim // self.attn_heads

    @property
    def header_out_dim(self) -> int:
        return self.lstm_hidden if self.variant == "no_bilstm" else 2 * self.lstm_hidden

    @property
    def trunk_dim(self) -> int:
        return self.header_out_dim + self.lstm_hidden


@dataclass
class ModelOutput:
    """Per-slot predictions; masked slots hold NaN and must be ignored."""

    visibility_prob: np.ndarray
    error_pred_m: np.ndarray
    attention_weights: np.ndarray
    valid: np.ndarray


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(config: ModelConfig, rng_seed: int = 0, dtype=np.float64) -> dict[str, Tensor]:
    """Fresh parameter tree keyed by path; LSTM forget-gate biases start at +1."""
    config.validate()
    rng = np.random.default_rng(rng_seed)
    h = config.lstm_hidden
    d = config.attn_dim
    params: dict[str, Tensor] = {}

    def put(path, shape, fan_in):
        params[path] = Tensor(_uniform(rng, shape, fan_in, dtype), requires_grad=True)

    def put_lstm(prefix, in_dim):
        put(f"{prefix}.w_x", (in_dim, 4 * h), in_dim)
        put(f"{prefix}.w_h", (h, 4 * h), h)
        put(f"{prefix}.b", (1, 4 * h), h)
        params[f"{prefix}.b"].data[0, h : 2 * h] += 1.0

    for layer in range(config.lstm_layers):
        put_lstm(f"enc.l{layer}", config.input_dim if layer == 0 else h)

    put("qkv.w", (h, d), h)
    put("qkv.b", (1, d), h)

    if config.variant in ("full", "no_bilstm"):
        dh = config.head_dim
        for head in range(config.attn_heads):
            put(f"attn.h{head}.wq", (d, dh), d)
            put(f"attn.h{head}.wk", (d, dh), d)
            put(f"attn.h{head}.wv", (d, dh), d)
        put("attn.w_out", (d, d), d)
        put("attn.b_out", (1, d), d)

    if config.variant == "no_bilstm":
        put_lstm("uni", d)
        put("uni.w_h0", (2 * h, h), 2 * h)
        put("uni.w_c0", (2 * h, h), 2 * h)
    else:
        for direction in ("fwd", "bwd"):
            put_lstm(f"bil.{direction}", d)
            put(f"bil.{direction}.w_h0", (2 * h, h), 2 * h)
            put(f"bil.{direction}.w_c0", (2 * h, h), 2 * h)

    for head_name in ("cls", "reg"):
        prev = config.trunk_dim
        for layer in range(config.mlp_layers):
            put(f"{head_name}.l{layer}.w", (prev, config.mlp_hidden), prev)
            put(f"{head_name}.l{layer}.b", (1, config.mlp_hidden), prev)
            prev = config.mlp_hidden
        put(f"{head_name}.out.w", (prev, 1), prev)
        put(f"{head_name}.out.b", (1, 1), prev)
    return params


def _dtype_of(params: dict[str, Tensor]):
    return next(iter(params.values())).data.dtype


def _lstm_cell(x, h_prev, c_prev, w_x, w_h, b, hidden):
    z = ad.add(ad.add(ad.matmul(h_prev, w_h), ad.matmul(x, w_x)), b)
    i = ad.sigmoid(ad.slice_axis(z, 1, 0, hidden))
    f = ad.sigmoid(ad.slice_axis(z, 1, hidden, 2 * hidden))
    g = ad.tanh(ad.slice_axis(z, 1, 2 * hidden, 3 * hidden))
    o = ad.sigmoid(ad.slice_axis(z, 1, 3 * hidden, 4 * hidden))
    c = ad.add(ad.mul(f, c_prev), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    return h, c


def _run_lstm_stack(step_inputs, params, prefix, layers, hidden, rows, dtype):
    """Stacked LSTM over a list of [rows, in_dim] step tensors; returns per-step
    top-layer outputs plus the top layer's final (h, c)."""
    outputs = step_inputs
    h = c = None
    for layer in range(layers):
        w_x = params[f"{prefix}.l{layer}.w_x"]
        w_h = params[f"{prefix}.l{layer}.w_h"]
        b = params[f"{prefix}.l{layer}.b"]
        h = Tensor(np.zeros((rows, hidden), dtype=dtype))
        c = Tensor(np.zeros((rows, hidden), dtype=dtype))
        next_outputs = []
        for x in outputs:
            h, c = _lstm_cell(x, h, c, w_x, w_h, b, hidden)
            next_outputs.append(h)
        outputs = next_outputs
    return outputs, h, c


def lstm_encode(window: FeatureWindow, params: dict[str, Tensor], config: ModelConfig):
    """Encode each satellite slot independently with the shared LSTM stack.

    Returns (step_outputs, h_final, c_final): a list of T tensors of shape
    [N_max, H] plus the final hidden and cell states. Masked slots come out
    exactly zero.
    """
    feats = np.asarray(window.features)
    n, t, f = feats.shape
    if f != config.input_dim or t != config.T:
        raise ModelConfigError(f"window shape {feats.shape} does not match config (T={config.T}, input_dim={config.input_dim})")
    dtype = _dtype_of(params)
    steps = [Tensor(feats[:, step, :].astype(dtype)) for step in range(t)]
    outputs, h, c = _run_lstm_stack(steps, params, "enc", config.lstm_layers, config.lstm_hidden, n, dtype)
    mask_mat = Tensor(np.repeat(window.sat_mask[:, None], config.lstm_hidden, axis=1).astype(dtype))
    outputs = [ad.mul(o, mask_mat) for o in outputs]
    return outputs, ad.mul(h, mask_mat), ad.mul(c, mask_mat)


def qkv_project(final_states: Tensor, params: dict[str, Tensor], config: ModelConfig):
    """One shared fully-connected layer produces the query, key, and value bases.

    With q_stop_gradient the query path sees a detached copy of the encoder
    features, matching a reading where those features are split off the
    main branch.
    """
    base = ad.add(ad.matmul(final_states, params["qkv.w"]), params["qkv.b"])
    if config.q_stop_gradient:
        q = ad.add(ad.matmul(final_states.detach(), params["qkv.w"]), params["qkv.b"])
    else:
        q = base
    return q, base, base


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, sat_mask, params: dict[str, Tensor],
                         config: ModelConfig):
    """Scaled dot-product attention over context satellites, one row per target.

    Returns (attended [N, attn_dim], weights [N, heads, N]); masked context
    satellites get exactly zero weight, masked target rows are zeroed.
    """
    mask = np.asarray(sat_mask, dtype=bool)
    if not mask.any():
        raise ad.DegenerateMaskError("attention needs at least one unmasked satellite")
    n = q.data.shape[0]
    col_mask = np.broadcast_to(mask[None, :], (n, n))
    heads = []
    weights = []
    for head in range(config.attn_heads):
        qh = ad.matmul(q, params[f"attn.h{head}.wq"])
        kh = ad.matmul(k, params[f"attn.h{head}.wk"])
        vh = ad.matmul(v, params[f"attn.h{head}.wv"])
        scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / math.sqrt(config.head_dim))
        w = ad.masked_softmax(scores, col_mask, axis=1)
        heads.append(ad.matmul(w, vh))
        weights.append(w.data)
    attended = ad.add(ad.matmul(ad.concat(heads, axis=1), params["attn.w_out"]), params["attn.b_out"])
    mask_mat = Tensor(np.repeat(mask[:, None], config.attn_dim, axis=1).astype(attended.data.dtype))
    attended = ad.mul(attended, mask_mat)
    weight_arr = np.stack(weights, axis=1)
    weight_arr[~mask, :, :] = 0.0
    return attended, weight_arr


def _mean_context(base: Tensor, sat_mask, config: ModelConfig):
    """no_attention variant: every slot's context vector is the mean of the
    projected states of the valid satellites."""
    mask = np.asarray(sat_mask, dtype=bool)
    if not mask.any():
        raise ad.DegenerateMaskError("context mean needs at least one unmasked satellite")
    n = base.data.shape[0]
    dtype = base.data.dtype
    avg_row = np.zeros((1, n), dtype=dtype)
    avg_row[0, mask] = 1.0 / mask.sum()
    mean_vec = ad.matmul(Tensor(avg_row), base)
    ones_col = np.zeros((n, 1), dtype=dtype)
    ones_col[mask, 0] = 1.0
    return ad.matmul(Tensor(ones_col), mean_vec)


def _header_recurrence(attended: Tensor, valid_slots, enc_h: Tensor, enc_c: Tensor,
                       target_rows, params: dict[str, Tensor], config: ModelConfig):
    """Run the header LSTM over the valid-slot sequence, batched over targets.

    `target_rows` indexes rows of enc_h/enc_c; every target consumes the same
    attended sequence but starts from its own encoder state.
    """
    seq = ad.gather_rows(attended, valid_slots)
    hc = ad.concat([ad.gather_rows(enc_h, target_rows), ad.gather_rows(enc_c, target_rows)], axis=1)
    return _header_sequence_scan(seq, len(valid_slots), hc,
                                 step_row_of_target=None, params=params, config=config)


def _header_sequence_scan(seq: Tensor, seq_len: int, hc: Tensor, step_row_of_target,
                          params: dict[str, Tensor], config: ModelConfig):
    """Shared header scan; `seq` holds one or more same-length sequences.

    With `step_row_of_target` None there is a single sequence: step i feeds
    row i of `seq` to every target (row-vector broadcast). Otherwise `seq`
    stacks several windows' sequences and step_row_of_target[i] gives, per
    target row of `hc`, the row of `seq` to feed at step i.
    """
    hidden = config.lstm_hidden
    directions = ("uni",) if config.variant == "no_bilstm" else ("bil.fwd", "bil.bwd")
    outs = []
    for direction in directions:
        h = ad.matmul(hc, params[f"{direction}.w_h0"])
        c = ad.matmul(hc, params[f"{direction}.w_c0"])
        order = range(seq_len) if direction != "bil.bwd" else reversed(range(seq_len))
        for i in order:
            if step_row_of_target is None:
                x = ad.slice_axis(seq, 0, i, i + 1)
            else:
                x = ad.gather_rows(seq, step_row_of_target[i])
            h, c = _lstm_cell(x, h, c, params[f"{direction}.w_x"], params[f"{direction}.w_h"],
                              params[f"{direction}.b"], hidden)
        outs.append(h)
    return outs[0] if len(outs) == 1 else ad.concat(outs, axis=1)


def bilstm_head(attended: Tensor, sat_mask, target_slot: int, enc_h: Tensor, enc_c: Tensor,
                params: dict[str, Tensor], config: ModelConfig) -> Tensor:
    """Header output for a single target slot, shape [1, header_out_dim]."""
    mask = np.asarray(sat_mask, dtype=bool)
    if not mask[target_slot]:
        raise MaskedTargetError(f"slot {target_slot} holds no satellite")
    valid_slots = np.flatnonzero(mask)
    return _header_recurrence(attended, valid_slots, enc_h, enc_c, [target_slot], params, config)


def _mlp(x: Tensor, params: dict[str, Tensor], prefix: str, config: ModelConfig) -> Tensor:
    for layer in range(config.mlp_layers):
        x = ad.relu(ad.add(ad.matmul(x, params[f"{prefix}.l{layer}.w"]), params[f"{prefix}.l{layer}.b"]))
    return ad.add(ad.matmul(x, params[f"{prefix}.out.w"]), params[f"{prefix}.out.b"])


@dataclass
class BatchGraph:
    """Graph outputs for a batch of windows, restricted to valid slots."""

    probs: Tensor
    errors_scaled: Tensor
    rows: list
    labels_visibility: np.ndarray
    labels_error_m: np.ndarray


def build_batch_graph(windows: list[FeatureWindow], params: dict[str, Tensor],
                      config: ModelConfig) -> BatchGraph:
    """Forward pass over a batch; returns per-valid-slot sigmoid probabilities
    and scaled error predictions, concatenated in (window, slot) order."""
    config.validate()
    dtype = _dtype_of(params)
    b = len(windows)
    n = windows[0].features.shape[0]
    feats = np.stack([w.features for w in windows]).astype(dtype)
    masks = np.stack([w.sat_mask for w in windows])
    rows_total = b * n

    steps = [Tensor(feats[:, :, t, :].reshape(rows_total, config.input_dim)) for t in range(config.T)]
    _, enc_h, enc_c = _run_lstm_stack(steps, params, "enc", config.lstm_layers,
                                      config.lstm_hidden, rows_total, dtype)
    q_all, base_all, _ = qkv_project(enc_h, params, config)

    # per-window attention; header/heads batched over windows with equal
    # valid-slot counts so the recurrence cost does not scale with batch size
    valid_of = {}
    sequences = {}
    for wi, window in enumerate(windows):
        mask = masks[wi]
        valid = np.flatnonzero(mask)
        if valid.size == 0:
            continue
        lo, hi = wi * n, (wi + 1) * n
        base = ad.slice_axis(base_all, 0, lo, hi)
        if config.variant == "no_attention":
            attended = _mean_context(base, mask, config)
        else:
            q = ad.slice_axis(q_all, 0, lo, hi)
            attended, _ = multi_head_attention(q, base, base, mask, params, config)
        valid_of[wi] = valid
        sequences[wi] = ad.gather_rows(attended, valid)

    groups: dict[int, list[int]] = {}
    for wi, valid in valid_of.items():
        groups.setdefault(valid.size, []).append(wi)

    probs_parts = []
    err_parts = []
    rows = []
    labels_v = []
    labels_e = []
    for nv, wis in groups.items():
        g = len(wis)
        seq = ad.concat([sequences[wi] for wi in wis], axis=0) if g > 1 else sequences[wis[0]]
        target_rows = [wi * n + int(s) for wi in wis for s in valid_of[wi]]
        hc = ad.concat(
            [ad.gather_rows(enc_h, target_rows), ad.gather_rows(enc_c, target_rows)], axis=1
        )
        window_of_target = np.repeat(np.arange(g), nv)
        step_rows = [window_of_target * nv + i for i in range(nv)] if g > 1 else None
        header = _header_sequence_scan(seq, nv, hc, step_rows, params, config)
        trunk = ad.concat([header, ad.gather_rows(enc_h, target_rows)], axis=1)
        probs_parts.append(ad.sigmoid(_mlp(trunk, params, "cls", config)))
        err_parts.append(_mlp(trunk, params, "reg", config))
        for wi in wis:
            window = windows[wi]
            for s in valid_of[wi]:
                rows.append((wi, int(s)))
                labels_v.append(window.labels_visibility[s])
                labels_e.append(window.labels_error[s])
    if not rows:
        raise MaskedTargetError("batch contains no valid satellite slots")
    return BatchGraph(
        probs=ad.concat(probs_parts, axis=0) if len(probs_parts) > 1 else probs_parts[0],
        errors_scaled=ad.concat(err_parts, axis=0) if len(err_parts) > 1 else err_parts[0],
        rows=rows,
        labels_visibility=np.array(labels_v, dtype=float),
        labels_error_m=np.array(labels_e, dtype=float),
    )


def forward(window: FeatureWindow, params: dict[str, Tensor], config: ModelConfig) -> ModelOutput:
    """Predictions for one (already normalized) window."""
    config.validate()
    n = window.features.shape[0]
    mask = np.asarray(window.sat_mask, dtype=bool)
    probs = np.full(n, np.nan)
    errors = np.full(n, np.nan)
    weights = np.zeros((n, config.attn_heads, n))
    if mask.any():
        graph = build_batch_graph([window], params, config)
        for (_, slot), p, e in zip(graph.rows, graph.probs.data[:, 0], graph.errors_scaled.data[:, 0]):
            probs[slot] = float(p)
            errors[slot] = float(e) / config.error_scale
        if config.variant != "no_attention":
            steps, enc_h, enc_c = lstm_encode(window, params, config)
            q, k, v = qkv_project(enc_h, params, config)
            _, weights = multi_head_attention(q, k, v, mask, params, config)
    return ModelOutput(visibility_prob=probs, error_pred_m=errors,
                       attention_weights=weights, valid=mask.copy())


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(params: dict[str, Tensor], config: ModelConfig,
                    normalizer: Normalizer | None, path):
    """Self-describing binary container: magic, version, JSON header, raw blobs.

    Blobs are row-major little-endian floats (f4 by default, f8 preserved
    when the parameters use it), so a save/load round trip is bit exact.
    """
    header_params = []
    blobs = []
    offset = 0
    for p, t in params.items():
        arr = np.ascontiguousarray(t.data)
        if arr.dtype == np.float32:
            code = "f4"
        elif arr.dtype == np.float64:
            code = "f8"
        else:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {p}")
        raw = arr.astype("<" + code).tobytes()
        header_params.append({"path": p, "shape": list(arr.shape), "dtype": code,
                              "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(config),
        "normalizer": None if normalizer is None else {
            "mean": [float(x) for x in normalizer.mean],
            "std": [float(x) for x in normalizer.std],
        },
        "params": header_params,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path, expect_variant: str | None = None):
    """Read a checkpoint back; returns (params, config, normalizer)."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    fixed = len(CHECKPOINT_MAGIC) + 8
    if len(blob) < fixed or blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, header_len = struct.unpack("<II", blob[len(CHECKPOINT_MAGIC) : fixed])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    if len(blob) < fixed + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[fixed : fixed + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupted header: {exc}") from None
    try:
        config = ModelConfig(**header["config"])
        config.validate()
    except (TypeError, KeyError, ModelConfigError) as exc:
        raise CheckpointError(f"{path}: bad config block: {exc}") from None
    if expect_variant is not None and config.variant != expect_variant:
        raise CheckpointError(
            f"{path}: checkpoint holds variant {config.variant!r}, this run needs {expect_variant!r}"
        )
    normalizer = None
    if header.get("normalizer") is not None:
        normalizer = Normalizer(mean=np.array(header["normalizer"]["mean"]),
                                std=np.array(header["normalizer"]["std"]))
    body = blob[fixed + header_len :]
    params: dict[str, Tensor] = {}
    for entry in header["params"]:
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if hi > len(body):
            raise CheckpointError(f"{path}: truncated parameter blob for {entry['path']}")
        arr = np.frombuffer(body[lo:hi], dtype="<" + entry["dtype"]).reshape(entry["shape"]).copy()
        params[entry["path"]] = Tensor(arr, requires_grad=True)
    return params, config, normalizer


class Predictor:
    """A trained model plus the normalizer it was fitted with.

    Keeps inference self-contained: callers hand over raw (un-normalized)
    feature windows.
    """

    def __init__(self, params: dict[str, Tensor], config: ModelConfig, normalizer: Normalizer):
        self.params = params
        self.config = config
        self.normalizer = normalizer

    @classmethod
    def from_checkpoint(cls, path, expect_variant: str | None = None) -> "Predictor":
        params, config, normalizer = load_checkpoint(path, expect_variant=expect_variant)
        if normalizer is None:
            raise CheckpointError(f"{path}: checkpoint carries no normalizer, cannot run inference")
        return cls(params, config, normalizer)

    def save(self, path):
        save_checkpoint(self.params, self.config, self.normalizer, path)

    def predict(self, windows: list[FeatureWindow]) -> list[ModelOutput]:
        from .dataset import apply_normalizer

        normalized = apply_normalizer(windows, self.normalizer)
        return [forward(w, self.params, self.config) for w in normalized]

    def predict_arrays(self, windows: list[FeatureWindow]):
        """(probs, errors_m, valid) stacked over windows, NaN on masked slots."""
        from .dataset import apply_normalizer

        normalized = apply_normalizer(windows, self.normalizer)
        if not normalized:
            return (np.zeros((0, 0)), np.zeros((0, 0)), np.zeros((0, 0), dtype=bool))
        batch = 32
        n = normalized[0].features.shape[0]
        probs = np.full((len(normalized), n), np.nan)
        errs = np.full((len(normalized), n), np.nan)
        valid = np.stack([w.sat_mask for w in normalized])
        for lo in range(0, len(normalized), batch):
            chunk = normalized[lo : lo + batch]
            graph = build_batch_graph(chunk, self.params, self.config)
            for (wi, slot), p, e in zip(graph.rows, graph.probs.data[:, 0],
                                        graph.errors_scaled.data[:, 0]):
                probs[lo + wi, slot] = float(p)
                errs[lo + wi, slot] = float(e) / self.config.error_scale
        return probs, errs, valid
