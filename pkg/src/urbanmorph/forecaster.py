"""Sequence models mapping demographic windows to travel-behavior forecasts.

Four interchangeable model kinds share one training loop and FFN head:

  rnn        tanh recurrence, zero-input autoregressive decoder
  lstm       gated recurrence, same decoder
  lstm_attn  lstm encoder + additive (Bahdanau) attention per decoder step
  tft        lstm encoder + learned queries with multi-head scaled
             dot-product attention over the encoder states

"tft" denotes this attention encoder-decoder variant, not the full
published Temporal Fusion Transformer (no gating or variable-selection
networks).  Training minimises smooth L1 with Adam, global-norm gradient
clipping and an internal validation split for model selection.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .checkpoint import CompatibilityError, load_checkpoint, save_checkpoint
from .ingest import SplitDataset
from .metrics import dtw, r_squared
from .seeds import stream
from .tensor import Tensor

MODEL_KINDS = ("rnn", "lstm", "lstm_attn", "tft")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, detail: str):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {detail}")


@dataclass(frozen=True)
class ForecastConfig:
    model_kind: str = "tft"
    input_dim: int = 9
    target_dim: int = 5
    input_len: int = 3
    horizon: int = 3
    hidden: int = 128
    layers: int = 4
    heads: int = 4
    dropout: float = 0.1
    epochs: int = 60
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    val_fraction: float = 0.1
    seed: int = 0


# per-kind capacity defaults; other fields keep the dataclass defaults
_KIND_DEFAULTS = {
    "rnn": {"hidden": 128, "layers": 2},
    "lstm": {"hidden": 256, "layers": 2},
    "lstm_attn": {"hidden": 256, "layers": 2},
    "tft": {"hidden": 128, "layers": 4},
}


def default_config(model_kind: str, **overrides) -> ForecastConfig:
    if model_kind not in MODEL_KINDS:
        raise ValueError(f"unknown model_kind {model_kind!r}; choose from {MODEL_KINDS}")
    merged = {"model_kind": model_kind, **_KIND_DEFAULTS[model_kind], **overrides}
    return ForecastConfig(**merged)


# ---------------------------------------------------------------------------
# cells and layers


def lstm_cell_step(x_t, h, c, wx, wh, b):
    """One LSTM step; x_t may be None for a zero-input decoder step.

    Gate order in the fused projection: input, forget, candidate, output.
    Returns (h_next, c_next).
    """
    m = h.shape[-1]
    z = T.add(T.matmul(h, wh), b)
    if x_t is not None:
        z = T.add(z, T.matmul(x_t, wx))
    i = T.sigmoid(z[:, 0 * m:1 * m])
    f = T.sigmoid(z[:, 1 * m:2 * m])
    g = T.tanh(z[:, 2 * m:3 * m])
    o = T.sigmoid(z[:, 3 * m:4 * m])
    c_next = T.add(T.mul(f, c), T.mul(i, g))
    h_next = T.mul(o, T.tanh(c_next))
    return h_next, c_next


def rnn_cell_step(x_t, h, wx, wh, b):
    z = T.add(T.matmul(h, wh), b)
    if x_t is not None:
        z = T.add(z, T.matmul(x_t, wx))
    return T.tanh(z)


def stack_steps(steps) -> Tensor:
    """[(B, m)] * T -> (B, T, m)."""
    b, m = steps[0].shape
    return T.concat([T.reshape(s, (b, 1, m)) for s in steps], axis=1)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor):
    """softmax(Q K^T / sqrt(d)) V; returns (output, weights).

    q: (B, Tq, d), k and v: (B, T, d); 2-D inputs are lifted to batch 1.
    """
    lifted = q.ndim == 2
    if lifted:
        q = T.reshape(q, (1,) + q.shape)
        k = T.reshape(k, (1,) + k.shape)
        v = T.reshape(v, (1,) + v.shape)
    d = q.shape[-1]
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(d))
    weights = T.softmax(scores, axis=-1)
    out = T.matmul(weights, v)
    if lifted:
        out = T.reshape(out, out.shape[1:])
        weights = T.reshape(weights, weights.shape[1:])
    return out, weights


def multi_head_attention(q, k, v, wq, wk, wv, wo, heads: int):
    """Project, attend per head, concat, project back.

    q: (B, Tq, m); k, v: (B, T, m).  Returns (output (B, Tq, m),
    weights (B, Tq, T) averaged over heads).
    """
    m = q.shape[-1]
    if m % heads:
        raise T.ShapeMismatch(f"multi_head_attention: {heads} heads do not divide dim {m}")
    dh = m // heads
    qp, kp, vp = T.matmul(q, wq), T.matmul(k, wk), T.matmul(v, wv)
    outs, weight_sum = [], None
    for head in range(heads):
        sl = slice(head * dh, (head + 1) * dh)
        out, w = scaled_dot_attention(qp[:, :, sl], kp[:, :, sl], vp[:, :, sl])
        outs.append(out)
        weight_sum = w if weight_sum is None else T.add(weight_sum, w)
    merged = T.matmul(T.concat(outs, axis=-1), wo)
    return merged, T.mul(weight_sum, 1.0 / heads)


def ffn_head(h: Tensor, params: dict, rng=None, dropout: float = 0.0) -> Tensor:
    """Two-layer head with linear readout: Wout(W2 relu(W1 h + b1) + b2) + bout."""
    z = T.relu(T.add(T.matmul(h, params["ffn.w1"]), params["ffn.b1"]))
    if rng is not None and dropout > 0:
        z = T.dropout(z, dropout, rng)
    z = T.add(T.matmul(z, params["ffn.w2"]), params["ffn.b2"])
    return T.add(T.matmul(z, params["ffn.wout"]), params["ffn.bout"])


# ---------------------------------------------------------------------------
# model


class ForecastModel:
    """Parameter container plus the forward pass for one model kind."""

    def __init__(self, cfg: ForecastConfig, params: dict):
        self.cfg = cfg
        self.params = params

    @classmethod
    def initialise(cls, cfg: ForecastConfig, rng) -> "ForecastModel":
        """Weights uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)); biases zero."""
        m, d, k = cfg.hidden, cfg.input_dim, cfg.target_dim
        gate = 4 * m if cfg.model_kind != "rnn" else m
        params: dict = {}

        def weight(name, shape, fan_in):
            params[name] = T.parameter(shape, rng=rng, fan_in=fan_in)

        def zeros(name, shape):
            params[name] = Tensor(np.zeros(shape), requires_grad=True)

        d_in = d
        for layer in range(cfg.layers):
            weight(f"enc{layer}.wx", (d_in, gate), d_in)
            weight(f"enc{layer}.wh", (m, gate), m)
            zeros(f"enc{layer}.b", (gate,))
            d_in = m
        if cfg.model_kind == "lstm_attn":
            weight("attn.w1", (m, m), m)
            weight("attn.w2", (m, m), m)
            weight("attn.v", (m, 1), m)
            weight("attn.wc", (2 * m, m), 2 * m)
            zeros("attn.bc", (m,))
        if cfg.model_kind == "tft":
            weight("attn.queries", (cfg.horizon, m), m)
            for name in ("wq", "wk", "wv", "wo"):
                weight(f"attn.{name}", (m, m), m)
        weight("ffn.w1", (m, m), m)
        zeros("ffn.b1", (m,))
        weight("ffn.w2", (m, m), m)
        zeros("ffn.b2", (m,))
        weight("ffn.wout", (m, k), m)
        zeros("ffn.bout", (k,))
        return cls(cfg, params)

    def parameters(self):
        return list(self.params.values())

    def _zero_state(self, batch: int):
        m = self.cfg.hidden
        return [(Tensor(np.zeros((batch, m))), Tensor(np.zeros((batch, m))))
                for _ in range(self.cfg.layers)]

    def _step_all_layers(self, x_t, state):
        """Advance every layer one step; returns (top output, new state)."""
        inp = x_t
        new_state = []
        for layer in range(self.cfg.layers):
            h, c = state[layer]
            wx = self.params[f"enc{layer}.wx"]
            wh = self.params[f"enc{layer}.wh"]
            b = self.params[f"enc{layer}.b"]
            if self.cfg.model_kind == "rnn":
                h = rnn_cell_step(inp, h, wx, wh, b)
                new_state.append((h, c))
            else:
                h, c = lstm_cell_step(inp, h, c, wx, wh, b)
                new_state.append((h, c))
            inp = h
        return inp, new_state

    def encode(self, x: Tensor):
        """x: (B, T, d) -> (top-layer states (B, T, m), final layer states).

        Strictly causal: step t sees inputs up to t only.
        """
        state = self._zero_state(x.shape[0])
        tops = []
        for t in range(x.shape[1]):
            top, state = self._step_all_layers(x[:, t, :], state)
            tops.append(top)
        return stack_steps(tops), state

    def forward(self, x: Tensor, rng=None):
        """(B, T, d) -> (forecast (B, horizon, k), attention or None).

        rng enables dropout (training); None runs deterministic inference.
        Attention weights (B, horizon, T) are returned for the attending
        kinds, averaged over heads for tft.
        """
        cfg = self.cfg
        enc_h, state = self.encode(x)
        b = x.shape[0]
        drop = cfg.dropout if rng is not None else 0.0

        if cfg.model_kind == "tft":
            queries = T.reshape(self.params["attn.queries"], (1, cfg.horizon, cfg.hidden))
            queries = T.add(queries, Tensor(np.zeros((b, cfg.horizon, cfg.hidden))))
            attended, weights = multi_head_attention(
                queries, enc_h, enc_h,
                self.params["attn.wq"], self.params["attn.wk"],
                self.params["attn.wv"], self.params["attn.wo"], cfg.heads)
            if rng is not None and drop > 0:
                attended = T.dropout(attended, drop, rng)
            flat = T.reshape(attended, (b * cfg.horizon, cfg.hidden))
            y = ffn_head(flat, self.params, rng, drop)
            return T.reshape(y, (b, cfg.horizon, cfg.target_dim)), weights

        outputs, attn_rows = [], []
        for _ in range(cfg.horizon):
            top, state = self._step_all_layers(None, state)
            if cfg.model_kind == "lstm_attn":
                top, row = self._bahdanau(top, enc_h)
                if rng is not None and drop > 0:
                    top = T.dropout(top, drop, rng)
                attn_rows.append(T.reshape(row, (b, 1, row.shape[-1])))
            outputs.append(ffn_head(top, self.params, rng, drop))
        y = stack_steps(outputs)
        weights = T.concat(attn_rows, axis=1) if attn_rows else None
        return y, weights

    def _bahdanau(self, h_dec: Tensor, enc_h: Tensor):
        """Additive attention: v^T tanh(W1 h_dec + W2 h_enc) over enc steps."""
        b, t, m = enc_h.shape
        dec_part = T.reshape(T.matmul(h_dec, self.params["attn.w1"]), (b, 1, m))
        enc_part = T.matmul(enc_h, self.params["attn.w2"])
        scores = T.matmul(T.tanh(T.add(dec_part, enc_part)), self.params["attn.v"])
        alpha = T.softmax(T.reshape(scores, (b, 1, t)), axis=-1)
        context = T.reshape(T.matmul(alpha, enc_h), (b, m))
        combined = T.tanh(T.add(
            T.matmul(T.concat([h_dec, context], axis=-1), self.params["attn.wc"]),
            self.params["attn.bc"]))
        return combined, T.reshape(alpha, (b, t))


# ---------------------------------------------------------------------------
# loss and optimiser


def smooth_l1(pred: Tensor, target: Tensor) -> Tensor:
    """Huber-style loss, mean over every element.

    Per element: 0.5 e^2 if |e| < 1 else |e| - 0.5.  The branch mask is a
    constant of the forward pass; both branches meet smoothly at |e| = 1.
    """
    err = T.sub(pred, target)
    # |e| = e * sign(e): the sign mask is constant, and NaN errors stay NaN
    abs_err = T.mul(err, Tensor(np.sign(err.data)))
    near = Tensor((np.abs(err.data) < 1.0).astype(err.data.dtype))
    far = Tensor(1.0) - near
    quad = T.mul(T.mul(T.square(err), 0.5), near)
    lin = T.mul(T.sub(abs_err, 0.5), far)
    return T.mean(T.add(quad, lin))


class AdamState:
    """Bias-corrected Adam over a named parameter dict."""

    def __init__(self, params: dict, beta1: float, beta2: float, eps: float):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, params: dict, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * (g * g)
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# training / evaluation


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)  # dicts with losses + wall time
    best_epoch: int = -1
    best_val_loss: float = float("inf")


def _windows_to_arrays(windows):
    x = np.stack([w.x for w in windows])
    y = np.stack([w.y for w in windows])
    return x, y


def _validation_split(windows, fraction: float):
    """Hold out the most recent fraction (>= 1 window) by target recency."""
    order = sorted(range(len(windows)),
                   key=lambda i: (windows[i].target_years[-1], windows[i].tract_id, i))
    n_val = max(1, int(round(len(windows) * fraction)))
    if n_val >= len(windows):
        raise ValueError(f"validation split leaves no training windows "
                         f"({n_val} of {len(windows)})")
    val_idx = set(order[-n_val:])
    train = [windows[i] for i in order if i not in val_idx]
    val = [windows[i] for i in sorted(val_idx)]
    return train, val


def _batch_loss(model, x, y, rng=None):
    pred, _ = model.forward(Tensor(x), rng)
    return smooth_l1(pred, Tensor(y))


def train_forecaster(dataset: SplitDataset, cfg: ForecastConfig):
    """Fit one model on the dataset's train windows; returns (model, log).

    Deterministic for a fixed cfg.seed: init, shuffling and dropout draw
    from named sub-streams.  Divergence (non-finite loss) raises
    TrainingDiverged.  The best-validation parameters are restored before
    returning.
    """
    if cfg.input_dim != len(dataset.input_features):
        cfg = replace(cfg, input_dim=len(dataset.input_features))
    model = ForecastModel.initialise(cfg, stream(cfg.seed, "init"))
    train_windows, val_windows = _validation_split(dataset.train, cfg.val_fraction)
    x_train, y_train = _windows_to_arrays(train_windows)
    x_val, y_val = _windows_to_arrays(val_windows)
    shuffle_rng = stream(cfg.seed, "shuffle")
    dropout_rng = stream(cfg.seed, "noise")
    adam = AdamState(model.params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    log = TrainLog()
    best_params = None
    n = len(x_train)
    for epoch in range(cfg.epochs):
        tic = time.perf_counter()
        order = shuffle_rng.permutation(n)
        losses = []
        for b_start in range(0, n, cfg.batch_size):
            idx = order[b_start:b_start + cfg.batch_size]
            loss = _batch_loss(model, x_train[idx], y_train[idx], dropout_rng)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(epoch, b_start // cfg.batch_size,
                                       f"param norm {T.global_norm(model.parameters()):.3g}")
            T.zero_grads(model.parameters())
            T.backward(loss)
            T.clip_global_norm(model.parameters(), cfg.clip_norm)
            adam.step(model.params, cfg.lr)
            losses.append(float(loss.data))
        with T.no_grad():
            val_loss = float(_batch_loss(model, x_val, y_val).data)
        if not np.isfinite(val_loss):
            raise TrainingDiverged(epoch, -1,
                                   f"param norm {T.global_norm(model.parameters()):.3g}")
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses)),
                 "val_loss": val_loss, "wall_time": time.perf_counter() - tic}
        log.epochs.append(entry)
        if val_loss < log.best_val_loss:
            log.best_val_loss = val_loss
            log.best_epoch = epoch
            best_params = {k: p.data.copy() for k, p in model.params.items()}
    if best_params is not None:
        for k, p in model.params.items():
            p.data = best_params[k]
    return model, log


def predict(model: ForecastModel, x: np.ndarray, batch_size: int = 64):
    """Standardized forecasts plus attention weights for (N, T, d) inputs."""
    preds, attns = [], []
    with T.no_grad():
        for start in range(0, len(x), batch_size):
            y, attn = model.forward(Tensor(x[start:start + batch_size]), rng=None)
            preds.append(y.data)
            if attn is not None:
                attns.append(attn.data)
    attn_out = np.concatenate(attns) if attns else None
    return np.concatenate(preds), attn_out


def evaluate_forecaster(model: ForecastModel, dataset: SplitDataset,
                        split: str = "test") -> dict:
    """Held-out metrics: raw-unit RMSE and R2 per target, standardized DTW.

    DTW compares each window's predicted horizon sequence to the truth in
    standardized units so the five targets contribute comparably.
    """
    windows = getattr(dataset, split)
    if not windows:
        raise ValueError(f"no {split} windows to evaluate")
    x, y_std = _windows_to_arrays(windows)
    pred_std, attn = predict(model, x)
    pred_raw = dataset.destandardize_targets(pred_std)
    y_raw = np.stack([w.y_raw for w in windows])
    k = y_raw.shape[-1]
    flat_pred = pred_raw.reshape(-1, k)
    flat_true = y_raw.reshape(-1, k)
    rmse_per_target = np.sqrt(((flat_pred - flat_true) ** 2).mean(axis=0))
    r2_mean, r2_per_target = r_squared(flat_true, flat_pred)
    dtw_values = [dtw(pred_std[i], y_std[i]) for i in range(len(windows))]
    return {
        "split": split,
        "n_windows": len(windows),
        "rmse_per_target": rmse_per_target,
        "rmse_mean": float(rmse_per_target.mean()),
        "rmse_std_units": float(np.sqrt(((pred_std - y_std) ** 2).mean())),
        "r2_mean": r2_mean,
        "r2_per_target": r2_per_target,
        "dtw_mean": float(np.mean(dtw_values)),
        "attention_mean": None if attn is None else attn.mean(axis=0),
    }


# ---------------------------------------------------------------------------
# persistence


def save_forecaster(path, model: ForecastModel, dataset: SplitDataset) -> None:
    """Checkpoint parameters plus the scaler stats needed at forecast time."""
    meta = {
        "kind": "forecaster",
        "config": asdict(model.cfg),
        "input_features": dataset.input_features,
        "target_features": dataset.target_features,
        "param_names": list(model.params),
    }
    tensors = dict(
        (f"param.{k}", p.data) for k, p in model.params.items())
    tensors["scaler.input_mu"] = dataset.input_mu
    tensors["scaler.input_sigma"] = dataset.input_sigma
    tensors["scaler.target_mu"] = dataset.target_mu
    tensors["scaler.target_sigma"] = dataset.target_sigma
    save_checkpoint(path, tensors, meta)


def load_forecaster(path):
    """Returns (model, metadata incl. scaler arrays)."""
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "forecaster":
        raise CompatibilityError(f"{path}: not a forecaster checkpoint")
    cfg = ForecastConfig(**meta["config"])
    params = {}
    for name in meta["param_names"]:
        key = f"param.{name}"
        if key not in tensors:
            raise CompatibilityError(f"{path}: missing tensor {key}")
        params[name] = Tensor(tensors[key], requires_grad=True)
    model = ForecastModel(cfg, params)
    scaler = {k.split(".", 1)[1]: v for k, v in tensors.items()
              if k.startswith("scaler.")}
    meta = dict(meta)
    meta["scaler"] = scaler
    return model, meta
