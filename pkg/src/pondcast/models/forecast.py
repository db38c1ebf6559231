"""Multi-step forecasters: ForecastNet, LSTM attention and Transformer.

Every model maps a standardized history ``(B, in_len, n_vars)`` and, when
``proposed`` is set, a standardized air-temperature forecast ``(B, out_len)``
to an ``(B, out_len)`` trajectory of one target variable.  Standard
variants never read the exogenous input.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from ..nn import ops
from ..nn.layers import (
    apply_dense,
    causal_mask,
    init_attention,
    init_dense,
    init_layer_norm,
    init_lstm,
    layer_norm,
    multi_head_attention,
    positional_encoding,
)
from ..nn.losses import gaussian_nll, mse_loss, positive_sigma
from ..nn.params import ParamSet
from ..nn.tensor import Tensor, as_tensor, current_tape

KINDS = ("forecastnet", "attention", "transformer")
CHECKPOINT_VERSION = 1


@dataclass
class ForecastConfig:
    kind: str
    proposed: bool = True
    head: str = "linear"
    n_vars: int = 5
    target_index: int = 0
    in_len: int = 192
    out_len: int = 96
    fn_width: int = 24  # ForecastNet dense width per block
    fn_layers: int = 3  # dense layers per ForecastNet block
    rnn_hidden: int = 48  # attention encoder/decoder LSTM size
    align_dim: int = 16  # additive-attention alignment width
    d_model: int = 16
    heads: int = 4
    ff_width: int = 24
    teacher_noise: float = 0.0  # std of noise added to teacher-forced decoder inputs (training only)
    sampling_prob: float = 0.0  # chance a decoder input is the model's own free-running prediction

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.head not in ("linear", "gaussian"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.head == "gaussian" and self.kind != "forecastnet":
            raise ValueError("the gaussian head is only available for forecastnet")
        if self.d_model % self.heads or self.d_model % 2:
            raise ValueError("d_model must be even and divisible by heads")
        if not 0 <= self.target_index < self.n_vars:
            raise ValueError("target_index out of range")
        if self.fn_layers < 1:
            raise ValueError("forecastnet needs at least one layer per block")

    @classmethod
    def from_dict(cls, d: dict) -> "ForecastConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForecastOutput:
    mean: np.ndarray  # (out_len,) or (B, out_len)
    sigma: np.ndarray | None = None
    start: np.datetime64 | None = None  # time of the first forecast step


class ForecastModel:
    """Shared plumbing; subclasses implement ``_init`` and ``forward``."""

    def __init__(self, config: ForecastConfig, seed: int = 0):
        self.config = config
        self.params = ParamSet(seed)
        self._init()

    # subclasses
    def _init(self) -> None:
        raise NotImplementedError

    def forward(self, history, exo=None, target=None, mode: str = "teacher_forced"):
        raise NotImplementedError

    # shared
    def _check(self, history, exo):
        c = self.config
        history = np.asarray(history, dtype=np.float64)
        if history.ndim == 2:
            history = history[None]
        if history.shape[1:] != (c.in_len, c.n_vars):
            raise ValueError(f"history shape {history.shape[1:]} != {(c.in_len, c.n_vars)}")
        if not c.proposed:
            return history, None
        if exo is None:
            raise ValueError("proposed model needs the exogenous forecast")
        exo = np.asarray(exo, dtype=np.float64)
        if exo.ndim == 1:
            exo = exo[None]
        if exo.shape != (len(history), c.out_len):
            raise ValueError(f"exo shape {exo.shape} != {(len(history), c.out_len)}")
        return history, exo

    def last_target(self, history: np.ndarray) -> np.ndarray:
        return history[:, -1, self.config.target_index:self.config.target_index + 1]

    def loss(self, history, exo, target) -> Tensor:
        target = np.asarray(target, dtype=np.float64)
        mu, sigma = self.forward(history, exo, target, mode="teacher_forced")
        if sigma is None:
            return mse_loss(mu, target)
        return gaussian_nll(mu, sigma, target)

    def predict(self, history, exo=None, batch_size: int = 512) -> ForecastOutput:
        """Inference without a tape; autoregressive for the transformer."""
        history = np.asarray(history, dtype=np.float64)
        single = history.ndim == 2
        if single:
            history = history[None]
            exo = None if exo is None else np.asarray(exo)[None]
        means, sigmas = [], []
        for a in range(0, len(history), batch_size):
            ex = None if exo is None or not self.config.proposed else exo[a:a + batch_size]
            mu, sigma = self._infer(history[a:a + batch_size], ex)
            means.append(mu)
            if sigma is not None:
                sigmas.append(sigma)
        mean = np.concatenate(means) if means else np.zeros((0, self.config.out_len))
        sigma = np.concatenate(sigmas) if sigmas else None
        if single:
            return ForecastOutput(mean[0], None if sigma is None else sigma[0])
        return ForecastOutput(mean, sigma)

    def _infer(self, history, exo):
        mu, sigma = self.forward(history, exo, mode="autoregressive")
        return mu.data, None if sigma is None else sigma.data


# -- ForecastNet -------------------------------------------------------------

class ForecastNet(ForecastModel):
    """Time-variant chain of dense blocks, one block (own weights) per output step.

    Block ``k`` sees the flattened input vector, block ``k-1``'s last hidden
    layer and the forecast emitted at step ``k-1``.
    """

    @property
    def input_size(self) -> int:
        c = self.config
        return c.n_vars * c.in_len + (c.out_len if c.proposed else 0)

    @property
    def n_out(self) -> int:
        return 2 if self.config.head == "gaussian" else 1

    def _init(self):
        c, p = self.config, self.params
        w, steps = c.fn_width, c.out_len
        p.glorot("fn.wx", self.input_size, w, shape=(self.input_size, steps * w))
        p.glorot("fn.wy", 1, w, shape=(steps, 1, w))
        if steps > 1:
            p.glorot("fn.wh", w, w, shape=(steps - 1, w, w))
        p.zeros("fn.b1", (steps, w))
        for layer in range(2, c.fn_layers + 1):
            p.glorot(f"fn.w{layer}", w, w, shape=(steps, w, w))
            p.zeros(f"fn.b{layer}", (steps, w))
        p.glorot("fn.wo", w, self.n_out, shape=(steps, w, self.n_out))
        p.zeros("fn.bo", (steps, self.n_out))

    def input_vector(self, history, exo=None) -> np.ndarray:
        """Variable-major concatenation of the histories, then the exo forecast."""
        history, exo = self._check(history, exo)
        flat = history.transpose(0, 2, 1).reshape(len(history), -1)
        return flat if exo is None else np.concatenate([flat, exo], axis=1)

    def forward(self, history, exo=None, target=None, mode: str = "teacher_forced"):
        c, p = self.config, self.params
        history, exo = self._check(history, exo)
        x = self.input_vector(history, exo)
        batch, w = len(x), c.fn_width
        xw = ops.reshape(ops.matmul(x, p["fn.wx"]), (batch, c.out_len, w))
        y_prev = self.last_target(history)
        h = None
        mus, sigmas = [], []
        for k in range(c.out_len):
            z = ops.getitem(xw, (slice(None), k))
            z = ops.add(z, ops.matmul(y_prev, ops.getitem(p["fn.wy"], k)))
            if h is not None:
                z = ops.add(z, ops.matmul(h, ops.getitem(p["fn.wh"], k - 1)))
            z = ops.relu(ops.add(z, ops.getitem(p["fn.b1"], k)))
            for layer in range(2, c.fn_layers + 1):
                z = ops.matmul(z, ops.getitem(p[f"fn.w{layer}"], k))
                z = ops.relu(ops.add(z, ops.getitem(p[f"fn.b{layer}"], k)))
            h = z
            out = ops.add(ops.matmul(z, ops.getitem(p["fn.wo"], k)), ops.getitem(p["fn.bo"], k))
            if self.n_out == 1:
                y_prev = out
            else:
                y_prev = ops.getitem(out, (slice(None), slice(0, 1)))
                sigmas.append(positive_sigma(ops.getitem(out, (slice(None), slice(1, 2)))))
            mus.append(y_prev)
        mu = ops.concat(mus, axis=1)
        return mu, (ops.concat(sigmas, axis=1) if sigmas else None)


# -- attention ---------------------------------------------------------------

class AttentionForecaster(ForecastModel):
    """Bidirectional LSTM encoder, additive (tanh) attention, LSTM decoder.

    Decoder step ``k`` consumes ``[context, y_{k-1}, exo_k]`` (exo only when
    proposed) and emits ``y_k = dense([state, context])``.
    """

    def _init(self):
        c, p = self.config, self.params
        hdim = c.rnn_hidden
        init_lstm(p, "enc.fwd", c.n_vars, hdim)
        init_lstm(p, "enc.bwd", c.n_vars, hdim)
        init_dense(p, "enc.proj", 2 * hdim, hdim)
        init_dense(p, "dec.init", 2 * hdim, hdim)
        p.glorot("att.u", hdim, c.align_dim)
        p.glorot("att.w", hdim, c.align_dim)
        p.zeros("att.b", (c.align_dim,))
        p.glorot("att.v", c.align_dim, 1, shape=(c.align_dim,))
        init_lstm(p, "dec", hdim + 1 + (1 if c.proposed else 0), hdim)
        init_dense(p, "dec.out", 2 * hdim, 1)

    def encode(self, history):
        p = self.params
        batch = len(history)
        hdim = self.config.rnn_hidden
        zeros = np.zeros((batch, hdim))
        fwd, _ = ops.lstm_sequence(history, zeros, zeros, p["enc.fwd.w_x"], p["enc.fwd.w_h"], p["enc.fwd.b"])
        bwd, _ = ops.lstm_sequence(history[:, ::-1], zeros, zeros, p["enc.bwd.w_x"], p["enc.bwd.w_h"],
                                   p["enc.bwd.b"])
        bwd = ops.flip(bwd, axis=1)
        both = ops.concat([fwd, bwd], axis=-1)
        enc = apply_dense(p, "enc.proj", both)
        ends = ops.concat([ops.getitem(fwd, (slice(None), -1)), ops.getitem(bwd, (slice(None), 0))], axis=-1)
        s0 = apply_dense(p, "dec.init", ends, "tanh")
        return enc, s0

    def forward(self, history, exo=None, target=None, mode: str = "teacher_forced",
                return_weights: bool = False):
        c, p = self.config, self.params
        history, exo = self._check(history, exo)
        enc, s = self.encode(history)
        keys = ops.add(ops.matmul(enc, p["att.u"]), p["att.b"])  # (B, T, A)
        cell = ops.mul(s, 0.0)
        y_prev = self.last_target(history)
        outs, weights = [], []
        batch = len(history)
        for k in range(c.out_len):
            alpha = ops.additive_attention(keys, ops.matmul(s, p["att.w"]), p["att.v"])
            ctx = ops.weighted_sum(alpha, enc)
            parts = [ctx, y_prev]
            if exo is not None:
                parts.append(exo[:, k:k + 1])
            s, cell = ops.lstm_cell(ops.concat(parts, axis=1), s, cell, p["dec.w_x"], p["dec.w_h"], p["dec.b"])
            y_prev = apply_dense(p, "dec.out", ops.concat([s, ctx], axis=1))
            outs.append(y_prev)
            if return_weights:
                weights.append(alpha.data)
        mu = ops.concat(outs, axis=1)
        if return_weights:
            return mu, None, np.stack(weights, axis=1)
        return mu, None


# -- transformer -------------------------------------------------------------

class TransformerForecaster(ForecastModel):
    """Single-layer encoder/decoder Transformer with post-layer-norm residuals.

    Decoder input at step ``k`` embeds ``[y_{k-1}, exo_k]`` (exo only when
    proposed), where ``y_{-1}`` is the last observed target.  Training is
    teacher forced; ``predict`` feeds predictions back one step at a time
    using cached keys and values.
    """

    def _init(self):
        c, p = self.config, self.params
        d = c.d_model
        init_dense(p, "enc.embed", c.n_vars, d)
        init_attention(p, "enc.att", d, c.heads)
        init_layer_norm(p, "enc.ln1", d)
        init_dense(p, "enc.ff1", d, c.ff_width)
        init_dense(p, "enc.ff2", c.ff_width, d)
        init_layer_norm(p, "enc.ln2", d)
        init_dense(p, "dec.embed", 2 if c.proposed else 1, d)
        init_attention(p, "dec.self", d, c.heads)
        init_layer_norm(p, "dec.ln1", d)
        init_attention(p, "dec.cross", d, c.heads)
        init_layer_norm(p, "dec.ln2", d)
        init_dense(p, "dec.ff1", d, c.ff_width)
        init_dense(p, "dec.ff2", c.ff_width, d)
        init_layer_norm(p, "dec.ln3", d)
        init_dense(p, "dec.out", d, 1)
        # decoder positions continue the encoder's, so a lag of one day is a fixed offset
        pe = positional_encoding(c.in_len + c.out_len, d)
        self._pe_enc, self._pe_dec = pe[:c.in_len], pe[c.in_len:]
        self._noise = np.random.default_rng([self.params.seed, 1])

    def _ffn(self, prefix, x):
        p = self.params
        return apply_dense(p, f"{prefix}.ff2", apply_dense(p, f"{prefix}.ff1", x, "relu"))

    def encode(self, history):
        p, c = self.params, self.config
        x = ops.add(apply_dense(p, "enc.embed", history), self._pe_enc)
        x = layer_norm(p, "enc.ln1", ops.add(x, multi_head_attention(x, x, x, p, "enc.att", c.heads)))
        return layer_norm(p, "enc.ln2", ops.add(x, self._ffn("enc", x)))

    def decoder_inputs(self, history, exo, shifted):
        """Stack ``[y_{k-1}, exo_k]`` for all steps; ``shifted`` is (B, out_len)."""
        cols = [shifted[:, :, None]]
        if exo is not None:
            cols.append(exo[:, :, None])
        return np.concatenate(cols, axis=2)

    def decode(self, enc, dec_in):
        p, c = self.params, self.config
        steps = dec_in.shape[1]
        x = ops.add(apply_dense(p, "dec.embed", dec_in), self._pe_dec[:steps])
        att = multi_head_attention(x, x, x, p, "dec.self", c.heads, mask=causal_mask(steps))
        x = layer_norm(p, "dec.ln1", ops.add(x, att))
        x = layer_norm(p, "dec.ln2", ops.add(x, multi_head_attention(x, enc, enc, p, "dec.cross", c.heads)))
        x = layer_norm(p, "dec.ln3", ops.add(x, self._ffn("dec", x)))
        return ops.reshape(apply_dense(p, "dec.out", x), (x.shape[0], steps))

    def forward(self, history, exo=None, target=None, mode: str = "teacher_forced"):
        c = self.config
        history, exo = self._check(history, exo)
        if mode == "autoregressive":
            mu, _ = self._infer(history, exo)
            return as_tensor(mu), None
        if mode != "teacher_forced":
            raise ValueError(f"unknown mode {mode!r}")
        if target is None:
            raise ValueError("teacher-forced mode needs targets")
        target = np.asarray(target, dtype=np.float64).reshape(len(history), c.out_len)
        shifted = np.concatenate([self.last_target(history), target[:, :-1]], axis=1)
        if c.sampling_prob > 0.0 and current_tape() is not None:
            own, _ = self._infer(history, exo)
            own = np.concatenate([self.last_target(history), own[:, :-1]], axis=1)
            pick = self._noise.random(shifted.shape) < c.sampling_prob
            pick[:, 0] = False
            shifted = np.where(pick, own, shifted)
        if c.teacher_noise > 0.0 and current_tape() is not None:
            shifted = shifted + c.teacher_noise * self._noise.standard_normal(shifted.shape)
        enc = self.encode(history)
        return self.decode(enc, self.decoder_inputs(history, exo, shifted)), None

    # -- cached autoregressive inference (plain numpy, no tape) --

    def _np_dense(self, prefix, x, act=None):
        y = x @ self.params[f"{prefix}.w"].data + self.params[f"{prefix}.b"].data
        return np.maximum(y, 0.0) if act == "relu" else y

    def _np_ln(self, prefix, x, eps=1e-5):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        y = xc / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
        return y * self.params[f"{prefix}.gain"].data + self.params[f"{prefix}.bias"].data

    def _np_heads(self, x):
        b, t, d = x.shape
        return x.reshape(b, t, self.config.heads, d // self.config.heads).transpose(0, 2, 1, 3)

    def _np_attend(self, prefix, q, kh, vh):
        """One query step ``q`` (B, 1, d) against cached split heads."""
        c = self.config
        qh = self._np_heads(self._np_dense(f"{prefix}.q", q))
        scores = qh @ kh.swapaxes(-1, -2) / np.sqrt(c.d_model // c.heads)
        scores = scores - scores.max(axis=-1, keepdims=True)
        w = np.exp(scores)
        w /= w.sum(axis=-1, keepdims=True)
        ctx = (w @ vh).transpose(0, 2, 1, 3).reshape(len(q), 1, c.d_model)
        return self._np_dense(f"{prefix}.o", ctx)

    def _infer(self, history, exo):
        c, p = self.config, self.params
        enc = self.encode(history).data
        batch = len(history)
        ck = self._np_heads(enc @ p["dec.cross.k.w"].data)
        cv = self._np_heads(self._np_dense("dec.cross.v", enc))
        sk = np.zeros((batch, c.heads, 0, c.d_model // c.heads))
        sv = sk
        y_prev = self.last_target(history)[:, 0]
        out = np.empty((batch, c.out_len))
        for k in range(c.out_len):
            feats = [y_prev[:, None]] + ([] if exo is None else [exo[:, k:k + 1]])
            x = self._np_dense("dec.embed", np.concatenate(feats, axis=1)[:, None, :]) + self._pe_dec[k]
            sk = np.concatenate([sk, self._np_heads(x @ p["dec.self.k.w"].data)], axis=2)
            sv = np.concatenate([sv, self._np_heads(self._np_dense("dec.self.v", x))], axis=2)
            x = self._np_ln("dec.ln1", x + self._np_attend("dec.self", x, sk, sv))
            x = self._np_ln("dec.ln2", x + self._np_attend("dec.cross", x, ck, cv))
            x = self._np_ln("dec.ln3", x + self._np_dense("dec.ff2", self._np_dense("dec.ff1", x, "relu")))
            y_prev = self._np_dense("dec.out", x)[:, 0, 0]
            out[:, k] = y_prev
        return out, None


MODEL_CLASSES = {"forecastnet": ForecastNet, "attention": AttentionForecaster,
                 "transformer": TransformerForecaster}


def build_model(config: ForecastConfig, seed: int = 0) -> ForecastModel:
    return MODEL_CLASSES[config.kind](config, seed)


def forecast(model: ForecastModel, window) -> ForecastOutput:
    """Forecast one :class:`~pondcast.datapipe.WindowPair` (or anything with
    ``history``/``exo``/``end_time``)."""
    out = model.predict(window.history, window.exo)
    end = getattr(window, "end_time", None)
    if end is not None:
        out.start = np.datetime64(end, "s") + np.timedelta64(15, "m")
    return out


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(model: ForecastModel, path, extra: dict | None = None) -> None:
    """JSON container; Python float repr round-trips float64 exactly."""
    doc = {
        "schema_version": CHECKPOINT_VERSION,
        "family": "forecast",
        "config": model.config.to_dict(),
        "seed": model.params.seed,
        "params": {name: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}
                   for name, t in model.params.items()},
        "extra": extra or {},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def read_checkpoint(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('schema_version')!r}")
    doc["state"] = {name: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
                    for name, v in doc["params"].items()}
    return doc


def load_checkpoint(path) -> tuple[ForecastModel, dict]:
    doc = read_checkpoint(path)
    model = build_model(ForecastConfig.from_dict(doc["config"]), doc.get("seed", 0))
    model.params.load_state_dict(doc["state"])
    return model, doc.get("extra", {})
