"""Embeddings, the selective state-space stack, GRU and linear baselines, dual heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import Tensor, make
from .scan import selective_scan_op

N_OUTCOME = 4
N_TRANSITION = 6
TIME_SCALE = 168.0
PAPER_GRU_WIDTHS = (200, 200, 100, 50)
DESK_GRU_WIDTHS = (32, 32, 16, 8)


@dataclass
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    d_state: int = 16
    expand: int = 2
    conv_width: int = 4
    vocab_size: int = 1
    static_dim: int = 0
    n_outcome: int = N_OUTCOME
    n_transition: int = N_TRANSITION
    dropout: float = 0.1
    seed: int = 0
    pooling: str = "last"
    max_seq: int = 1200
    time_scale: float = TIME_SCALE
    gru_widths: tuple[int, ...] = DESK_GRU_WIDTHS
    gru_dropout: float = 0.2
    gru_max_len: int = 512
    transition_head: bool = True

    def __post_init__(self) -> None:
        self.gru_widths = tuple(int(w) for w in self.gru_widths)
        for name in ("d_model", "n_layers", "d_state", "expand", "conv_width", "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_outcome != N_OUTCOME or self.n_transition != N_TRANSITION:
            raise ValueError("head sizes are fixed by the label taxonomy (4 outcomes, 6 transitions)")
        if self.pooling not in ("last", "mean"):
            raise ValueError("pooling must be 'last' or 'mean'")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gru_widths"] = list(self.gru_widths)
        return d

    @classmethod
    def paper_gru(cls, **kw) -> "ModelConfig":
        return cls(gru_widths=PAPER_GRU_WIDTHS, **kw)


def time_features(t: np.ndarray, scale: float = TIME_SCALE) -> np.ndarray:
    """``[t / scale, sin(2 pi t / 24), cos(2 pi t / 24)]`` per timestamp."""
    t = np.asarray(t, dtype=float)
    w = 2.0 * np.pi * t / 24.0
    return np.stack([t / scale, np.sin(w), np.cos(w)], axis=-1)


# ----------------------------------------------------------------------------
# parameter initialization


class _Init:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(np.asarray(value, dtype=float), requires_grad=True, name=name)

    def normal(self, name: str, shape, std: float) -> None:
        self.add(name, self.rng.normal(0.0, std, size=shape))


def _init_embedding(init: _Init, cfg: ModelConfig) -> None:
    d = cfg.d_model
    init.normal("embed.code", (cfg.vocab_size, d), 0.5)
    init.normal("embed.value", (d,), 0.5)
    init.normal("embed.time", (3, d), 0.5)
    init.normal("embed.null", (d,), 0.5)
    init.normal("static.w", (max(cfg.static_dim, 1), d), 1.0 / np.sqrt(max(cfg.static_dim, 1)))
    init.add("static.b", np.zeros(d))


def _init_heads(init: _Init, cfg: ModelConfig, d_in: int) -> None:
    d = cfg.d_model
    init.normal("head.shared.w", (d_in, d), 1.0 / np.sqrt(d_in))
    init.add("head.shared.b", np.zeros(d))
    init.normal("head.outcome.w", (d, cfg.n_outcome), 1.0 / np.sqrt(d))
    init.add("head.outcome.b", np.zeros(cfg.n_outcome))
    init.normal("head.transition.w", (d, cfg.n_transition), 1.0 / np.sqrt(d))
    init.add("head.transition.b", np.zeros(cfg.n_transition))


def init_mamba_params(cfg: ModelConfig) -> dict[str, Tensor]:
    init = _Init(cfg.seed)
    _init_embedding(init, cfg)
    d, di, N, W = cfg.d_model, cfg.d_inner, cfg.d_state, cfg.conv_width
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        init.add(p + "norm", np.ones(d))
        init.normal(p + "in_proj", (d, di), 1.0 / np.sqrt(d))
        init.normal(p + "gate_proj", (d, di), 1.0 / np.sqrt(d))
        init.add(p + "conv_w", init.rng.uniform(-1, 1, size=(di, W)) / np.sqrt(W))
        init.add(p + "conv_b", np.zeros(di))
        init.normal(p + "dt_proj", (di, di), 0.5 / np.sqrt(di))
        dt = np.exp(init.rng.uniform(np.log(1e-3), np.log(1e-1), size=di))
        init.add(p + "dt_bias", dt + np.log(-np.expm1(-dt)))
        init.normal(p + "B_proj", (di, N), 1.0 / np.sqrt(di))
        init.normal(p + "C_proj", (di, N), 1.0 / np.sqrt(di))
        init.add(p + "A_log", np.log(np.tile(np.arange(1, N + 1, dtype=float), (di, 1))))
        init.add(p + "D", np.ones(di))
        init.normal(p + "out_proj", (di, d), 0.5 / np.sqrt(di))
    _init_heads(init, cfg, 2 * d)
    return init.params


def init_gru_params(cfg: ModelConfig) -> dict[str, Tensor]:
    init = _Init(cfg.seed)
    _init_embedding(init, cfg)
    d_in = cfg.d_model
    for i, H in enumerate(cfg.gru_widths):
        p = f"gru.{i}."
        init.normal(p + "w_x", (d_in, 3 * H), 1.0 / np.sqrt(d_in))
        init.add(p + "b_x", np.zeros(3 * H))
        init.normal(p + "w_h", (H, 3 * H), 1.0 / np.sqrt(H))
        init.add(p + "b_hn", np.zeros(H))
        d_in = H
    init.normal("gru.proj", (d_in, cfg.d_model), 1.0 / np.sqrt(d_in))
    _init_heads(init, cfg, 2 * cfg.d_model)
    return init.params


def init_linear_params(n_features: int, seed: int = 0) -> dict[str, Tensor]:
    init = _Init(seed)
    init.normal("linear.outcome.w", (n_features, N_OUTCOME), 0.01)
    init.add("linear.outcome.b", np.zeros(N_OUTCOME))
    init.normal("linear.transition.w", (n_features, N_TRANSITION), 0.01)
    init.add("linear.transition.b", np.zeros(N_TRANSITION))
    return init.params


# ----------------------------------------------------------------------------
# building blocks


def embed_tokens(codes: np.ndarray, values: np.ndarray, phi: np.ndarray,
                 params: dict[str, Tensor]) -> Tensor:
    """Token embeddings for padded token arrays.

    ``codes`` equal to the vocabulary size mark the null token; its value and
    time features must be zero so the token equals the learned null vector.
    """
    table = ad.concat([params["embed.code"], ad.reshape(params["embed.null"], (1, -1))], axis=0)
    tok = ad.take_rows(table, codes)
    tok = ad.add(tok, ad.mul(Tensor(values[..., None]), params["embed.value"]))
    return ad.add(tok, ad.matmul(Tensor(phi), params["embed.time"]))


def embed_statics(statics: np.ndarray, params: dict[str, Tensor]) -> Tensor:
    statics = np.asarray(statics, dtype=float)
    if statics.shape[-1] == 0:
        statics = np.zeros(statics.shape[:-1] + (params["static.w"].shape[0],))
    return ad.linear(Tensor(statics), params["static.w"], params["static.b"])


def embed_interval(events, statics, params: dict[str, Tensor], code_index: dict[str, int],
                   time_scale: float = TIME_SCALE) -> tuple[Tensor, Tensor]:
    """Embed one observation window.

    ``events`` is a sequence of ``(t, code, value)`` with values already scaled.
    Returns the ``(L, d_model)`` temporal sequence (a single null token when
    there are no events) and the ``(d_model,)`` static embedding.
    """
    null = params["embed.code"].shape[0]
    if len(events) == 0:
        codes, values, phi = np.array([null]), np.zeros(1), np.zeros((1, 3))
    else:
        try:
            codes = np.array([code_index[e[1]] for e in events])
        except KeyError as exc:
            raise KeyError(f"code {exc.args[0]!r} is not in the vocabulary") from None
        values = np.array([e[2] for e in events], dtype=float)
        phi = time_features([e[0] for e in events], time_scale)
    temporal = embed_tokens(codes, values, phi, params)
    return temporal, embed_statics(np.asarray(statics, dtype=float)[None, :], params)[0]


def cumulative_mean(x: Tensor) -> Tensor:
    """Running mean over axis -2."""
    L = x.shape[-2]
    n = np.arange(1, L + 1, dtype=float)[:, None]
    y = np.cumsum(x.data, axis=-2) / n

    def bw(g):
        g = g / n
        return (np.flip(np.cumsum(np.flip(g, axis=-2), axis=-2), axis=-2),)
    return make(y, (x,), bw)


def mamba_layer(x: Tensor, params: dict[str, Tensor], i: int, cfg: ModelConfig,
                train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    p = f"layers.{i}."
    xn = ad.rmsnorm(x, params[p + "norm"])
    u = ad.matmul(xn, params[p + "in_proj"])
    gate = ad.matmul(xn, params[p + "gate_proj"])
    u = ad.silu(ad.causal_depthwise_conv(u, params[p + "conv_w"], params[p + "conv_b"]))
    delta = ad.softplus(ad.add(ad.matmul(u, params[p + "dt_proj"]), params[p + "dt_bias"]))
    B = ad.matmul(u, params[p + "B_proj"])
    C = ad.matmul(u, params[p + "C_proj"])
    A = ad.neg(ad.exp(params[p + "A_log"]))
    y = selective_scan_op(u, delta, A, B, C, params[p + "D"])
    y = ad.mul(y, ad.silu(gate))
    out = ad.matmul(y, params[p + "out_proj"])
    out = ad.dropout(out, cfg.dropout, rng, train)
    return ad.add(x, out)


def mamba_sequence(temporal: Tensor, params: dict[str, Tensor], cfg: ModelConfig,
                   train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Per-position hidden states of the layer stack, same shape as the input."""
    x = temporal
    for i in range(cfg.n_layers):
        x = mamba_layer(x, params, i, cfg, train, rng)
    return x


def mamba_stack(temporal: Tensor, params: dict[str, Tensor], cfg: ModelConfig,
                train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Final hidden vector ``(d_model,)`` for one ``(L, d_model)`` sequence."""
    seq = mamba_sequence(temporal, params, cfg, train, rng)
    if cfg.pooling == "mean":
        seq = cumulative_mean(seq)
    return seq[-1]


def predict_heads(hidden: Tensor, static: Tensor, params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Concatenate, shared FC + SiLU, then separate softmax heads (outcome, transition)."""
    z = ad.concat([hidden, static], axis=-1)
    z = ad.silu(ad.linear(z, params["head.shared.w"], params["head.shared.b"]))
    outcome = ad.softmax(ad.linear(z, params["head.outcome.w"], params["head.outcome.b"]))
    transition = ad.softmax(ad.linear(z, params["head.transition.w"], params["head.transition.b"]))
    return outcome, transition


# ----------------------------------------------------------------------------
# GRU


def _gru_scan(xp: np.ndarray, U: np.ndarray, b_hn: np.ndarray):
    S, L, H3 = xp.shape
    H = H3 // 3
    h = np.zeros((S, H))
    hs = np.empty((S, L, H))
    cache = np.empty((4, S, L, H))  # z, r, n, hn
    for t in range(L):
        hu = ad._mm(h, U)
        z = expit(xp[:, t, :H] + hu[:, :H])
        r = expit(xp[:, t, H:2 * H] + hu[:, H:2 * H])
        hn = hu[:, 2 * H:] + b_hn
        n = np.tanh(xp[:, t, 2 * H:] + r * hn)
        h = (1.0 - z) * n + z * h
        hs[:, t] = h
        cache[0, :, t], cache[1, :, t], cache[2, :, t], cache[3, :, t] = z, r, n, hn
    return hs, cache


def gru_layer(xp: Tensor, U: Tensor, b_hn: Tensor) -> Tensor:
    """GRU recurrence over pre-projected inputs ``xp`` of shape (S, L, 3H).

    Gate order is (update z, reset r, candidate n);
    ``h_t = (1 - z) * n + z * h_{t-1}`` with ``n = tanh(x_n + r * (h U_n + b_hn))``.
    """
    hs, cache = _gru_scan(xp.data, U.data, b_hn.data)

    def bw(g):
        S, L, H = hs.shape
        gxp = np.zeros_like(xp.data)
        gU = np.zeros_like(U.data)
        gb = np.zeros(H)
        carry = np.zeros((S, H))
        for t in range(L - 1, -1, -1):
            z, r, n, hn = cache[0, :, t], cache[1, :, t], cache[2, :, t], cache[3, :, t]
            h_prev = hs[:, t - 1] if t > 0 else np.zeros((S, H))
            dh = g[:, t] + carry
            dn = dh * (1.0 - z) * (1.0 - n * n)
            dz = dh * (h_prev - n) * z * (1.0 - z)
            dhn = dn * r
            dr = dn * hn * r * (1.0 - r)
            gxp[:, t, :H] = dz
            gxp[:, t, H:2 * H] = dr
            gxp[:, t, 2 * H:] = dn
            dhu = np.concatenate([dz, dr, dhn], axis=1)
            gU += h_prev.T @ dhu
            gb += dhn.sum(axis=0)
            carry = dh * z + ad._mm(dhu, U.data.T)
        return gxp, gU, gb
    return make(hs, (xp, U, b_hn), bw)


def gru_sequence(temporal: Tensor, params: dict[str, Tensor], cfg: ModelConfig,
                 train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    x = temporal
    for i in range(len(cfg.gru_widths)):
        p = f"gru.{i}."
        xp = ad.linear(x, params[p + "w_x"], params[p + "b_x"])
        x = gru_layer(xp, params[p + "w_h"], params[p + "b_hn"])
        x = ad.dropout(x, cfg.gru_dropout, rng, train)
    return ad.matmul(x, params["gru.proj"])


def gru_forward(temporal: Tensor, statics, params: dict[str, Tensor], cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Dual-head GRU prediction for one ``(L, d_model)`` sequence (last ``gru_max_len`` tokens)."""
    if temporal.shape[0] > cfg.gru_max_len:
        temporal = temporal[temporal.shape[0] - cfg.gru_max_len:]
    seq = gru_sequence(ad.reshape(temporal, (1,) + temporal.shape), params, cfg)
    hidden = seq[0, -1]
    static = embed_statics(np.asarray(statics, dtype=float)[None, :], params)[0]
    return predict_heads(hidden, static, params)


# ----------------------------------------------------------------------------
# linear baseline


def linear_baseline(features, params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Two independent affine maps of the statistical features, each followed by softmax."""
    x = ad.as_tensor(features)
    expected = params["linear.outcome.w"].shape[0]
    if x.shape[-1] != expected:
        raise ValueError(f"feature length {x.shape[-1]} does not match trained weights ({expected})")
    outcome = ad.softmax(ad.linear(x, params["linear.outcome.w"], params["linear.outcome.b"]))
    transition = ad.softmax(ad.linear(x, params["linear.transition.w"], params["linear.transition.b"]))
    return outcome, transition
