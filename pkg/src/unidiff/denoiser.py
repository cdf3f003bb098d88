"""Unified transformer that predicts clean tokens from a corrupted fused sequence.

Each block runs self-attention over the whole fused sequence, splits the
hidden states by modality, lets every modality attend to the others with its
own attention weights (mutual attention), stitches the sequence back in its
original order, and finishes with a feed-forward layer. All sublayers are
pre-norm residual. A final layer norm feeds one linear head per modality that
emits logits over that modality's segment only, so predictions never place
mass on the mask or on a foreign segment.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import NumericError
from .layout import ModalityLayout, position_modality

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DenoiserConfig:
    d_model: int = 64
    n_heads: int = 4
    n_blocks: int = 4
    ffn_mult: int = 4
    #: "head" scales scores by 1/sqrt(d_head); "paper_literal_sqrt2" uses 1/sqrt(2)
    attn_scale: str = "head"
    #: "input" adds a learned time embedding to the token stream once;
    #: "block" adds a separate learned time embedding at the start of every block
    time_mode: str = "input"
    #: "mutual" is the unified block; "causal" swaps mutual attention for causal
    #: self-attention over the fused order (ablation)
    mixing: str = "mutual"
    init_std: float = 0.02
    norm_eps: float = 1e-5
    #: parameter/activation precision; gradient checks need "float64"
    dtype: str = "float64"

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "toy": DenoiserConfig(d_model=64, n_heads=4, n_blocks=4),
    "gradcheck": DenoiserConfig(d_model=16, n_heads=2, n_blocks=2),
    "ablation": DenoiserConfig(d_model=256, n_heads=16, n_blocks=18),
    "paper": DenoiserConfig(d_model=1024, n_heads=16, n_blocks=20),
}


def preset(name: str, **overrides) -> DenoiserConfig:
    return replace(PRESETS[name], **overrides)


@dataclass(frozen=True)
class SequenceSpec:
    """How the fused sequence is laid out in positions.

    ``grids[m]`` is ``(rows, cols)`` for a grid-structured modality (2-D
    positional encoding) or ``None`` for a sequential one.
    """

    lengths: tuple[int, ...]
    grids: tuple = ()
    order: tuple[int, ...] | None = None

    def __post_init__(self):
        grids = tuple(self.grids) + (None,) * (len(self.lengths) - len(self.grids))
        for n, g in zip(self.lengths, grids):
            if g is not None and g[0] * g[1] != n:
                raise ValueError(f"grid {g} does not cover {n} positions")
        object.__setattr__(self, "lengths", tuple(int(n) for n in self.lengths))
        object.__setattr__(self, "grids", tuple(None if g is None else tuple(g) for g in grids))
        object.__setattr__(self, "order", tuple(range(len(self.lengths))) if self.order is None else tuple(self.order))

    @property
    def position_modality(self) -> np.ndarray:
        return position_modality(self.lengths, self.order)

    def to_dict(self) -> dict:
        return {"lengths": list(self.lengths), "grids": [None if g is None else list(g) for g in self.grids],
                "order": list(self.order)}


def init_params(cfg: DenoiserConfig, layout: ModalityLayout, seq: SequenceSpec, T: int,
                seed: int = 0) -> dict[str, Tensor]:
    """Scaled-normal weights, unit norm gains, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    d, M = cfg.d_model, layout.num_modalities
    p: dict[str, Tensor] = {}

    dt = np.dtype(cfg.dtype)

    def normal(name, *shape):
        p[name] = ag.param(rng.normal(0.0, cfg.init_std, size=shape).astype(dt), name)

    def ones(name, n):
        p[name] = ag.param(np.ones(n, dtype=dt), name)

    def zeros(name, *shape):
        p[name] = ag.param(np.zeros(shape, dtype=dt), name)

    normal("tok_emb", layout.total, d)
    for m, (n, grid) in enumerate(zip(seq.lengths, seq.grids)):
        if grid is None:
            normal(f"pos{m}.seq", n, d)
        else:
            normal(f"pos{m}.row", grid[0], d)
            normal(f"pos{m}.col", grid[1], d)
    if cfg.time_mode == "input":
        normal("time_emb", T + 1, d)
    for b in range(cfg.n_blocks):
        pre = f"block{b}."
        if cfg.time_mode == "block":
            normal(pre + "time", T + 1, d)
        for ln in ("ln1", "ln2", "ln3"):
            ones(pre + ln + ".g", d)
            zeros(pre + ln + ".b", d)
        mixers = ["sa"] + ([f"ma{m}" for m in range(M)] if cfg.mixing == "mutual" and M > 1 else [])
        if cfg.mixing == "causal":
            mixers.append("csa")
        for name in mixers:
            for w in ("wq", "wk", "wv", "wo"):
                normal(f"{pre}{name}.{w}", d, d)
        normal(pre + "ffn.w1", d, cfg.ffn_mult * d)
        zeros(pre + "ffn.b1", cfg.ffn_mult * d)
        normal(pre + "ffn.w2", cfg.ffn_mult * d, d)
        zeros(pre + "ffn.b2", d)
    ones("ln_f.g", d)
    zeros("ln_f.b", d)
    for m, k in enumerate(layout.sizes):
        normal(f"head{m}.w", d, k)
        zeros(f"head{m}.b", k)
    return p


def count_params(cfg: DenoiserConfig, layout: ModalityLayout, seq: SequenceSpec, T: int) -> int:
    """Parameter count without allocating anything."""
    d, M = cfg.d_model, layout.num_modalities
    n = layout.total * d
    n += sum(g[0] * d + g[1] * d if g else L * d for L, g in zip(seq.lengths, seq.grids))
    n += (T + 1) * d * (cfg.n_blocks if cfg.time_mode == "block" else 1)
    mixers = 1 + (M if cfg.mixing == "mutual" and M > 1 else 0) + (cfg.mixing == "causal")
    per_block = 6 * d + mixers * 4 * d * d + 2 * cfg.ffn_mult * d * d + cfg.ffn_mult * d + d
    n += cfg.n_blocks * per_block + 2 * d
    n += sum(d * k + k for k in layout.sizes)
    return n


def _scale(cfg: DenoiserConfig) -> float:
    if cfg.attn_scale == "paper_literal_sqrt2":
        return 1.0 / math.sqrt(2.0)
    return 1.0 / math.sqrt(cfg.d_model // cfg.n_heads)


def attention(xq: Tensor, xkv: Tensor, w: dict, n_heads: int, scale: float, causal: bool = False) -> Tensor:
    """Multi-head attention with queries from ``xq`` and keys/values from ``xkv``."""
    B, Lq, d = xq.shape
    Lk = xkv.shape[1]
    dh = d // n_heads
    q = (xq @ w["wq"]).reshape(B, Lq, n_heads, dh).transpose(0, 2, 1, 3)
    k = (xkv @ w["wk"]).reshape(B, Lk, n_heads, dh).transpose(0, 2, 3, 1)
    v = (xkv @ w["wv"]).reshape(B, Lk, n_heads, dh).transpose(0, 2, 1, 3)
    scores = (q @ k) * scale
    if causal:
        scores = scores + np.triu(np.full((Lq, Lk), -1e30, dtype=scores.data.dtype), k=1)
    a = ag.softmax(scores, axis=-1)
    o = (a @ v).transpose(0, 2, 1, 3).reshape(B, Lq, d)
    return o @ w["wo"]


def attention_weights(xq: np.ndarray, xkv: np.ndarray, w: dict, n_heads: int, scale: float) -> np.ndarray:
    """Softmax attention maps ``(B, heads, Lq, Lk)`` for inspection."""
    B, Lq, d = xq.shape
    dh = d // n_heads
    q = (xq @ w["wq"].data).reshape(B, Lq, n_heads, dh).transpose(0, 2, 1, 3)
    k = (xkv @ w["wk"].data).reshape(B, -1, n_heads, dh).transpose(0, 2, 3, 1)
    s = (q @ k) * scale
    s = np.exp(s - s.max(-1, keepdims=True))
    return s / s.sum(-1, keepdims=True)


def mutual_attention(queries_from: Tensor, keys_values_from: Tensor, w: dict, n_heads: int,
                     scale: float) -> Tensor:
    """Queries from one modality's hidden states, keys and values from another's."""
    if keys_values_from.shape[1] == 0:
        log.warning("mutual attention with no key positions; passing queries through")
        return queries_from
    return attention(queries_from, keys_values_from, w, n_heads, scale)


def _sub(params: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def _ln(x, params, name, eps):
    return ag.layer_norm(x, params[name + ".g"], params[name + ".b"], eps)


@dataclass
class Denoiser:
    """Parameters plus the static structure needed to run them."""

    cfg: DenoiserConfig
    layout: ModalityLayout
    seq: SequenceSpec
    T: int
    params: dict[str, Tensor] = field(default=None)
    seed: int = 0

    def __post_init__(self):
        if self.params is None:
            self.params = init_params(self.cfg, self.layout, self.seq, self.T, self.seed)
        pm = self.seq.position_modality
        self._pos = [np.flatnonzero(pm == m) for m in range(self.layout.num_modalities)]
        self._others = [np.flatnonzero(pm != m) for m in range(self.layout.num_modalities)]
        self._grid_idx = {}
        for m, g in enumerate(self.seq.grids):
            if g is not None:
                r, c = np.divmod(np.arange(self.seq.lengths[m]), g[1])
                self._grid_idx[m] = (r, c)

    @property
    def num_positions(self) -> int:
        return sum(self.seq.lengths)

    @property
    def position_modality(self) -> np.ndarray:
        return self.seq.position_modality

    def positional(self) -> Tensor:
        parts = []
        for m in range(self.layout.num_modalities):
            if m in self._grid_idx:
                r, c = self._grid_idx[m]
                parts.append(ag.embed(self.params[f"pos{m}.row"], r) + ag.embed(self.params[f"pos{m}.col"], c))
            else:
                parts.append(self.params[f"pos{m}.seq"])
        return ag.scatter(parts, self._pos, self.num_positions, axis=0)

    def fused_embed(self, xt: np.ndarray, t: np.ndarray) -> Tensor:
        """Token rows of the joint table + per-modality positions (+ time, in "input" mode)."""
        xt = np.atleast_2d(xt)
        t = np.broadcast_to(np.asarray(t), xt.shape[:1])
        h = ag.embed(self.params["tok_emb"], xt) + self.positional()
        if self.cfg.time_mode == "input":
            h = h + ag.embed(self.params["time_emb"], t).reshape(len(t), 1, self.cfg.d_model)
        return h

    def unified_block(self, h: Tensor, b: int, t: np.ndarray) -> Tensor:
        cfg, p = self.cfg, self.params
        pre = f"block{b}."
        scale = _scale(cfg)
        if cfg.time_mode == "block":
            h = h + ag.embed(p[pre + "time"], t).reshape(len(t), 1, cfg.d_model)
        u = _ln(h, p, pre + "ln1", cfg.norm_eps)
        h = h + attention(u, u, _sub(p, pre + "sa."), cfg.n_heads, scale)
        u = _ln(h, p, pre + "ln2", cfg.norm_eps)
        if cfg.mixing == "causal":
            h = h + attention(u, u, _sub(p, pre + "csa."), cfg.n_heads, scale, causal=True)
        elif self.layout.num_modalities > 1:
            outs = []
            for m in range(self.layout.num_modalities):
                own = ag.take(u, self._pos[m], axis=1)
                rest = ag.take(u, self._others[m], axis=1)
                if rest.shape[1] == 0 or own.shape[1] == 0:
                    outs.append(ag.const(np.zeros(own.shape)))
                    continue
                outs.append(mutual_attention(own, rest, _sub(p, f"{pre}ma{m}."), cfg.n_heads, scale))
            h = h + ag.scatter(outs, self._pos, self.num_positions, axis=1)
        u = _ln(h, p, pre + "ln3", cfg.norm_eps)
        f = ag.gelu(u @ p[pre + "ffn.w1"] + p[pre + "ffn.b1"])
        return h + (f @ p[pre + "ffn.w2"] + p[pre + "ffn.b2"])

    def forward(self, xt: np.ndarray, t) -> list[Tensor]:
        """Per-modality log-probabilities over clean tokens, each ``(B, L_m, K_m)``."""
        xt = np.atleast_2d(np.asarray(xt))
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), xt.shape[:1])
        h = self.fused_embed(xt, t)
        for b in range(self.cfg.n_blocks):
            h = self.unified_block(h, b, t)
            if not np.all(np.isfinite(h.data)):
                raise NumericError(f"non-finite activations after block {b}")
        h = _ln(h, self.params, "ln_f", self.cfg.norm_eps)
        out = []
        for m in range(self.layout.num_modalities):
            hm = ag.take(h, self._pos[m], axis=1)
            logits = hm @ self.params[f"head{m}.w"] + self.params[f"head{m}.b"]
            out.append(ag.log_softmax(logits, axis=-1))
        return out

    def predict(self, xt: np.ndarray, t) -> list[np.ndarray]:
        """x0 probabilities per modality, no graph kept for gradients."""
        return [np.exp(lp.data) for lp in self.forward(xt, t)]

    def predict_dense(self, xt: np.ndarray, t) -> np.ndarray:
        """x0 probabilities scattered onto the full vocabulary, ``(B, L, total)``."""
        probs = self.predict(xt, t)
        B = probs[0].shape[0]
        out = np.zeros((B, self.num_positions, self.layout.total))
        for m, pm in enumerate(probs):
            seg = self.layout.segment(m)
            out[:, self._pos[m][:, None], np.arange(seg.start, seg.stop)[None, :]] = pm
        return out

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.cfg.dtype)

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Reverse-mode gradients of ``loss`` for every parameter (fresh, not accumulated)."""
        self.zero_grad()
        ag.backward(loss)
        return self.grads()

    def zero_grad(self):
        for v in self.params.values():
            v.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (np.zeros_like(v.data) if v.grad is None else v.grad) for k, v in self.params.items()}
