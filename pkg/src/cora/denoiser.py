"""A fixed, randomly initialised attention denoiser eps(x, t, c).

It is never trained. Inversion makes reconstruction exact for any noise
predictor, so the network only has to be deterministic, prompt dependent and
expose the attention states and a spatial feature map that the editing code
manipulates.

Layout: conv3x3 stem at latent resolution (its activation is the feature
tap), a strided patchify conv down to the token grid, timestep and prompt
biases added to every token, ``n_blocks`` pre-norm self-attention + MLP
blocks, and a transposed conv back to the latent.

With ``prior_skip`` the network output is a scaled residual on top of
``sqrt(1 - alpha_bar(t)) * x``, the optimal noise prediction for unit-variance
Gaussian data. Without it a random network acts like a badly wrong noise
estimate whose errors the four-step sampler amplifies by roughly
``1 / sqrt(alpha_bar_T)``, so edits that change the prompt diverge.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .schedule import train_alpha_bar
from .tensor import Rng

_NULL_PROMPT_SEED = 0xC0A4_0000_0000_0001


@dataclass(frozen=True)
class DenoiserConfig:
    latent_channels: int = 4
    latent_hw: int = 32
    token_hw: int = 16
    d_model: int = 64
    d_feat: int = 16
    n_blocks: int = 2
    n_heads: int = 1
    weight_seed: int = 0
    prior_skip: bool = True
    residual_scale: float = 0.1

    def __post_init__(self):
        sizes = (self.latent_channels, self.latent_hw, self.token_hw, self.d_model,
                 self.d_feat, self.n_blocks, self.n_heads)
        if any(s <= 0 for s in sizes):
            raise ValueError("all sizes must be positive")
        if self.latent_hw % self.token_hw:
            raise ValueError("token_hw must divide latent_hw")
        if self.d_model % self.n_heads:
            raise ValueError("n_heads must divide d_model")
        if not self.residual_scale > 0:
            raise ValueError("residual_scale must be positive")

    @property
    def ratio(self) -> int:
        return self.latent_hw // self.token_hw

    @property
    def n_tokens(self) -> int:
        return self.token_hw * self.token_hw

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def for_latent(cls, latent_hw: int, **kw) -> "DenoiserConfig":
        return cls(latent_hw=latent_hw, token_hw=max(latent_hw // 2, 1), **kw)


@dataclass
class AttentionTap:
    """Per-block query/key/value rows (tokens, d_model) and the stem feature
    map ``D`` of shape (d_feat, latent_hw, latent_hw)."""

    q: list[np.ndarray] = field(default_factory=list)
    k: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    D: np.ndarray | None = None


@dataclass
class HookSet:
    """Attention interception points.

    ``q_fn(block, q)`` may return a replacement query matrix (used for query
    permutation); ``kv_fn(block, q, k, v)`` may return replacement keys and
    values, possibly with more rows than ``q``. Recording always captures the
    unmodified projections.
    """

    record: bool = True
    q_fn: Callable[[int, np.ndarray], np.ndarray] | None = None
    kv_fn: Callable[[int, np.ndarray, np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]] | None = None


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(np.float32(0.7978845608) * (x + np.float32(0.044715) * x * x * x)))


def layer_norm(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + np.float32(eps))


def softmax(logits, axis=-1):
    m = logits.max(axis=axis, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=axis, keepdims=True)


def attention(Q, K, V, scale: float | None = None, return_weights: bool = False):
    """softmax(Q K^T * scale) V for Q (n, d), K (m, d), V (m, dv)."""
    Q = np.asarray(Q)
    K = np.asarray(K)
    V = np.asarray(V)
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise ValueError("attention expects 2-D operands")
    if Q.shape[1] != K.shape[1]:
        raise ValueError(f"query/key width mismatch {Q.shape[1]} vs {K.shape[1]}")
    if K.shape[0] != V.shape[0]:
        raise ValueError("keys and values need the same row count")
    if scale is None:
        scale = 1.0 / np.sqrt(Q.shape[1])
    w = softmax((Q @ K.T) * Q.dtype.type(scale))
    out = w @ V
    return (out, w) if return_weights else out


def timestep_embedding(t: float, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    ang = float(t) * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)])
    if dim % 2:
        emb = np.concatenate([emb, [0.0]])
    return emb.astype(np.float32)


def _token_seed(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")


def embed_prompt(text: str, d_model: int = 64) -> np.ndarray:
    """Unit-norm prompt vector: mean of per-token seeded normal vectors.

    Tokens are summed in sorted order so the result does not depend on word
    order, bit for bit.
    """
    tokens = sorted(text.split())
    if not tokens:
        v = Rng(_NULL_PROMPT_SEED).normal64(d_model)
    else:
        v = np.zeros(d_model)
        for tok in tokens:
            v = v + Rng(_token_seed(tok)).normal64(d_model)
        v = v / len(tokens)
    return (v / np.linalg.norm(v)).astype(np.float32)


class ToyDenoiser:
    def __init__(self, config: DenoiserConfig | None = None):
        self.config = cfg = config or DenoiserConfig()
        rng = Rng(cfg.weight_seed)
        r, d, f, c = cfg.ratio, cfg.d_model, cfg.d_feat, cfg.latent_channels

        def w(*shape, fan_in):
            a = rng.normal(shape) / np.float32(np.sqrt(fan_in))
            a.setflags(write=False)
            return a

        self.w_stem = w(c * 9, f, fan_in=c * 9)
        self.w_patch = w(f * r * r, d, fan_in=f * r * r)
        self.blocks = []
        for _ in range(cfg.n_blocks):
            self.blocks.append({
                "wq": w(d, d, fan_in=d),
                "wk": w(d, d, fan_in=d),
                "wv": w(d, d, fan_in=d),
                "wo": w(d, d, fan_in=d),
                "w1": w(d, 4 * d, fan_in=d),
                "w2": w(4 * d, d, fan_in=4 * d),
            })
        self.w_out = w(d, c * r * r, fan_in=d)
        self.cond_scale = np.float32(np.sqrt(d))
        self._train_ab = train_alpha_bar()

    def prior_gain(self, t: float) -> float:
        """``sqrt(1 - alpha_bar)`` of the training schedule at (fractional) timestep ``t``."""
        ab = np.interp(float(t), np.arange(len(self._train_ab)), self._train_ab)
        return float(np.sqrt(1.0 - ab))

    def _check_input(self, x):
        cfg = self.config
        want = (cfg.latent_channels, cfg.latent_hw, cfg.latent_hw)
        if np.shape(x) != want:
            raise ValueError(f"expected latent of shape {want}, got {np.shape(x)}")

    def features(self, x) -> np.ndarray:
        """Stem activation (d_feat, H, W); the correspondence feature tap."""
        self._check_input(x)
        x = np.asarray(x, dtype=np.float32)
        c, h, wd = x.shape
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        cols = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (c, h, w, 3, 3)
        cols = cols.transpose(1, 2, 0, 3, 4).reshape(h * wd, c * 9)
        feat = gelu(cols @ self.w_stem)
        return np.ascontiguousarray(feat.T.reshape(-1, h, wd))

    def forward(self, x, t: float, c, hooks: HookSet | None = None):
        """Return ``(eps, tap)``. ``tap`` holds recorded Q/K/V when
        ``hooks.record`` is set (or no hooks are given) and always ``D``."""
        cfg = self.config
        D = self.features(x)
        c = np.asarray(c, dtype=np.float32)
        if c.shape != (cfg.d_model,):
            raise ValueError(f"prompt embedding must have shape ({cfg.d_model},)")
        r, n = cfg.ratio, cfg.token_hw
        f = D.shape[0]
        patches = D.reshape(f, n, r, n, r).transpose(1, 3, 0, 2, 4).reshape(n * n, f * r * r)
        h = patches @ self.w_patch
        h = h + timestep_embedding(t, cfg.d_model) + self.cond_scale * c

        record = hooks is None or hooks.record
        tap = AttentionTap(D=D)
        heads = cfg.n_heads
        dh = cfg.d_model // heads
        for bi, blk in enumerate(self.blocks):
            a = layer_norm(h)
            q, k, v = a @ blk["wq"], a @ blk["wk"], a @ blk["wv"]
            if record:
                tap.q.append(q)
                tap.k.append(k)
                tap.v.append(v)
            if hooks is not None and hooks.q_fn is not None:
                q = hooks.q_fn(bi, q)
            if hooks is not None and hooks.kv_fn is not None:
                k, v = hooks.kv_fn(bi, q, k, v)
            k = np.asarray(k, dtype=np.float32)
            v = np.asarray(v, dtype=np.float32)
            if heads == 1:
                o = attention(q, k, v)
            else:
                o = np.concatenate(
                    [attention(q[:, i * dh:(i + 1) * dh], k[:, i * dh:(i + 1) * dh], v[:, i * dh:(i + 1) * dh])
                     for i in range(heads)],
                    axis=1,
                )
            h = h + o @ blk["wo"]
            h = h + gelu(layer_norm(h) @ blk["w1"]) @ blk["w2"]

        out = layer_norm(h) @ self.w_out  # (n*n, c*r*r)
        lc = cfg.latent_channels
        eps = out.reshape(n, n, lc, r, r).transpose(2, 0, 3, 1, 4).reshape(lc, n * r, n * r)
        eps = np.float32(cfg.residual_scale) * eps
        if cfg.prior_skip:
            eps = eps + np.float32(self.prior_gain(t)) * np.asarray(x, dtype=np.float32)
        return np.ascontiguousarray(eps, dtype=np.float32), tap
