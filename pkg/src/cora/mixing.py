"""Key/value combination strategies for source -> target attention control.

Interpolation works row-wise on (tokens, d) matrices with a per-row weight
``alpha``; ``alpha = 0`` keeps the source row, ``alpha = 1`` the target row,
and both endpoints are returned bit-exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STRATEGIES = ("mutual", "concat", "lerp", "slerp")
_NORM_EPS = 1e-12
_ANGLE_EPS = 1e-4
_ANTIPODAL_NUDGE = 1e-6


@dataclass(frozen=True)
class MixConfig:
    strategy: str = "slerp"
    alpha: float = 0.5
    lam: float = 1.0
    aligned: bool = True
    novelty_override: bool = True

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; pick one of {STRATEGIES}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")


def lerp(v1, v2, alpha):
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    if v1.shape != v2.shape:
        raise ValueError("length mismatch")
    return (1.0 - alpha) * v1 + alpha * v2


def _as_rows(a):
    a = np.asarray(a, dtype=np.float64)
    return a[None] if a.ndim == 1 else a


def _orthogonal_to(u):
    """Fixed unit vector orthogonal to each row of ``u`` (Gram-Schmidt on the
    basis vector where ``|u|`` is smallest)."""
    e = np.zeros_like(u)
    e[np.arange(len(u)), np.argmin(np.abs(u), axis=1)] = 1.0
    e = e - np.sum(e * u, axis=1, keepdims=True) * u
    return e / np.linalg.norm(e, axis=1, keepdims=True)


def slerp_rows(A, B, alpha):
    """Row-wise spherical interpolation of directions; unit-norm output."""
    A, B = _as_rows(A), _as_rows(B)
    if A.shape != B.shape:
        raise ValueError("shape mismatch")
    alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (A.shape[0],))
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    if np.any(na < _NORM_EPS) or np.any(nb < _NORM_EPS):
        raise ValueError("slerp of a zero vector is undefined")
    u1 = A / na[:, None]
    u2 = B / nb[:, None]
    # half-angle form stays accurate near 0 and pi where arccos(dot) does not
    theta = 2.0 * np.arctan2(np.linalg.norm(u1 - u2, axis=1), np.linalg.norm(u1 + u2, axis=1))
    a = alpha[:, None]

    out = np.empty_like(u1)
    regular = (theta >= _ANGLE_EPS) & (theta <= np.pi - _ANGLE_EPS)
    if regular.any():
        th = theta[regular][:, None]
        ar = a[regular]
        st = np.sin(th)
        out[regular] = np.sin((1.0 - ar) * th) / st * u1[regular] + np.sin(ar * th) / st * u2[regular]
    near = theta < _ANGLE_EPS
    if near.any():
        m = (1.0 - a[near]) * u1[near] + a[near] * u2[near]
        out[near] = m / np.linalg.norm(m, axis=1, keepdims=True)
    anti = theta > np.pi - _ANGLE_EPS
    if anti.any():
        u2n = u2[anti] + _ANTIPODAL_NUDGE * _orthogonal_to(u1[anti])
        u2n /= np.linalg.norm(u2n, axis=1, keepdims=True)
        m = (1.0 - a[anti]) * u1[anti] + a[anti] * u2n
        out[anti] = m / np.linalg.norm(m, axis=1, keepdims=True)

    lo, hi = alpha == 0.0, alpha == 1.0
    out[lo] = u1[lo]
    out[hi] = u2[hi]
    return out


def mq_rows(A, B, alpha):
    """Slerp of directions scaled by the linearly interpolated magnitude.
    Rows at ``alpha`` 0 or 1 return the endpoint row unchanged."""
    A64, B64 = _as_rows(A), _as_rows(B)
    alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (A64.shape[0],))
    mag = (1.0 - alpha) * np.linalg.norm(A64, axis=1) + alpha * np.linalg.norm(B64, axis=1)
    out = mag[:, None] * slerp_rows(A64, B64, alpha)
    out[alpha == 0.0] = A64[alpha == 0.0]
    out[alpha == 1.0] = B64[alpha == 1.0]
    return out


def lerp_rows(A, B, alpha):
    A64, B64 = _as_rows(A), _as_rows(B)
    alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (A64.shape[0],))
    out = (1.0 - alpha)[:, None] * A64 + alpha[:, None] * B64
    out[alpha == 0.0] = A64[alpha == 0.0]
    out[alpha == 1.0] = B64[alpha == 1.0]
    return out


def slerp_dir(v1, v2, alpha: float) -> np.ndarray:
    return slerp_rows(v1, v2, alpha)[0]


def mq_interp(v1, v2, alpha: float) -> np.ndarray:
    return mq_rows(v1, v2, alpha)[0]


def row_alpha(cfg: MixConfig, n: int, novelty=None) -> np.ndarray:
    alpha = np.full(n, cfg.alpha)
    if novelty is not None and cfg.novelty_override:
        alpha[np.asarray(novelty, dtype=bool)] = 1.0
    return alpha


def mix_kv(K_S, V_S, K_T, V_T, cfg: MixConfig, src_index=None, novelty=None, aligned: bool | None = None):
    """Combine source and target keys/values for one attention call.

    ``src_index`` maps each target token to its corresponding source token
    (the token-resolution correspondence); it is required when alignment is
    on. ``novelty`` marks target rows that get ``alpha = 1``. Returns
    ``(K, V, extra_len)`` where ``extra_len`` counts prepended source rows.
    """
    K_S, V_S, K_T, V_T = (np.asarray(a) for a in (K_S, V_S, K_T, V_T))
    if K_S.shape != K_T.shape or V_S.shape != V_T.shape:
        raise ValueError("source and target token counts differ")
    aligned = cfg.aligned if aligned is None else aligned
    if cfg.strategy == "mutual":
        return K_S, V_S, 0
    if cfg.strategy == "concat":
        lam = np.float32(cfg.lam)
        return np.concatenate([lam * K_S, K_T]), np.concatenate([lam * V_S, V_T]), K_S.shape[0]
    if aligned:
        if src_index is None:
            raise ValueError("aligned mixing needs a correspondence field")
        K_S, V_S = K_S[src_index], V_S[src_index]
    alpha = row_alpha(cfg, K_T.shape[0], novelty)
    fn = mq_rows if cfg.strategy == "slerp" else lerp_rows
    K = fn(K_S, K_T, alpha).astype(K_T.dtype)
    V = fn(V_S, V_T, alpha).astype(V_T.dtype)
    return K, V, 0
