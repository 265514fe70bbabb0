"""Self-attention across ensemble members.

Every member's value field is corrected by a convex combination of the
value perturbations of all members.  The combination weights come from a
softmax over scaled key/query dot products taken over the whole grid, so the
weight tensor has size ``k x k x heads`` independent of the resolution.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Param

MEMBER_AXIS = -4


@dataclass
class AttentionModuleParams:
    W_v: Param
    W_k: Param
    W_q: Param
    W_o: Param
    ln_gain: Param
    ln_bias: Param

    @property
    def heads(self):
        return self.W_v.shape[1]

    @property
    def channels(self):
        return self.W_v.shape[0]

    def parameters(self):
        return [self.W_v, self.W_k, self.W_q, self.W_o, self.ln_gain, self.ln_bias]

    @classmethod
    def init(cls, channels, heads, rng, prefix="attn", dtype=np.float32):
        bound = np.sqrt(1.0 / channels)

        def proj(name):
            return Param(f"{prefix}.{name}",
                         rng.uniform(-bound, bound, (channels, heads)).astype(dtype))

        return cls(
            W_v=proj("W_v"),
            W_k=proj("W_k"),
            W_q=proj("W_q"),
            W_o=Param(f"{prefix}.W_o", np.zeros((heads, channels), dtype=dtype)),
            ln_gain=Param(f"{prefix}.ln_gain", np.ones(channels, dtype=dtype)),
            ln_bias=Param(f"{prefix}.ln_bias", np.zeros(channels, dtype=dtype)),
        )


@dataclass
class AttentionDiagnostics:
    weights: np.ndarray   # (..., k_target, k_source, heads)
    attn_map: np.ndarray  # (..., heads, h, w)


def attention_weights(K, Q):
    """Softmax over source members of grid-wide key/query dot products.

    ``K`` and ``Q`` are ``(..., k, heads, h, w)``; the result is
    ``(..., k_target, k_source, heads)`` and sums to one over ``k_source``.
    """
    K, Q = ad.as_tensor(K), ad.as_tensor(Q)
    if K.shape != Q.shape:
        raise DimensionError(f"attention_weights: key {K.shape} and query {Q.shape} differ")
    h, w = K.shape[-2:]
    logits = ad.scale(ad.einsum("...jmyx,...imyx->...ijm", K, Q), 1.0 / np.sqrt(h * w))
    return ad.softmax(logits, axis=-2)


def transform_members(V, weights):
    """v_i + sum_j w_ij (v_j - mean(v)), independently per head."""
    V = ad.as_tensor(V)
    weights = ad.as_tensor(weights)
    k = V.shape[MEMBER_AXIS]
    if weights.shape[-3:] != (k, k, V.shape[-3]):
        raise DimensionError(f"transform_members: weights {weights.shape} do not fit values {V.shape}")
    pert = ad.sub(V, ad.mean(V, axis=MEMBER_AXIS, keepdims=True))
    return ad.add(V, ad.einsum("...ijm,...jmyx->...imyx", weights, pert))


def attention_map(K, Q):
    """Product of the member-mean key and member-mean query, ``(..., heads, h, w)``."""
    K = K.data if isinstance(K, ad.Tensor) else np.asarray(K)
    Q = Q.data if isinstance(Q, ad.Tensor) else np.asarray(Q)
    return K.mean(axis=MEMBER_AXIS) * Q.mean(axis=MEMBER_AXIS)


def module_forward(Z, params: AttentionModuleParams, diagnostics=False, eps=1e-5):
    """One pre-normalized attention block: relu(Z + T(LN(Z)) W_o).

    Returns ``(Z_next, AttentionDiagnostics | None)``.
    """
    Z = ad.as_tensor(Z)
    if Z.ndim < 4:
        raise DimensionError(f"module_forward expects (..., k, c, h, w), got {Z.shape}")
    if Z.shape[MEMBER_AXIS] < 2:
        raise ValueError("ensemble attention needs at least two members")
    N = ad.layer_norm(Z, params.ln_gain, params.ln_bias, eps)
    V = ad.channel_project(N, params.W_v)
    K = ad.channel_project(N, params.W_k)
    Q = ad.channel_project(N, params.W_q)
    weights = attention_weights(K, Q)
    T = transform_members(V, weights)
    out = ad.relu(ad.add(Z, ad.channel_project(T, params.W_o)))
    diag = None
    if diagnostics:
        diag = AttentionDiagnostics(weights=weights.data.copy(), attn_map=attention_map(K, Q))
    return out, diag
