"""Attention-head assembly: [CLS] treatments and value-stream convolution.

A doubly-stochastic coupling forces every query row to spread unit mass,
which conflicts with an aggregation token's job of pooling globally.  The
head variants here keep the token-token block doubly stochastic while the
[CLS] row (index 0) is computed by plain softmax (``cls_softmax``) or by
softmax over polarized logits (``cls_pola``); ``full_ds`` applies the
transport coupling to every row including [CLS].

An optional channel-wise 1-D depthwise convolution over the token axis is
applied to values before mixing (O = A * conv(V)), injecting a local
inductive bias at negligible cost.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import coupling as cp
from .validation import InvalidInputError, ShapeMismatchError, as_matrix, as_vector, require

CLS_MODES = ("full_ds", "cls_softmax", "cls_pola")


@dataclass(frozen=True)
class HeadConfig:
    """Head behavior knobs.

    ``beta=None`` resolves to 1/sqrt(d_k) at call time (standard scaled
    dot-product temperature).  ``dwc_kernel=0`` disables the value
    convolution; otherwise it must be odd (3 is the usual choice).
    """

    cls_mode: str = "full_ds"
    beta: float | None = None
    p_s: float = 1.0
    p_o: float = 1.0
    dwc_kernel: int = 0
    epsilon: float = cp.DEFAULT_EPSILON
    sinkhorn_iters: int = cp.DEFAULT_ITERS
    pivot_rank: int = cp.DEFAULT_RANK

    def __post_init__(self):
        require(self.cls_mode in CLS_MODES, f"cls_mode must be one of {CLS_MODES}, got {self.cls_mode!r}")
        if self.beta is not None:
            require(self.beta > 0, "beta must be > 0")
        require(self.p_s > 0 and self.p_o > 0, "polarization exponents must be > 0")
        require(
            self.dwc_kernel == 0 or (self.dwc_kernel > 0 and self.dwc_kernel % 2 == 1),
            "dwc_kernel must be 0 (disabled) or an odd positive integer",
        )
        require(self.epsilon > 0, "epsilon must be > 0")
        require(self.sinkhorn_iters >= 1, "sinkhorn_iters must be >= 1")
        require(self.pivot_rank >= 1, "pivot_rank must be >= 1")

    def resolve_beta(self, d_k: int) -> float:
        return self.beta if self.beta is not None else 1.0 / np.sqrt(d_k)


def cls_softmax_row(q_cls, keys, beta: float) -> np.ndarray:
    """Softmax over beta * <q_cls, k_j>; shift-invariant and sums to 1."""
    require(beta > 0, "beta must be > 0")
    q_cls = as_vector(q_cls, "q_cls")
    keys = as_matrix(keys, "keys")
    require(keys.shape[0] >= 1, "key set must be non-empty")
    require(keys.shape[1] == q_cls.shape[0], "key dim must match q_cls", ShapeMismatchError)
    logits = beta * (keys @ q_cls)
    logits -= logits.max()
    weights = np.exp(logits)
    return weights / weights.sum()


def polarized_cls_logits(q_cls, keys, p_s: float = 1.0, p_o: float = 1.0) -> np.ndarray:
    """Sharpened [CLS] logits from sign-split inner products.

    With x+ = relu(x) and x- = relu(-x), returns
    (<q+,k+> + <q-,k->)^p_s + (<q+,k-> + <q-,k+>)^p_o per key, using the
    continuous extension 0^p = 0.  Both base terms are nonnegative by
    construction, so the powers are real.
    """
    require(p_s > 0 and p_o > 0, "polarization exponents must be > 0")
    q_cls = as_vector(q_cls, "q_cls")
    keys = as_matrix(keys, "keys")
    require(keys.shape[1] == q_cls.shape[0], "key dim must match q_cls", ShapeMismatchError)
    q_pos, q_neg = np.maximum(q_cls, 0.0), np.maximum(-q_cls, 0.0)
    k_pos, k_neg = np.maximum(keys, 0.0), np.maximum(-keys, 0.0)
    same = k_pos @ q_pos + k_neg @ q_neg
    opposite = k_neg @ q_pos + k_pos @ q_neg
    return _power_zero_safe(same, p_s) + _power_zero_safe(opposite, p_o)


def _power_zero_safe(base: np.ndarray, exponent: float) -> np.ndarray:
    out = np.zeros_like(base)
    positive = base > 0
    out[positive] = base[positive] ** exponent
    return out


def depthwise_conv_values(values, kernel) -> np.ndarray:
    """Per-channel 1-D convolution along the token axis, zero-padded to length.

    ``kernel`` has shape (k, d_v) with k odd: one k-tap filter per channel,
    applied as cross-correlation (tap k//2 sits on the current token).
    """
    values = as_matrix(values, "values")
    kernel = as_matrix(kernel, "kernel")
    k, d_v = kernel.shape
    require(k % 2 == 1, "kernel size must be odd")
    require(d_v == values.shape[1], "kernel channel count must match values", ShapeMismatchError)
    n = values.shape[0]
    half = k // 2
    padded = np.zeros((n + 2 * half, d_v))
    padded[half : half + n] = values
    out = np.zeros_like(values)
    for tap in range(k):
        out += kernel[tap] * padded[tap : tap + n]
    return out


def attention_with_cls(tokens, w_q, w_k, w_v, pivot: cp.PivotMeasure, config: HeadConfig, dwc_weights=None) -> np.ndarray:
    """One attention head over (n+1) tokens with index 0 as [CLS].

    ``full_ds``: transport attention over all n+1 rows.  ``cls_softmax`` /
    ``cls_pola``: the doubly-stochastic block covers only the n non-[CLS]
    tokens ([CLS] is excluded as both query and key there), while row 0
    attends over all n+1 keys — by temperature softmax or by polarized
    logits plus softmax (no temperature).  When ``config.dwc_kernel > 0``
    the value stream is convolved first, so every row mixes conv(V).
    """
    tokens = as_matrix(tokens, "tokens")
    w_q = as_matrix(w_q, "w_q")
    w_k = as_matrix(w_k, "w_k")
    w_v = as_matrix(w_v, "w_v")
    require(tokens.shape[0] >= 2, "need at least one non-[CLS] token")
    require(w_q.shape == w_k.shape, "w_q and w_k must share shape", ShapeMismatchError)
    require(w_q.shape[1] == tokens.shape[1], "projection input dim must match tokens", ShapeMismatchError)
    require(w_v.shape[1] == tokens.shape[1], "w_v input dim must match tokens", ShapeMismatchError)

    Q = tokens @ w_q.T
    K = tokens @ w_k.T
    V = tokens @ w_v.T
    if config.dwc_kernel > 0:
        if dwc_weights is None:
            raise InvalidInputError("config.dwc_kernel > 0 requires dwc_weights")
        dwc_weights = as_matrix(dwc_weights, "dwc_weights")
        require(dwc_weights.shape[0] == config.dwc_kernel, "dwc_weights rows must equal dwc_kernel", ShapeMismatchError)
        V = depthwise_conv_values(V, dwc_weights)

    if config.cls_mode == "full_ds":
        return cp.lot_attention(Q, K, V, pivot, config.epsilon, config.sinkhorn_iters).outputs

    token_out = cp.lot_attention(
        Q[1:], K[1:], V[1:], pivot, config.epsilon, config.sinkhorn_iters
    ).outputs
    q_cls = Q[0]
    if config.cls_mode == "cls_softmax":
        weights = cls_softmax_row(q_cls, K, config.resolve_beta(Q.shape[1]))
    else:
        logits = polarized_cls_logits(q_cls, K, config.p_s, config.p_o)
        shifted = np.exp(logits - logits.max())
        weights = shifted / shifted.sum()
    cls_out = weights @ V
    return np.vstack([cls_out[None, :], token_out])
