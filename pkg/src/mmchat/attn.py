"""Attention computations for the three variants, in double precision,
with hand-derived backward passes and a finite-difference check harness.

The multi-modal variant computes two independently normalized attention
distributions per query, one over allowed text keys (M1) and one over
allowed image keys (M2), and sums them before the value product:

    out = (softmax_M1(S) + softmax_M2(S)) @ V,   S = scale * Q @ K^T

Masking is realized by restricting each softmax to its mask's support
(-inf fill before normalization). Multiplying scores by a 0/1 mask inside
the softmax would still leak weight exp(0) = 1 to forbidden positions, so
support restriction is the only reading under which forbidden edges carry
exactly zero weight. Rows with empty support produce all-zero rows rather
than NaN, which keeps image-free text prefixes and the image rows' text
component well-defined.

Every forward has a matching `_vjp` function that recomputes the forward
internals and returns gradients for all inputs; `grad_check` compares
those against central finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .mask import AttentionVariant, MmcaMask, build_mask, partition
from .modseq import ModalitySequence

GradDict = dict[str, np.ndarray]


@dataclass(frozen=True)
class AttentionConfig:
    """Shape and behavior knobs for multi-head attention.

    ``scale=None`` resolves to 1/sqrt(head_dim). ``normalize_dual_softmax``
    averages the two softmax terms instead of summing them; the literal sum
    is the default, so text rows attending to both modalities carry total
    weight 2.
    """

    variant: AttentionVariant
    num_heads: int
    model_dim: int
    scale: float | None = None
    normalize_dual_softmax: bool = False
    image_self: str = "block"

    def __post_init__(self) -> None:
        if self.num_heads < 1 or self.model_dim < 1:
            raise ValueError("num_heads and model_dim must be positive")
        if self.model_dim % self.num_heads != 0:
            raise ValueError("model_dim must be divisible by num_heads")
        if self.scale is not None and not self.scale > 0:
            raise ValueError("scale must be > 0")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    @property
    def effective_scale(self) -> float:
        return self.scale if self.scale is not None else 1.0 / math.sqrt(self.head_dim)


@dataclass(frozen=True)
class AttentionInputs:
    """Single-head Q, K, V, all d x h and finite."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray

    def __post_init__(self) -> None:
        q = np.asarray(self.q, dtype=np.float64)
        k = np.asarray(self.k, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if q.ndim != 2 or q.shape != k.shape or q.shape != v.shape:
            raise ValueError("Q, K, V must be d x h matrices of equal shape")
        for name, a in (("Q", q), ("K", k), ("V", v)):
            if not np.isfinite(a).all():
                raise ValueError(f"{name} contains non-finite values")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "v", v)

    @property
    def d(self) -> int:
        return self.q.shape[0]


@dataclass(frozen=True)
class CrossParams:
    """Separate key/value representations used by text queries to read
    image keys in the causal-plus-cross variant. Only image rows matter."""

    kx: np.ndarray
    vx: np.ndarray

    def __post_init__(self) -> None:
        kx = np.asarray(self.kx, dtype=np.float64)
        vx = np.asarray(self.vx, dtype=np.float64)
        if kx.ndim != 2 or kx.shape != vx.shape:
            raise ValueError("Kx, Vx must be d x h matrices of equal shape")
        object.__setattr__(self, "kx", kx)
        object.__setattr__(self, "vx", vx)


def masked_softmax(scores: np.ndarray, allow: np.ndarray) -> np.ndarray:
    """Row-wise softmax restricted to the allowed support.

    Disallowed entries are exactly 0 in the output. Rows whose support is
    empty come back all-zero. Each non-empty row is max-shifted for
    stability and sums to 1 up to rounding.
    """
    scores = np.asarray(scores, dtype=np.float64)
    allow = np.asarray(allow, dtype=bool)
    if scores.shape != allow.shape or scores.ndim != 2:
        raise ValueError("scores and allow must be matching 2-d arrays")
    if not np.isfinite(scores).all():
        raise ValueError("scores contain non-finite values")
    nonempty = allow.any(axis=1, keepdims=True)
    filled = np.where(allow, scores, -np.inf)
    shift = np.max(filled, axis=1, keepdims=True)
    shift = np.where(nonempty, shift, 0.0)
    weights = np.exp(filled - shift)
    total = weights.sum(axis=1, keepdims=True)
    return np.where(nonempty, weights / np.where(total == 0.0, 1.0, total), 0.0)


def masked_softmax_vjp(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    """Gradient of masked_softmax w.r.t. the scores, given the forward
    output. Zero rows and masked entries receive zero gradient."""
    inner = np.sum(probs * dprobs, axis=1, keepdims=True)
    return probs * (dprobs - inner)


def _check_dims(inputs: AttentionInputs, mask: MmcaMask) -> None:
    if inputs.d != mask.d:
        raise ValueError(
            f"inputs have {inputs.d} rows but mask dimension is {mask.d}"
        )


def mmca_forward(
    inputs: AttentionInputs,
    mask: MmcaMask,
    scale: float,
    normalize: bool = False,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Dual-softmax attention. Returns (output, A1, A2) so the two
    per-modality weight matrices can be inspected."""
    _check_dims(inputs, mask)
    m1, m2 = partition(mask)
    s = scale * (inputs.q @ inputs.k.T)
    a1 = masked_softmax(s, m1)
    a2 = masked_softmax(s, m2)
    w = a1 + a2
    if normalize:
        w = 0.5 * w
    return w @ inputs.v, a1, a2


def mmca_vjp(
    inputs: AttentionInputs,
    mask: MmcaMask,
    scale: float,
    dout: np.ndarray,
    normalize: bool = False,
) -> GradDict:
    m1, m2 = partition(mask)
    s = scale * (inputs.q @ inputs.k.T)
    a1 = masked_softmax(s, m1)
    a2 = masked_softmax(s, m2)
    w = a1 + a2
    if normalize:
        w = 0.5 * w
    dv = w.T @ dout
    da = dout @ inputs.v.T
    if normalize:
        da = 0.5 * da
    ds = masked_softmax_vjp(a1, da) + masked_softmax_vjp(a2, da)
    dq = scale * (ds @ inputs.k)
    dk = scale * (ds.T @ inputs.q)
    return {"q": dq, "k": dk, "v": dv}


def causal_forward(inputs: AttentionInputs, mask: MmcaMask, scale: float) -> np.ndarray:
    """Single masked softmax over the mask's full support, times V."""
    _check_dims(inputs, mask)
    s = scale * (inputs.q @ inputs.k.T)
    a = masked_softmax(s, mask.allowed())
    return a @ inputs.v


def causal_vjp(
    inputs: AttentionInputs, mask: MmcaMask, scale: float, dout: np.ndarray
) -> GradDict:
    s = scale * (inputs.q @ inputs.k.T)
    a = masked_softmax(s, mask.allowed())
    dv = a.T @ dout
    ds = masked_softmax_vjp(a, dout @ inputs.v.T)
    return {"q": scale * (ds @ inputs.k), "k": scale * (ds.T @ inputs.q), "v": dv}


def _cross_supports(mask: MmcaMask) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split M2 into text-query rows (read through the cross parameters)
    and image-query rows (plain self-attention within the block). Image
    rows are recognized by their diagonal label."""
    m1, m2 = partition(mask)
    image_row = np.diag(mask.entries) == 2
    m2_text = m2 & ~image_row[:, None]
    m2_image = m2 & image_row[:, None]
    return m1, m2_text, m2_image


def cross_forward(
    inputs: AttentionInputs,
    cross: CrossParams | None,
    mask: MmcaMask,
    scale: float,
) -> np.ndarray:
    """Causal-plus-cross baseline: text rows read text keys through K/V and
    image keys through the separate Kx/Vx; image rows self-attend within
    their block through K/V. With Kx = K and Vx = V this reduces exactly to
    the dual-softmax forward."""
    if cross is None:
        raise ValueError("cross_forward requires cross parameters (Kx, Vx)")
    _check_dims(inputs, mask)
    if cross.kx.shape != inputs.k.shape:
        raise ValueError("Kx, Vx must match K, V in shape")
    m1, m2_text, m2_image = _cross_supports(mask)
    s = scale * (inputs.q @ inputs.k.T)
    sx = scale * (inputs.q @ cross.kx.T)
    a1 = masked_softmax(s, m1)
    a2i = masked_softmax(s, m2_image)
    a2x = masked_softmax(sx, m2_text)
    return (a1 + a2i) @ inputs.v + a2x @ cross.vx


def cross_vjp(
    inputs: AttentionInputs,
    cross: CrossParams,
    mask: MmcaMask,
    scale: float,
    dout: np.ndarray,
) -> GradDict:
    m1, m2_text, m2_image = _cross_supports(mask)
    s = scale * (inputs.q @ inputs.k.T)
    sx = scale * (inputs.q @ cross.kx.T)
    a1 = masked_softmax(s, m1)
    a2i = masked_softmax(s, m2_image)
    a2x = masked_softmax(sx, m2_text)
    dv = (a1 + a2i).T @ dout
    dvx = a2x.T @ dout
    da = dout @ inputs.v.T
    ds = masked_softmax_vjp(a1, da) + masked_softmax_vjp(a2i, da)
    dsx = masked_softmax_vjp(a2x, dout @ cross.vx.T)
    dq = scale * (ds @ inputs.k + dsx @ cross.kx)
    dk = scale * (ds.T @ inputs.q)
    dkx = scale * (dsx.T @ inputs.q)
    return {"q": dq, "k": dk, "v": dv, "kx": dkx, "vx": dvx}


# ---------------------------------------------------------------------------
# Multi-head wrapper


@dataclass
class MultiHeadParams:
    """Per-head projection weights. ``wq/wk/wv`` have shape
    (num_heads, model_dim, head_dim); ``wo`` is (model_dim, model_dim).
    ``wkx/wvx`` exist only for the causal-plus-cross variant; that variant
    is the only one that adds parameters."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    wkx: np.ndarray | None = None
    wvx: np.ndarray | None = None

    def param_count(self) -> int:
        count = self.wq.size + self.wk.size + self.wv.size + self.wo.size
        if self.wkx is not None:
            count += self.wkx.size
        if self.wvx is not None:
            count += self.wvx.size
        return count


def init_multi_head_params(
    config: AttentionConfig, rng: np.random.Generator
) -> MultiHeadParams:
    """Random init scaled by 1/sqrt(model_dim); cross projections are
    allocated only when the variant needs them."""
    h, dm, hd = config.num_heads, config.model_dim, config.head_dim
    scale = 1.0 / math.sqrt(dm)

    def w(*shape: int) -> np.ndarray:
        return scale * rng.standard_normal(shape)

    params = MultiHeadParams(wq=w(h, dm, hd), wk=w(h, dm, hd), wv=w(h, dm, hd), wo=w(dm, dm))
    if config.variant is AttentionVariant.CAUSAL_PLUS_CROSS:
        params.wkx = w(h, dm, hd)
        params.wvx = w(h, dm, hd)
    return params


def multi_head_forward(
    config: AttentionConfig,
    x: np.ndarray,
    params: MultiHeadParams,
    seq: ModalitySequence,
) -> np.ndarray:
    """Per-head projections, per-head variant forward over the variant's
    mask built from ``seq``, concatenation, output projection."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != config.model_dim:
        raise ValueError(f"x must be d x {config.model_dim}")
    if x.shape[0] != seq.d:
        raise ValueError("x row count must match the sequence length")
    mask = build_mask(seq, config.variant, config.image_self)
    scale = config.effective_scale
    heads = []
    for h in range(config.num_heads):
        inp = AttentionInputs(x @ params.wq[h], x @ params.wk[h], x @ params.wv[h])
        if config.variant is AttentionVariant.MMCA:
            out, _, _ = mmca_forward(inp, mask, scale, config.normalize_dual_softmax)
        elif config.variant is AttentionVariant.CAUSAL_ONLY:
            out = causal_forward(inp, mask, scale)
        else:
            if params.wkx is None or params.wvx is None:
                raise ValueError("cross variant needs wkx/wvx projections")
            cross = CrossParams(x @ params.wkx[h], x @ params.wvx[h])
            out = cross_forward(inp, cross, mask, scale)
        heads.append(out)
    return np.concatenate(heads, axis=1) @ params.wo


def multi_head_input_vjp(
    config: AttentionConfig,
    x: np.ndarray,
    params: MultiHeadParams,
    seq: ModalitySequence,
    dout: np.ndarray,
) -> np.ndarray:
    """Gradient of multi_head_forward w.r.t. its input activations. Head
    parameters receive no gradient here; the decoder that uses this wrapper
    keeps them frozen."""
    x = np.asarray(x, dtype=np.float64)
    mask = build_mask(seq, config.variant, config.image_self)
    scale = config.effective_scale
    hd = config.head_dim
    dconcat = dout @ params.wo.T
    dx = np.zeros_like(x)
    for h in range(config.num_heads):
        dh = dconcat[:, h * hd : (h + 1) * hd]
        inp = AttentionInputs(x @ params.wq[h], x @ params.wk[h], x @ params.wv[h])
        if config.variant is AttentionVariant.MMCA:
            grads = mmca_vjp(inp, mask, scale, dh, config.normalize_dual_softmax)
        elif config.variant is AttentionVariant.CAUSAL_ONLY:
            grads = causal_vjp(inp, mask, scale, dh)
        else:
            cross = CrossParams(x @ params.wkx[h], x @ params.wvx[h])
            grads = cross_vjp(inp, cross, mask, scale, dh)
            dx += grads["kx"] @ params.wkx[h].T + grads["vx"] @ params.wvx[h].T
        dx += (
            grads["q"] @ params.wq[h].T
            + grads["k"] @ params.wk[h].T
            + grads["v"] @ params.wv[h].T
        )
    return dx


# ---------------------------------------------------------------------------
# Gradient verification


def grad_check(
    loss_and_grad: Callable[[GradDict], tuple[float, GradDict]],
    params: GradDict,
    eps: float = 1e-5,
) -> float:
    """Compare analytic gradients against central finite differences.

    ``loss_and_grad(params)`` returns the scalar loss and a gradient per
    parameter. Returns the max over all parameter entries of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    loss, analytic = loss_and_grad(params)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss in grad_check")
    worst = 0.0
    for name, values in params.items():
        numeric = np.zeros_like(values)
        for idx in np.ndindex(values.shape):
            original = values[idx]
            values[idx] = original + eps
            plus = loss_and_grad(params)[0]
            values[idx] = original - eps
            minus = loss_and_grad(params)[0]
            values[idx] = original
            numeric[idx] = (plus - minus) / (2.0 * eps)
        if not np.isfinite(numeric).all():
            raise FloatingPointError(f"non-finite numeric gradient for {name}")
        a = analytic[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - numeric) / denom)))
    return worst


def variant_grad_check(
    variant: AttentionVariant,
    seq: ModalitySequence,
    head_dim: int = 4,
    eps: float = 1e-5,
    seed: int = 0,
    scale: float | None = None,
    normalize: bool = False,
    image_self: str = "block",
    corrupt: bool = False,
) -> float:
    """Run grad_check for one variant on random Q/K/V (plus Kx/Vx for the
    cross variant) with the loss sum(output). ``corrupt`` deliberately
    breaks the analytic gradient; it exists to prove the harness can fail.
    """
    rng = np.random.default_rng(seed)
    d = seq.d
    mask = build_mask(seq, variant, image_self)
    if scale is None:
        scale = 1.0 / math.sqrt(head_dim)
    params: GradDict = {
        "q": rng.standard_normal((d, head_dim)),
        "k": rng.standard_normal((d, head_dim)),
        "v": rng.standard_normal((d, head_dim)),
    }
    if variant is AttentionVariant.CAUSAL_PLUS_CROSS:
        params["kx"] = rng.standard_normal((d, head_dim))
        params["vx"] = rng.standard_normal((d, head_dim))

    def loss_and_grad(p: GradDict) -> tuple[float, GradDict]:
        inp = AttentionInputs(p["q"], p["k"], p["v"])
        dout = np.ones((d, head_dim))
        if variant is AttentionVariant.MMCA:
            out, _, _ = mmca_forward(inp, mask, scale, normalize)
            grads = mmca_vjp(inp, mask, scale, dout, normalize)
        elif variant is AttentionVariant.CAUSAL_ONLY:
            out = causal_forward(inp, mask, scale)
            grads = causal_vjp(inp, mask, scale, dout)
        else:
            cross = CrossParams(p["kx"], p["vx"])
            out = cross_forward(inp, cross, mask, scale)
            grads = cross_vjp(inp, cross, mask, scale, dout)
        if corrupt:
            grads["q"] = grads["q"] + 1.0
        return float(out.sum()), grads

    return grad_check(loss_and_grad, params, eps)
