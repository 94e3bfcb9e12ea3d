"""Differentiable building blocks: fourier features, RMSNorm, SwiGLU,
multi-head attention (dense-masked and gathered-neighborhood forms), and
flat-dict parameter initialisation helpers."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, parameter, wrap


class MaskError(ValueError):
    pass


# ---------------------------------------------------------------------------
# parameter initialisation (flat dict of name -> Tensor)

def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.standard_normal((fan_in, fan_out)) * std


def add_linear(params: dict, rng, name: str, fan_in: int, fan_out: int,
               *, bias: bool = True, zero: bool = False) -> None:
    w = np.zeros((fan_in, fan_out)) if zero else glorot(rng, fan_in, fan_out)
    params[f"{name}.w"] = parameter(w, name=f"{name}.w")
    if bias:
        params[f"{name}.b"] = parameter(np.zeros(fan_out), name=f"{name}.b")


def linear(params: dict, name: str, x):
    y = ad.matmul(wrap(x), params[f"{name}.w"])
    b = params.get(f"{name}.b")
    return ad.add(y, b) if b is not None else y


def add_rmsnorm(params: dict, name: str, dim: int) -> None:
    params[f"{name}.g"] = parameter(np.ones(dim), name=f"{name}.g")


def add_swiglu(params: dict, rng, name: str, dim: int, hidden: int) -> None:
    params[f"{name}.gate.w"] = parameter(glorot(rng, dim, hidden), name=f"{name}.gate.w")
    params[f"{name}.up.w"] = parameter(glorot(rng, dim, hidden), name=f"{name}.up.w")
    params[f"{name}.down.w"] = parameter(glorot(rng, hidden, dim), name=f"{name}.down.w")


# ---------------------------------------------------------------------------
# blocks

def fourier_encode(values, num_frequencies: int):
    """Sin/cos features at frequencies 1, 2, 4, ..., 2^(F-1), plus the raw value.

    Input (..., D) maps to (..., D*(2F+1)); per input dimension the layout is
    [sin_0..sin_{F-1}, cos_0..cos_{F-1}, raw]. Inputs are expected prescaled
    to roughly [-1, 1].
    """
    v = wrap(values)
    scalar = v.data.ndim == 0
    if scalar:
        v = ad.reshape(v, (1,))
    freqs = np.pi * (2.0 ** np.arange(num_frequencies))
    base = v.data.shape
    vv = ad.reshape(v, base + (1,))
    angles = ad.mul(vv, Tensor(freqs))
    feats = ad.concat([ad.sin(angles), ad.cos(angles), vv], axis=-1)
    out_shape = base[:-1] + (base[-1] * (2 * num_frequencies + 1),)
    out = ad.reshape(feats, out_shape)
    return ad.reshape(out, (out.data.shape[-1],)) if scalar else out


def rmsnorm(x, gain, eps: float = 1e-8):
    """x / sqrt(mean(x^2) + eps) over the last axis, then elementwise gain."""
    x, gain = wrap(x), wrap(gain)
    ms = ad.mean(ad.square(x), axis=-1, keepdims=True)
    return ad.mul(ad.div(x, ad.sqrt(ad.add(ms, float(eps)))), gain)


def swiglu(x, w_gate, w_up, w_down):
    x = wrap(x)
    gated = ad.mul(ad.silu(ad.matmul(x, wrap(w_gate))), ad.matmul(x, wrap(w_up)))
    return ad.matmul(gated, wrap(w_down))


def apply_swiglu(params: dict, name: str, x):
    return swiglu(x, params[f"{name}.gate.w"], params[f"{name}.up.w"],
                  params[f"{name}.down.w"])


def apply_rmsnorm(params: dict, name: str, x):
    return rmsnorm(x, params[f"{name}.g"])


def _split_heads(t, num_heads: int):
    n, d = t.data.shape
    return ad.transpose(ad.reshape(t, (n, num_heads, d // num_heads)), (1, 0, 2))


def _merge_heads(t):
    h, n, dh = t.data.shape
    return ad.reshape(ad.transpose(t, (1, 0, 2)), (n, h * dh))


def masked_attention(q, k, v, mask, num_heads: int, strict: bool = False):
    """Multi-head scaled dot-product attention with a boolean admit mask.

    mask has shape (n_queries, n_keys), True = key admitted, and is shared
    across heads. A query row with no admitted keys yields a zero output
    vector (or raises MaskError when strict). Masking is arithmetically
    identical to setting excluded logits to -inf before the softmax.
    """
    q, k, v = wrap(q), wrap(k), wrap(v)
    mask = np.asarray(mask, dtype=bool)
    nq, nk = q.data.shape[0], k.data.shape[0]
    if mask.shape != (nq, nk):
        raise ad.ShapeError(f"mask shape {mask.shape} != ({nq}, {nk})")
    empty = ~mask.any(axis=1)
    if strict and empty.any():
        raise MaskError(f"{int(empty.sum())} query rows admit no keys")

    dh = q.data.shape[1] // num_heads
    qh = _split_heads(q, num_heads)
    kh = _split_heads(k, num_heads)
    vh = _split_heads(v, num_heads)
    logits = ad.scale(ad.matmul(qh, ad.transpose(kh, (0, 2, 1))), 1.0 / np.sqrt(dh))

    # detached per-row max over admitted keys keeps exp in range without
    # touching the gradient; fully masked rows shift by zero
    shifted_data = np.where(mask, logits.data, -np.inf)
    rowmax = shifted_data.max(axis=-1, keepdims=True)
    rowmax[~np.isfinite(rowmax)] = 0.0
    w = ad.mul(ad.exp(ad.sub(logits, Tensor(rowmax))), Tensor(mask.astype(np.float64)))
    denom = ad.sum(w, axis=-1, keepdims=True)
    if empty.any():
        denom = ad.add(denom, Tensor(empty.astype(np.float64)[None, :, None]))
    out = ad.matmul(ad.div(w, denom), vh)
    return _merge_heads(out)


def gathered_attention(q, k, v, neighbor_idx, num_heads: int):
    """Attention where query i attends exactly to keys neighbor_idx[i].

    Equivalent to masked_attention with mask[i, j] = (j in neighbor_idx[i]),
    but costs O(n_q * m) instead of O(n_q * n_k).
    """
    q, k, v = wrap(q), wrap(k), wrap(v)
    idx = np.asarray(neighbor_idx, dtype=np.intp)
    nq, d = q.data.shape
    m = idx.shape[1]
    dh = d // num_heads
    dv = v.data.shape[1]
    dvh = dv // num_heads

    kg = ad.gather(k, idx.reshape(-1))
    vg = ad.gather(v, idx.reshape(-1))
    # (H, nq, m, dh)
    kg = ad.transpose(ad.reshape(kg, (nq, m, num_heads, dh)), (2, 0, 1, 3))
    vg = ad.transpose(ad.reshape(vg, (nq, m, num_heads, dvh)), (2, 0, 1, 3))
    qh = ad.reshape(ad.transpose(ad.reshape(q, (nq, num_heads, dh)), (1, 0, 2)),
                    (num_heads, nq, 1, dh))

    logits = ad.scale(ad.matmul(qh, ad.transpose(kg, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    rowmax = logits.data.max(axis=-1, keepdims=True)
    w = ad.exp(ad.sub(logits, Tensor(rowmax)))
    w = ad.div(w, ad.sum(w, axis=-1, keepdims=True))
    out = ad.matmul(w, vg)  # (H, nq, 1, dvh)
    return ad.reshape(ad.transpose(ad.reshape(out, (num_heads, nq, dvh)), (1, 0, 2)),
                      (nq, dv))


def add_attention(params: dict, rng, name: str, dim: int, kv_dim: int | None = None) -> None:
    """Projection weights for one attention block (q/k/v/out)."""
    kv = dim if kv_dim is None else kv_dim
    add_linear(params, rng, f"{name}.q", dim, dim, bias=False)
    add_linear(params, rng, f"{name}.k", kv, dim, bias=False)
    add_linear(params, rng, f"{name}.v", kv, dim, bias=False)
    add_linear(params, rng, f"{name}.o", dim, dim, bias=False)
