"""Windowed self-attention, channel attention, cross-branch attention and the block."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .exceptions import ShapeError
from .patch import TokenGrid, window_merge, window_partition
from .tensor import (
    Tensor,
    activation,
    add,
    global_avg_pool,
    layer_norm,
    mac_scope,
    matmul,
    pointwise_conv,
    relu,
    reshape,
    scale,
    scale_channels,
    softmax,
    swap_last,
    transpose,
)


@dataclass
class AttentionParams:
    """Query/key/value/output projections, each ``[d, d]`` applied as ``x @ W``."""

    W_q: Tensor
    W_k: Tensor
    W_v: Tensor
    W_o: Tensor
    heads: int = 1

    def __post_init__(self):
        d = self.W_q.shape[0]
        for name in ("W_q", "W_k", "W_v", "W_o"):
            if getattr(self, name).shape != (d, d):
                raise ShapeError(f"{name} must be [{d},{d}], got {getattr(self, name).shape}")
        if self.heads < 1 or d % self.heads:
            raise ShapeError(f"embedding dim {d} is not divisible by {self.heads} heads")

    @property
    def d(self) -> int:
        return self.W_q.shape[0]

    @property
    def d_k(self) -> int:
        return self.d // self.heads


@dataclass
class ChannelAttnParams:
    """Squeeze conv ``W1[C/r, C]``/``b1`` and excite conv ``W2[C, C/r]``/``b2``."""

    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    def __post_init__(self):
        hidden, c = self.W1.shape
        if self.W2.shape != (c, hidden) or self.b1.shape != (hidden,) or self.b2.shape != (c,):
            raise ShapeError("channel attention parameter shapes do not conform")

    @property
    def channels(self) -> int:
        return self.W1.shape[1]

    @property
    def reduction(self) -> int:
        return self.channels // self.W1.shape[0]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # [..., n, d] -> [..., heads, n, d_k]
    *lead, n, d = x.shape
    x = reshape(x, (*lead, n, heads, d // heads))
    r = x.ndim
    axes = list(range(r - 3)) + [r - 2, r - 3, r - 1]
    return transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, heads, n, dk = x.shape
    r = x.ndim
    axes = list(range(r - 3)) + [r - 2, r - 3, r - 1]
    return reshape(transpose(x, axes), (*lead, n, heads * dk))


def attend(q: Tensor, k: Tensor, v: Tensor, heads: int) -> tuple[Tensor, Tensor]:
    """Multi-head ``softmax(Q K^T / sqrt(d_k)) V`` on already-projected matrices.

    Returns the concatenated head outputs ``[..., n_q, d]`` and the attention
    weights ``[..., heads, n_q, n_k]``.
    """
    d_k = q.shape[-1] // heads
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    with mac_scope("scores"):
        scores = scale(matmul(qh, swap_last(kh)), 1.0 / math.sqrt(d_k))
    weights = softmax(scores, axis=-1)
    return _merge_heads(matmul(weights, vh)), weights


def window_self_attention(x: TokenGrid, params: AttentionParams, s: int,
                          return_weights: bool = False):
    """Self-attention restricted to non-overlapping ``s x s`` token windows."""
    if x.d != params.d:
        raise ShapeError(f"tokens have dim {x.d}, attention expects {params.d}")
    slabs = window_partition(x, s)
    q = matmul(slabs, params.W_q)
    k = matmul(slabs, params.W_k)
    v = matmul(slabs, params.W_v)
    mixed, weights = attend(q, k, v, params.heads)
    out = window_merge(matmul(mixed, params.W_o), x.grid_h, x.grid_w, x.patch_size)
    return (out, weights) if return_weights else out


def channel_attention(fmap: Tensor, params: ChannelAttnParams) -> Tensor:
    """Squeeze-and-excitation gating of a ``[C, H, W]`` map."""
    if fmap.ndim != 3 or fmap.shape[0] != params.channels:
        raise ShapeError(f"feature map {fmap.shape} vs {params.channels} gate channels")
    squeezed = pointwise_conv(global_avg_pool(fmap), params.W1, params.b1)
    gate = activation(pointwise_conv(relu(squeezed), params.W2, params.b2), "sigmoid")
    return scale_channels(fmap, gate)


def cross_branch_attention(f_s: TokenGrid, f_l: TokenGrid, p_s: AttentionParams,
                           p_l: AttentionParams, return_weights: bool = False):
    """Patch-token cross attention between the short and the long branch.

    The short branch queries the long branch's keys/values and vice versa.  The
    two results have different token counts, so each is returned to the branch
    that issued the queries: ``(G_s [N_s, d], G_l [N_l, d])``.  Output
    projections come from the querying branch's parameters.
    """
    if f_s.d != f_l.d or p_s.d != f_s.d or p_l.d != f_l.d:
        raise ShapeError(f"branch dims {f_s.d}/{f_l.d} and projection dims {p_s.d}/{p_l.d} "
                         "must all agree")
    if p_s.heads != p_l.heads:
        raise ShapeError("both branches must use the same head count")
    q_s, k_s, v_s = (matmul(f_s.tokens, w) for w in (p_s.W_q, p_s.W_k, p_s.W_v))
    q_l, k_l, v_l = (matmul(f_l.tokens, w) for w in (p_l.W_q, p_l.W_k, p_l.W_v))
    mixed_s, w_s = attend(q_s, k_l, v_l, p_s.heads)
    mixed_l, w_l = attend(q_l, k_s, v_s, p_l.heads)
    g_s = f_s.with_tokens(matmul(mixed_s, p_s.W_o))
    g_l = f_l.with_tokens(matmul(mixed_l, p_l.W_o))
    if return_weights:
        return g_s, g_l, (w_s, w_l)
    return g_s, g_l


@dataclass
class BlockParams:
    """Parameters of one transformer block; disabled stages are ``None``."""

    mlp_W1: Tensor
    mlp_b1: Tensor
    mlp_W2: Tensor
    mlp_b2: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    attn: AttentionParams | None = None
    ln1_gamma: Tensor | None = None
    ln1_beta: Tensor | None = None
    channel: ChannelAttnParams | None = None


def transformer_block(x: TokenGrid, params: BlockParams, window: int,
                      use_spatial: bool = True, use_channel: bool = True) -> TokenGrid:
    """Pre-norm block: window attention, channel gating, then a token-wise MLP.

    Each stage is residual; a disabled stage is skipped entirely.
    """
    tokens = x.tokens
    if use_spatial:
        with mac_scope("window_attention"):
            normed = x.with_tokens(layer_norm(tokens, params.ln1_gamma, params.ln1_beta))
            tokens = add(tokens, window_self_attention(normed, params.attn, window).tokens)
    if use_channel:
        with mac_scope("channel_attention"):
            fmap = x.with_tokens(tokens).to_map()
            fmap = add(fmap, channel_attention(fmap, params.channel))
            tokens = TokenGrid.from_map(fmap).tokens
    with mac_scope("mlp"):
        h = layer_norm(tokens, params.ln2_gamma, params.ln2_beta)
        h = relu(add(matmul(h, params.mlp_W1), params.mlp_b1))
        tokens = add(tokens, add(matmul(h, params.mlp_W2), params.mlp_b2))
    return x.with_tokens(tokens)
