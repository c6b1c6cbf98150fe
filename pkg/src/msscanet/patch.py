"""Patch extraction, token embedding, 2D sinusoidal positions and windowing."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .exceptions import ShapeError
from .tensor import Tensor, add, gather, matmul, reshape, transpose


@dataclass
class TokenGrid:
    """Token matrix ``[N, d]`` laid out on a ``grid_h x grid_w`` raster."""

    tokens: Tensor
    grid_h: int
    grid_w: int
    patch_size: int = 0

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] != self.grid_h * self.grid_w:
            raise ShapeError(f"token matrix {self.tokens.shape} does not fit a "
                             f"{self.grid_h}x{self.grid_w} grid")

    @property
    def n(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def d(self) -> int:
        return self.tokens.shape[1]

    def with_tokens(self, tokens: Tensor) -> "TokenGrid":
        return TokenGrid(tokens, self.grid_h, self.grid_w, self.patch_size)

    def to_map(self) -> Tensor:
        """Channel-first view ``[d, grid_h, grid_w]``."""
        return reshape(transpose(self.tokens, (1, 0)), (self.d, self.grid_h, self.grid_w))

    @classmethod
    def from_map(cls, fmap: Tensor, patch_size: int = 0) -> "TokenGrid":
        d, gh, gw = fmap.shape
        return cls(transpose(reshape(fmap, (d, gh * gw)), (1, 0)), gh, gw, patch_size)


@lru_cache(maxsize=32)
def _patch_index(c: int, h: int, w: int, p: int) -> np.ndarray:
    idx = np.arange(c * h * w).reshape(c, h // p, p, w // p, p)
    # -> (row, col, channel, y, x): raster over patches, row-major inside a patch
    idx = idx.transpose(1, 3, 0, 2, 4).reshape((h // p) * (w // p), c * p * p)
    idx.setflags(write=False)
    return idx


def patchify(image: Tensor, p: int) -> Tensor:
    """Split ``[C, H, W]`` into non-overlapping ``p x p`` patches, one per row."""
    if image.ndim != 3:
        raise ShapeError(f"patchify expects a [C,H,W] image, got {image.shape}")
    c, h, w = image.shape
    if p < 1 or h % p or w % p:
        raise ShapeError(f"image {h}x{w} is not divisible by patch size {p}; "
                         f"resize the input to a multiple of {p}")
    return gather(image, _patch_index(c, h, w, p))


def embed_tokens(raw: Tensor, w_embed: Tensor, pos: Tensor | None,
                 grid_h: int, grid_w: int, patch_size: int = 0) -> TokenGrid:
    """``raw @ w_embed + pos`` arranged as a token grid."""
    if raw.ndim != 2 or w_embed.ndim != 2 or raw.shape[1] != w_embed.shape[0]:
        raise ShapeError(f"embed_tokens: patches {raw.shape} vs projection {w_embed.shape}")
    tokens = matmul(raw, w_embed)
    if pos is not None:
        if pos.shape != tokens.shape:
            raise ShapeError(f"embed_tokens: positions {pos.shape} vs tokens {tokens.shape}")
        tokens = add(tokens, pos)
    return TokenGrid(tokens, grid_h, grid_w, patch_size)


@lru_cache(maxsize=32)
def _positional_table(grid_h: int, grid_w: int, d: int) -> np.ndarray:
    quarter = d // 4
    freqs = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))

    def encode(pos):
        ang = pos[:, None] * freqs[None, :]
        out = np.empty((pos.size, 2 * quarter))
        out[:, 0::2] = np.sin(ang)
        out[:, 1::2] = np.cos(ang)
        return out

    rows = np.repeat(np.arange(grid_h, dtype=np.float64), grid_w)
    cols = np.tile(np.arange(grid_w, dtype=np.float64), grid_h)
    table = np.concatenate([encode(rows), encode(cols)], axis=1)
    table.setflags(write=False)
    return table


def positional_encoding(grid_h: int, grid_w: int, d: int) -> Tensor:
    """Fixed 2D sin/cos code: first half encodes the row, second half the column."""
    if d % 4:
        raise ShapeError(f"positional encoding needs d divisible by 4, got {d}")
    return Tensor(_positional_table(grid_h, grid_w, d))


@lru_cache(maxsize=64)
def _window_index(grid_h: int, grid_w: int, s: int) -> np.ndarray:
    rows = np.arange(grid_h * grid_w).reshape(grid_h // s, s, grid_w // s, s)
    order = rows.transpose(0, 2, 1, 3).reshape(-1)
    order.setflags(write=False)
    return order


def _check_window(grid_h, grid_w, s):
    if s < 1 or grid_h % s or grid_w % s:
        raise ShapeError(f"token grid {grid_h}x{grid_w} is not divisible by window {s}")


def window_partition(grid: TokenGrid, s: int) -> Tensor:
    """Tile the grid into ``s x s`` windows: ``[M, s*s, d]``, raster order within each."""
    _check_window(grid.grid_h, grid.grid_w, s)
    d = grid.d
    order = _window_index(grid.grid_h, grid.grid_w, s)
    index = (order[:, None] * d + np.arange(d)[None, :]).reshape(-1, s * s, d)
    return gather(grid.tokens, index)


def window_merge(slabs: Tensor, grid_h: int, grid_w: int, patch_size: int = 0) -> TokenGrid:
    """Inverse of :func:`window_partition`."""
    if slabs.ndim != 3:
        raise ShapeError(f"window_merge expects [M, s*s, d], got {slabs.shape}")
    m, n, d = slabs.shape
    s = int(round(n ** 0.5))
    if s * s != n or m * n != grid_h * grid_w:
        raise ShapeError(f"{m} windows of {n} tokens cannot form a {grid_h}x{grid_w} grid")
    _check_window(grid_h, grid_w, s)
    inverse = np.argsort(_window_index(grid_h, grid_w, s))
    index = inverse[:, None] * d + np.arange(d)[None, :]
    return TokenGrid(gather(slabs, index), grid_h, grid_w, patch_size)
