"""Contains shifted-window attention blocks and patch merging on channels-last token grids.

Grids are laid out as (B, H, W, C) with H running along time and W along frequency. Window
partitioning follows the Swin Transformer convention; on each axis the window is fitted to the
largest divisor of the grid size not exceeding the configured window, so any grid size works.
"""
import functools

import torch
from torch import nn

from audiolog import errors
from audiolog.features import PatchTokenGrid


def fit_window(size: int, window: int) -> int:
    """Returns the largest divisor of ``size`` that does not exceed ``window``."""

    for candidate in range(min(size, window), 0, -1):
        if size % candidate == 0:
            return candidate

    raise errors.ShapeMismatch(f'cannot fit a window into a grid axis of size {size}')


def window_partition(x: torch.Tensor, win_h: int, win_w: int) -> torch.Tensor:
    """Splits (B, H, W, C) into (B * nW, win_h * win_w, C) windows."""

    b, h, w, c = x.shape
    x = x.view(b, h // win_h, win_h, w // win_w, win_w, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, win_h * win_w, c)


def window_reverse(windows: torch.Tensor, win_h: int, win_w: int, h: int, w: int) -> torch.Tensor:
    """Inverse of ``window_partition``."""

    c = windows.shape[-1]
    x = windows.view(-1, h // win_h, w // win_w, win_h, win_w, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, h, w, c)


@functools.lru_cache(maxsize=64)
def _relative_position_index(win_h: int, win_w: int, window: int) -> torch.Tensor:

    coords = torch.stack(torch.meshgrid(torch.arange(win_h), torch.arange(win_w), indexing='ij'))
    coords = coords.flatten(1)
    relative = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0)
    relative = relative + (window - 1)
    return relative[:, :, 0] * (2 * window - 1) + relative[:, :, 1]


@functools.lru_cache(maxsize=64)
def _shift_mask(h: int, w: int, win: tuple[int, int], shift: tuple[int, int]) -> torch.Tensor:
    """Attention mask keeping tokens of different pre-shift regions apart."""

    def regions(size: int, win_size: int, shift_size: int) -> list[slice]:
        if shift_size == 0:
            return [slice(0, size)]
        return [slice(0, size - win_size),
                slice(size - win_size, size - shift_size),
                slice(size - shift_size, size)]

    labels = torch.zeros((1, h, w, 1))
    label = 0
    for h_slice in regions(h, win[0], shift[0]):
        for w_slice in regions(w, win[1], shift[1]):
            labels[:, h_slice, w_slice, :] = label
            label += 1

    windows = window_partition(labels, *win).squeeze(-1)
    mask = windows.unsqueeze(1) - windows.unsqueeze(2)
    return mask.masked_fill(mask != 0, -100.0).masked_fill(mask == 0, 0.0)


class WindowAttention(nn.Module):
    """Multi-head self-attention inside local windows with a relative position bias."""

    def __init__(self,
                 dim: int,
                 window_size: int,
                 num_heads: int,
                 attn_drop: float = 0.0,
                 proj_drop: float = 0.0) -> None:
        super().__init__()

        self.dim = dim
        self.window_size = window_size
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5

        self.relative_position_bias_table = nn.Parameter(
            torch.zeros((2 * window_size - 1) ** 2, num_heads))
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)

        self.qkv = nn.Linear(dim, dim * 3)
        self.attn_drop = nn.Dropout(attn_drop)
        self.proj = nn.Linear(dim, dim)
        self.proj_drop = nn.Dropout(proj_drop)

    def forward(self,
                x: torch.Tensor,
                window_shape: tuple[int, int],
                mask: torch.Tensor | None = None) -> torch.Tensor:
        """Attends within each window of x, shaped (B * nW, N, C)."""

        b_, n, c = x.shape
        heads = self.num_heads

        qkv = self.qkv(x).reshape(b_, n, 3, heads, c // heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]

        attn = (q * self.scale) @ k.transpose(-2, -1)

        index = _relative_position_index(*window_shape, self.window_size)
        bias = self.relative_position_bias_table[index.reshape(-1).to(x.device)]
        attn = attn + bias.view(n, n, heads).permute(2, 0, 1).unsqueeze(0)

        if mask is not None:
            n_windows = mask.shape[0]
            attn = attn.view(b_ // n_windows, n_windows, heads, n, n)
            attn = (attn + mask.to(attn.dtype).unsqueeze(1).unsqueeze(0)).view(-1, heads, n, n)

        attn = self.attn_drop(attn.softmax(dim=-1))

        out = (attn @ v).transpose(1, 2).reshape(b_, n, c)
        return self.proj_drop(self.proj(out))


class SwinBlock(nn.Module):
    """Pre-norm transformer block with (shifted) window attention and an MLP."""

    def __init__(self,
                 dim: int,
                 num_heads: int,
                 window_size: int,
                 shifted: bool,
                 mlp_ratio: float = 4.0,
                 drop: float = 0.0) -> None:
        super().__init__()

        self.window_size = window_size
        self.shifted = shifted

        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window_size, num_heads, attn_drop=drop, proj_drop=drop)
        self.norm2 = nn.LayerNorm(dim)

        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Dropout(drop),
                                 nn.Linear(hidden, dim), nn.Dropout(drop))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Transforms a (B, H, W, C) grid, keeping its shape."""

        _, h, w, _ = x.shape
        win = (fit_window(h, self.window_size), fit_window(w, self.window_size))
        shift = (0, 0)
        if self.shifted:
            shift = (win[0] // 2 if h > win[0] else 0, win[1] // 2 if w > win[1] else 0)

        shortcut = x
        x = self.norm1(x)

        if shift != (0, 0):
            x = torch.roll(x, shifts=(-shift[0], -shift[1]), dims=(1, 2))
            mask: torch.Tensor | None = _shift_mask(h, w, win, shift).to(x.device)
        else:
            mask = None

        windows = self.attn(window_partition(x, *win), win, mask)
        x = window_reverse(windows, *win, h, w)

        if shift != (0, 0):
            x = torch.roll(x, shifts=shift, dims=(1, 2))

        x = shortcut + x
        return x + self.mlp(self.norm2(x))


class PatchMerging(nn.Module):
    """Fuses 2 x 2 neighbouring tokens, halving H and W and doubling C."""

    def __init__(self, dim: int) -> None:
        super().__init__()

        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Merges a (B, H, W, C) grid into (B, H/2, W/2, 2C)."""

        _, h, w, _ = x.shape
        if h % 2 or w % 2:
            raise errors.ShapeMismatch(f'cannot merge a {h}x{w} grid, both sides must be even')

        x = torch.cat([x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]],
                      dim=-1)
        return self.reduction(self.norm(x))


class SwinGroup(nn.Module):
    """Alternating non-shifted and shifted blocks, optionally followed by a patch merge."""

    def __init__(self,
                 dim: int,
                 depth: int,
                 num_heads: int,
                 window_size: int,
                 merge: bool,
                 mlp_ratio: float = 4.0,
                 drop: float = 0.0) -> None:
        super().__init__()

        self.blocks = nn.ModuleList([
            SwinBlock(dim, num_heads, window_size, shifted=i % 2 == 1,
                      mlp_ratio=mlp_ratio, drop=drop)
            for i in range(depth)
        ])
        self.merge = PatchMerging(dim) if merge else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Runs the blocks and the optional merge on a (B, H, W, C) grid."""

        if self.merge is not None and (x.shape[1] % 2 or x.shape[2] % 2):
            raise errors.ShapeMismatch(
                f'group input grid {x.shape[1]}x{x.shape[2]} must have even sides')

        for block in self.blocks:
            x = block(x)

        if self.merge is not None:
            x = self.merge(x)

        return x


def swin_group(tokens: PatchTokenGrid, group: SwinGroup) -> PatchTokenGrid:
    """Applies one encoder group to a token grid."""
    return PatchTokenGrid(tokens=group(tokens.tokens))
