"""Differentiable building blocks shared by the encoder, decoder and heads.

All blocks take and return ``(B, C, H, W)`` feature maps.
"""
from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F


class ShapeError(ValueError):
    pass


class EqualLinear(nn.Module):
    """Linear layer with runtime weight scaling (equalized learning rate).

    Weights are stored at unit scale and multiplied by ``lr_mul / sqrt(in_dim)``
    in the forward pass, so an Adam step moves the effective weight by
    ``lr * lr_mul / sqrt(in_dim)`` whatever the fan-in.
    """

    def __init__(self, in_dim: int, out_dim: int, bias: bool = True, lr_mul: float = 1.0,
                 bias_init: float = 0.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_dim, in_dim) / lr_mul)
        self.bias = nn.Parameter(torch.full((out_dim,), bias_init / lr_mul)) if bias else None
        self.scale = lr_mul / in_dim**0.5
        self.lr_mul = lr_mul

    def forward(self, x):
        bias = self.bias * self.lr_mul if self.bias is not None else None
        return F.linear(x, self.weight * self.scale, bias)


class ResidualConvBlock(nn.Module):
    def __init__(self, channels: int, zero_init: bool = False):
        super().__init__()
        self.channels = channels
        self.conv1 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.act = nn.LeakyReLU(0.2)
        self.conv2 = nn.Conv2d(channels, channels, 3, 1, 1)
        if zero_init:
            for conv in (self.conv1, self.conv2):
                nn.init.zeros_(conv.weight)
                nn.init.zeros_(conv.bias)

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {x.shape[1]}")
        return x + self.conv2(self.act(self.conv1(x)))


def window_partition(x, ws: int):
    # (B, H, W, C) -> (B * nW, ws * ws, C)
    b, h, w, c = x.shape
    x = x.view(b, h // ws, ws, w // ws, ws, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, c)


def window_reverse(windows, ws: int, h: int, w: int):
    c = windows.shape[-1]
    b = windows.shape[0] // ((h // ws) * (w // ws))
    x = windows.view(b, h // ws, w // ws, ws, ws, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)


def shift_mask(h: int, w: int, ws: int, shift: int, device=None):
    """Additive mask (nW, N, N) blocking attention across cyclic-shift seams."""
    img = torch.zeros(1, h, w, 1, device=device)
    cnt = 0
    for hs in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
        for wsl in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
            img[:, hs, wsl, :] = cnt
            cnt += 1
    win = window_partition(img, ws).squeeze(-1)
    diff = win.unsqueeze(1) - win.unsqueeze(2)
    return torch.zeros_like(diff).masked_fill(diff != 0, -100.0)


def effective_window(edge: int, window: int) -> tuple[int, bool]:
    """Window actually used at ``edge`` and whether shifting is possible."""
    if edge <= window:
        return edge, False
    if edge % window:
        raise ShapeError(f"feature edge {edge} is not divisible by window size {window}")
    return window, True


class RelativePositionBias(nn.Module):
    """Learned bias table over relative offsets inside a window.

    One instance can be shared by several attention layers of the same level.
    """

    def __init__(self, window: int, heads: int):
        super().__init__()
        self.window = window
        self.heads = heads
        self.table = nn.Parameter(torch.zeros((2 * window - 1) ** 2, heads))
        nn.init.trunc_normal_(self.table, std=0.02)
        coords = torch.stack(torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij")).flatten(1)
        rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (window - 1)
        self.register_buffer("index", rel[..., 0] * (2 * window - 1) + rel[..., 1], persistent=False)

    def forward(self, ws: int):
        # bias (heads, N, N) for an effective window ws <= self.window
        if ws == self.window:
            idx = self.index
        else:
            coords = torch.stack(torch.meshgrid(torch.arange(ws), torch.arange(ws), indexing="ij")).flatten(1)
            rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (self.window - 1)
            idx = rel[..., 0] * (2 * self.window - 1) + rel[..., 1]
        n = ws * ws
        return self.table[idx.reshape(-1)].view(n, n, self.heads).permute(2, 0, 1)


def _windowed_attention(q, k, v, ws, shift, bias, h, w, return_attn=False):
    """q, k, v: (B, heads, H, W, d). Returns (B, heads, H, W, d)."""
    b, nh, _, _, d = q.shape
    if shift:
        s = ws // 2
        q, k, v = (torch.roll(t, shifts=(-s, -s), dims=(2, 3)) for t in (q, k, v))

    def part(t):
        t = t.permute(0, 2, 3, 1, 4).reshape(b, h, w, nh * d)
        t = window_partition(t, ws)
        return t.view(t.shape[0], ws * ws, nh, d).transpose(1, 2)

    qw, kw, vw = part(q), part(k), part(v)
    logits = (qw * d**-0.5) @ kw.transpose(-2, -1) + bias.unsqueeze(0)
    if shift:
        mask = shift_mask(h, w, ws, ws // 2, device=q.device).to(logits.dtype)
        n_win = mask.shape[0]
        logits = logits.view(-1, n_win, nh, ws * ws, ws * ws) + mask[None, :, None]
        logits = logits.view(-1, nh, ws * ws, ws * ws)
    attn = logits.softmax(dim=-1)
    out = (attn @ vw).transpose(1, 2).reshape(-1, ws * ws, nh * d)
    out = window_reverse(out, ws, h, w).view(b, h, w, nh, d).permute(0, 3, 1, 2, 4)
    if shift:
        s = ws // 2
        out = torch.roll(out, shifts=(s, s), dims=(2, 3))
    return (out, attn) if return_attn else out


class WindowAttention(nn.Module):
    """Multi-head self-attention inside (optionally cyclically shifted) windows."""

    def __init__(self, dim: int, heads: int, window: int, shift: bool = False,
                 bias: RelativePositionBias | None = None):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"dim {dim} not divisible by {heads} heads")
        self.dim, self.heads, self.window, self.shift = dim, heads, window, shift
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.rpb = bias if bias is not None else RelativePositionBias(window, heads)

    def qkv_heads(self, x):
        # x: (B, H, W, C) -> three (B, heads, H, W, d)
        b, h, w, c = x.shape
        qkv = self.qkv(x).view(b, h, w, 3, self.heads, c // self.heads)
        return qkv.permute(3, 0, 4, 1, 2, 5).unbind(0)

    def forward(self, x, return_attn: bool = False):
        b, c, h, w = x.shape
        if h != w:
            raise ShapeError(f"window attention needs square maps, got {h}x{w}")
        ws, can_shift = effective_window(h, self.window)
        q, k, v = self.qkv_heads(x.permute(0, 2, 3, 1))
        res = _windowed_attention(q, k, v, ws, self.shift and can_shift, self.rpb(ws), h, w, return_attn)
        out, attn = res if return_attn else (res, None)
        out = self.proj(out.permute(0, 2, 3, 1, 4).reshape(b, h, w, c)).permute(0, 3, 1, 2)
        return (out, attn) if return_attn else out


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: float = 2.0):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class SwinLayer(nn.Module):
    def __init__(self, dim, heads, window, shift, mlp_ratio=2.0, bias=None):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window, shift, bias)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x):
        y = self.attn(self.norm1(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2))
        x = x + y
        t = x.permute(0, 2, 3, 1)
        t = t + self.mlp(self.norm2(t))
        return t.permute(0, 3, 1, 2)


class RSTB(nn.Module):
    """Two Swin layers (plain then shifted windows), a 3x3 conv and an identity shortcut."""

    def __init__(self, dim, heads, window, depth=2, mlp_ratio=2.0, zero_init=False):
        super().__init__()
        self.rpb = RelativePositionBias(window, heads)
        self.layers = nn.ModuleList(
            SwinLayer(dim, heads, window, shift=bool(i % 2), mlp_ratio=mlp_ratio, bias=self.rpb)
            for i in range(depth)
        )
        self.conv = nn.Conv2d(dim, dim, 3, 1, 1)
        if zero_init:
            nn.init.zeros_(self.conv.weight)
            nn.init.zeros_(self.conv.bias)

    def forward(self, x):
        y = x
        for layer in self.layers:
            y = layer(y)
        return self.conv(y) + x


class PatchMerge(nn.Module):
    """Fold each 2x2 neighbourhood into channels, then project linearly.

    Neighbour order in the 4C concatenation: top-left, bottom-left, top-right,
    bottom-right.
    """

    def __init__(self, dim: int, out_dim: int | None = None):
        super().__init__()
        self.dim = dim
        self.out_dim = out_dim or 2 * dim
        self.reduction = nn.Linear(4 * dim, self.out_dim, bias=False)

    def forward(self, x):
        b, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"patch merging needs even edges, got {h}x{w}")
        parts = [x[:, :, 0::2, 0::2], x[:, :, 1::2, 0::2], x[:, :, 0::2, 1::2], x[:, :, 1::2, 1::2]]
        t = torch.cat(parts, dim=1).permute(0, 2, 3, 1)
        return self.reduction(t).permute(0, 3, 1, 2)


class ModulatedNorm(nn.Module):
    """LayerNorm whose per-channel scale and shift come from a latent vector."""

    def __init__(self, dim: int, latent_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False)
        self.affine = EqualLinear(latent_dim, 2 * dim)

    def forward(self, t, w):
        # t: (B, H, W, C); w: (B, latent_dim)
        gamma, beta = self.affine(w).chunk(2, dim=-1)
        return self.norm(t) * (1 + gamma[:, None, None, :]) + beta[:, None, None, :]


class SplitWindowAttention(WindowAttention):
    """Half of the heads attend in regular windows, the other half in shifted ones."""

    def __init__(self, dim, heads, window, bias=None):
        if heads % 2:
            raise ShapeError(f"split attention needs an even head count, got {heads}")
        super().__init__(dim, heads, window, shift=False, bias=bias)

    def forward(self, x, return_attn: bool = False):
        b, c, h, w = x.shape
        ws, can_shift = effective_window(h, self.window)
        q, k, v = self.qkv_heads(x.permute(0, 2, 3, 1))
        g = self.heads // 2
        bias = self.rpb(ws)
        plain = _windowed_attention(q[:, :g], k[:, :g], v[:, :g], ws, False, bias[:g], h, w)
        shifted = _windowed_attention(q[:, g:], k[:, g:], v[:, g:], ws, can_shift, bias[g:], h, w)
        out = torch.cat([plain, shifted], dim=1)
        return self.proj(out.permute(0, 2, 3, 1, 4).reshape(b, h, w, c)).permute(0, 3, 1, 2)


class StyleSwinLayer(nn.Module):
    def __init__(self, dim, latent_dim, heads, window, mlp_ratio=2.0, bias=None):
        super().__init__()
        self.norm1 = ModulatedNorm(dim, latent_dim)
        self.attn = SplitWindowAttention(dim, heads, window, bias)
        self.norm2 = ModulatedNorm(dim, latent_dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x, w):
        t = x.permute(0, 2, 3, 1)
        t = t + self.attn(self.norm1(t, w).permute(0, 3, 1, 2)).permute(0, 2, 3, 1)
        t = t + self.mlp(self.norm2(t, w))
        return t.permute(0, 3, 1, 2)


class StyleLayer(nn.Module):
    """Latent-modulated transformer layers followed by bilinear 2x upsampling.

    ``w`` is either one latent ``(B, L)`` shared by all sub-layers or one per
    sub-layer ``(B, depth, L)``. With ``upsample=False`` (final level) the
    edge is kept. ``out_dim`` projects channels after upsampling.
    """

    def __init__(self, dim, latent_dim, heads, window, depth=2, upsample=True,
                 out_dim=None, mlp_ratio=2.0):
        super().__init__()
        self.dim, self.latent_dim, self.depth = dim, latent_dim, depth
        self.upsample = upsample
        self.rpb = RelativePositionBias(window, heads)
        self.layers = nn.ModuleList(
            StyleSwinLayer(dim, latent_dim, heads, window, mlp_ratio, self.rpb) for _ in range(depth)
        )
        out_dim = out_dim or dim
        self.proj = nn.Conv2d(dim, out_dim, 1) if out_dim != dim else None

    def _latents(self, w):
        if w.shape[-1] != self.latent_dim:
            raise ShapeError(f"latent dim {w.shape[-1]} != {self.latent_dim}")
        if w.dim() == 2:
            return [w] * self.depth
        if w.shape[1] != self.depth:
            raise ShapeError(f"expected {self.depth} latents per layer, got {w.shape[1]}")
        return list(w.unbind(1))

    def body(self, x, w):
        for layer, wi in zip(self.layers, self._latents(w)):
            x = layer(x, wi)
        return x

    def up(self, x):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        if self.proj is not None:
            x = self.proj(x)
        return x

    def forward(self, x, w):
        return self.up(self.body(x, w))


class CWSS(nn.Module):
    """Channel-wise scale and shift of half the decoder channels by encoder features.

    ``alpha, beta = conv3x3(f_enc)``; output is
    ``cat[f_dec[:C/2], alpha * f_dec[C/2:] + beta]``. Initialised at
    alpha = 1, beta = 0 with small weights.
    """

    def __init__(self, dec_channels: int, enc_channels: int):
        super().__init__()
        if dec_channels % 2:
            raise ShapeError(f"CWSS needs an even decoder channel count, got {dec_channels}")
        self.half = dec_channels // 2
        self.conv = nn.Conv2d(enc_channels, 2 * self.half, 3, 1, 1)
        with torch.no_grad():
            self.conv.weight.mul_(0.1)
            self.conv.bias.zero_()
            self.conv.bias[: self.half] = 1.0

    def scale_shift(self, f_enc):
        return self.conv(f_enc).split(self.half, dim=1)

    def forward(self, f_dec, f_enc):
        if f_dec.shape[-2:] != f_enc.shape[-2:]:
            raise ShapeError(f"spatial mismatch {tuple(f_dec.shape[-2:])} vs {tuple(f_enc.shape[-2:])}")
        if f_dec.shape[1] != 2 * self.half:
            raise ShapeError(f"expected {2 * self.half} decoder channels, got {f_dec.shape[1]}")
        alpha, beta = self.scale_shift(f_enc)
        keep, mod = f_dec[:, : self.half], f_dec[:, self.half:]
        return torch.cat([keep, alpha * mod + beta], dim=1)
