"""Training objectives and evaluation metrics."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.ndimage import correlate1d
from torch import nn
from torch.nn import functional as F

# VGG19 convolution widths up to conv4_2; "M" is a 2x2 max-pool
VGG19_PREFIX = [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M", 512, 512]
TAPS = (2, 4, 7, 10)  # 1-based conv indices, taken after ReLU


@dataclass(frozen=True)
class LossWeights:
    recon: float = 1.0
    content: float = 0.5
    style: float = 0.5

    def __post_init__(self):
        if min(self.recon, self.content, self.style) < 0:
            raise ValueError("loss weights must be non-negative")


class PerceptualBackbone(nn.Module):
    """Frozen VGG19-shaped conv stack exposing four tap points.

    Without imported weights the convs get a fixed seeded Kaiming init.
    ``width`` scales every layer's channel count.
    """

    def __init__(self, width: float = 1.0, seed: int = 0, taps=TAPS, in_channels: int = 1):
        super().__init__()
        self.taps = tuple(taps)
        self.width = width
        gen = torch.Generator().manual_seed(seed)
        layers, ch, n_conv = [], in_channels, 0
        self.tap_layers = []
        for v in VGG19_PREFIX:
            if v == "M":
                layers.append(nn.MaxPool2d(2, 2))
                continue
            out = max(1, int(round(v * width)))
            conv = nn.Conv2d(ch, out, 3, 1, 1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / (ch * 9)))
                conv.bias.zero_()
            layers += [conv, nn.ReLU()]
            n_conv += 1
            if n_conv in self.taps:
                self.tap_layers.append(len(layers) - 1)
            ch = out
            if n_conv == max(self.taps):
                break
        self.features = nn.Sequential(*layers)
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # never leaves eval mode
        return super().train(False)

    def load_vgg19(self, state_dict):
        """Import torchvision-style ``features.N.weight`` tensors (RGB filters summed to grey)."""
        if self.width != 1.0:
            raise ValueError("pretrained VGG19 weights need width=1.0")
        with torch.no_grad():
            for i, layer in enumerate(self.features):
                if isinstance(layer, nn.Conv2d):
                    w = state_dict[f"features.{i}.weight"]
                    if w.shape[1] != layer.weight.shape[1]:
                        w = w.sum(1, keepdim=True)
                    layer.weight.copy_(w)
                    layer.bias.copy_(state_dict[f"features.{i}.bias"])
        return self

    def forward(self, x):
        outs = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in self.tap_layers:
                outs.append(x)
        return outs


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def rec_loss(sr, hr):
    _check_shapes(sr, hr)
    return (sr - hr).abs().mean()


def content_loss(sr, hr, backbone, feats=None):
    _check_shapes(sr, hr)
    fs, fh = feats if feats is not None else (backbone(sr), backbone(hr))
    return sum(F.mse_loss(a, b) for a, b in zip(fs, fh))


def gram(f, normalize: bool = True):
    """Gram matrix ``F F^T`` of a ``(C, H, W)`` map or a batch ``(B, C, H, W)``."""
    batched = f.dim() == 4
    if not batched:
        f = f.unsqueeze(0)
    b, c, h, w = f.shape
    flat = f.reshape(b, c, h * w)
    g = flat @ flat.transpose(1, 2)
    if normalize:
        g = g / (h * w)
    return g if batched else g[0]


def style_loss(sr, hr, backbone, normalize: bool = True, feats=None):
    _check_shapes(sr, hr)
    fs, fh = feats if feats is not None else (backbone(sr), backbone(hr))
    return sum(F.mse_loss(gram(a, normalize), gram(b, normalize)) for a, b in zip(fs, fh))


def total_loss(sr, hr, backbone, weights: LossWeights = LossWeights(), normalize_gram: bool = True):
    """Weighted sum of the three terms plus a float breakdown for logging."""
    rec = rec_loss(sr, hr)
    total = weights.recon * rec
    parts = {"rec": rec}
    if weights.content or weights.style:
        feats = (backbone(sr), backbone(hr))
        if weights.content:
            parts["content"] = content_loss(sr, hr, backbone, feats=feats)
            total = total + weights.content * parts["content"]
        if weights.style:
            parts["style"] = style_loss(sr, hr, backbone, normalize_gram, feats=feats)
            total = total + weights.style * parts["style"]
    return total, {k: float(v.detach()) for k, v in parts.items()}


# --- metrics ------------------------------------------------------------------

PSNR_CAP = 100.0


def psnr(sr, hr, data_range: float = 1.0) -> float:
    sr, hr = np.asarray(sr, dtype=np.float64), np.asarray(hr, dtype=np.float64)
    _check_shapes(sr, hr)
    mse = float(np.mean((sr - hr) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range**2 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def ssim_map(sr, hr, size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
             data_range: float = 1.0) -> np.ndarray:
    """Local SSIM at every position where the window fits entirely inside the image."""
    x, y = np.asarray(sr, dtype=np.float64), np.asarray(hr, dtype=np.float64)
    _check_shapes(x, y)
    if x.ndim != 2 or min(x.shape) < size:
        raise ValueError(f"SSIM needs a 2-D image of at least {size}x{size}, got {x.shape}")
    g = gaussian_window(size, sigma)
    pad = size // 2

    def filt(a):
        a = correlate1d(a, g, axis=0, mode="constant")
        a = correlate1d(a, g, axis=1, mode="constant")
        return a[pad:a.shape[0] - pad, pad:a.shape[1] - pad]

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx**2 + my**2 + c1) * (sxx + syy + c2))


def ssim(sr, hr, **kw) -> float:
    return float(ssim_map(sr, hr, **kw).mean())


def dice(x, y) -> float:
    x, y = np.asarray(x, dtype=bool), np.asarray(y, dtype=bool)
    _check_shapes(x, y)
    denom = int(x.sum()) + int(y.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(x, y).sum()) / denom


# label convention of the tissue masks
TISSUE_LABELS = {"csf": 1, "g": 2, "w": 3}
CSV_COLUMNS = ["volume_id", "plane", "scale", "psnr", "ssim", "dice_w", "dice_g", "dice_csf", "dice_avg"]


def tissue_dice(seg_a, seg_b) -> dict:
    scores = {f"dice_{k}": dice(np.asarray(seg_a) == v, np.asarray(seg_b) == v)
              for k, v in TISSUE_LABELS.items()}
    scores["dice_avg"] = float(np.mean(list(scores.values())))
    return scores


def write_metrics_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in CSV_COLUMNS})
