"""The full restoration network: shallow features, Swin encoder, style decoder, HR head."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from torch import nn

from .blocks import CWSS, EqualLinear, RSTB, PatchMerge, ResidualConvBlock, ShapeError, StyleLayer
from .volume import AXES, PLANES, Volume, crop, pad_to, upsample_to_hr


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 256
    embed_dim: int = 32
    max_channels: int = 256
    latent_dim: int = 512
    window: int = 8
    heads: int = 4
    n_levels: int = 6  # number of patch merges / upsamplings
    depth: int = 2
    mlp_ratio: float = 2.0
    mapping_layers: int = 4

    def __post_init__(self):
        if self.image_size % (2**self.n_levels):
            raise ShapeError(f"image size {self.image_size} not divisible by 2^{self.n_levels}")
        for edge, ch in zip(self.edges, self.channels):
            if edge > self.window and edge % self.window:
                raise ShapeError(f"edge {edge} not divisible by window {self.window}")
            if ch % self.heads or ch % 2:
                raise ShapeError(f"{ch} channels incompatible with {self.heads} heads")
        if self.heads % 2:
            raise ShapeError("heads must be even so style layers can split them")

    @property
    def edges(self) -> list[int]:
        return [self.image_size // 2**l for l in range(self.n_levels + 1)]

    @property
    def channels(self) -> list[int]:
        return [min(self.embed_dim * 2**l, self.max_channels) for l in range(self.n_levels + 1)]

    @property
    def n_style_blocks(self) -> int:
        return (self.n_levels + 1) * self.depth

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


PROFILES = {
    "full": ModelConfig(),
    "toy": ModelConfig(image_size=64, embed_dim=16, latent_dim=64, window=4, heads=2,
                       n_levels=3, mapping_layers=2),
}


def get_profile(name: str) -> ModelConfig:
    try:
        return PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown profile {name!r}; expected one of {sorted(PROFILES)}") from None


@dataclass(frozen=True)
class AblationFlags:
    use_gp: bool = True
    use_sdt: bool = True
    use_mref: bool = True
    use_sc: bool = True

    @classmethod
    def all_combinations(cls):
        return [cls(*(bool(i >> b & 1) for b in range(4))) for i in range(16)]


class ShallowExtractor(nn.Module):
    def __init__(self, channels: int, n_blocks: int = 2):
        super().__init__()
        self.head = nn.Conv2d(1, channels, 3, 1, 1)
        self.blocks = nn.Sequential(*(ResidualConvBlock(channels) for _ in range(n_blocks)))

    def forward(self, x):
        return self.blocks(self.head(x))


class Encoder(nn.Module):
    """RSTB + patch merge per level; returns the pre-merge pyramid plus the top map."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ch = cfg.channels
        self.rstbs = nn.ModuleList(
            RSTB(ch[l], cfg.heads, cfg.window, cfg.depth, cfg.mlp_ratio) for l in range(cfg.n_levels)
        )
        self.merges = nn.ModuleList(PatchMerge(ch[l], ch[l + 1]) for l in range(cfg.n_levels))

    def forward(self, f_s):
        pyramid = []
        x = f_s
        for rstb, merge in zip(self.rstbs, self.merges):
            x = rstb(x)
            pyramid.append(x)
            x = merge(x)
        pyramid.append(x)
        return pyramid, x


class LatentProjection(nn.Module):
    """One linear layer from the flattened top map to a distinct latent per style block."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_blocks, self.latent_dim = cfg.n_style_blocks, cfg.latent_dim
        top = cfg.channels[-1] * cfg.edges[-1] ** 2
        self.fc = EqualLinear(top, self.n_blocks * self.latent_dim)

    def forward(self, top):
        return self.fc(top.flatten(1)).view(-1, self.n_blocks, self.latent_dim)


class Decoder(nn.Module):
    """Style decoder starting from a learned constant at the coarsest level.

    Level ``l`` runs its style layers, optionally modulates with the encoder
    feature of the same level (CWSS), then upsamples toward level ``l - 1``.
    """

    def __init__(self, cfg: ModelConfig, use_mref: bool = False):
        super().__init__()
        self.cfg = cfg
        ch, n = cfg.channels, cfg.n_levels
        self.const = nn.Parameter(torch.randn(1, ch[n], cfg.edges[n], cfg.edges[n]))
        # levels ordered coarse -> fine: index i handles level n - i
        self.layers = nn.ModuleList(
            StyleLayer(ch[l], cfg.latent_dim, cfg.heads, cfg.window, cfg.depth,
                       upsample=l > 0, out_dim=ch[max(l - 1, 0)], mlp_ratio=cfg.mlp_ratio)
            for l in range(n, -1, -1)
        )
        self.cwss = nn.ModuleList(CWSS(ch[l], ch[l]) for l in range(n, -1, -1)) if use_mref else None

    def forward(self, latents, pyramid=None):
        cfg = self.cfg
        if latents.shape[1] != cfg.n_style_blocks:
            raise ShapeError(f"expected {cfg.n_style_blocks} latents, got {latents.shape[1]}")
        if self.cwss is not None:
            if pyramid is None or len(pyramid) != cfg.n_levels + 1:
                raise ShapeError("decoder with feature injection needs a full encoder pyramid")
        x = self.const.expand(latents.shape[0], -1, -1, -1)
        for i, layer in enumerate(self.layers):
            level = cfg.n_levels - i
            x = layer.body(x, latents[:, i * cfg.depth:(i + 1) * cfg.depth])
            if self.cwss is not None:
                x = self.cwss[i](x, pyramid[level])
            x = layer.up(x)
        return x

    def prior_state_dict(self):
        return {k: v for k, v in self.state_dict().items() if not k.startswith("cwss.")}


class ReconstructionHead(nn.Module):
    def __init__(self, channels: int, n_blocks: int = 2):
        super().__init__()
        self.blocks = nn.Sequential(*(ResidualConvBlock(channels) for _ in range(n_blocks)))
        self.out = nn.Conv2d(channels, 1, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x):
        return self.out(self.blocks(x))


class TransMRSRNet(nn.Module):
    def __init__(self, cfg: ModelConfig, flags: AblationFlags = AblationFlags(), phi: float = 0.7,
                 n_centroids: int = 8):
        super().__init__()
        self.cfg, self.flags, self.phi = cfg, flags, phi
        self.shallow = ShallowExtractor(cfg.embed_dim)
        self.encoder = Encoder(cfg)
        self.latent = LatentProjection(cfg)
        self.decoder = Decoder(cfg, use_mref=flags.use_mref)
        self.head = ReconstructionHead(cfg.embed_dim)
        if flags.use_sdt:
            self.register_buffer("centroids", torch.zeros(n_centroids, cfg.latent_dim))

    def set_centroids(self, centers):
        if not self.flags.use_sdt:
            raise ValueError("model was built without truncation")
        centers = torch.as_tensor(np.asarray(centers), dtype=self.centroids.dtype)
        if centers.shape[-1] != self.cfg.latent_dim:
            raise ShapeError(f"centroid dim {centers.shape[-1]} != latent dim {self.cfg.latent_dim}")
        self.centroids = centers.clone()

    def load_prior(self, generator):
        """Initialise the decoder from a pretrained generator's decoder."""
        missing, unexpected = self.decoder.load_state_dict(generator.decoder.prior_state_dict(), strict=False)
        bad = [k for k in missing if not k.startswith("cwss.")]
        if bad or unexpected:
            raise ShapeError(f"prior does not match decoder: missing {bad}, unexpected {unexpected}")

    def shallow_extract(self, i_lr):
        if i_lr.dim() != 4 or i_lr.shape[1] != 1 or i_lr.shape[-1] != self.cfg.image_size \
                or i_lr.shape[-2] != self.cfg.image_size:
            s = self.cfg.image_size
            raise ShapeError(f"expected input (B, 1, {s}, {s}), got {tuple(i_lr.shape)}")
        return self.shallow(i_lr)

    def encode(self, f_s):
        return self.encoder(f_s)

    def project_latents(self, top):
        return self.latent(top)

    def truncate(self, latents):
        from .prior import truncate_torch
        return truncate_torch(latents, self.centroids, self.phi)

    def decode(self, latents, pyramid):
        return self.decoder(latents, pyramid if self.flags.use_mref else None)

    def forward(self, i_lr):
        """Returns ``(i_sr, i_res)``; ``i_res`` is ``None`` without the skip connection."""
        f_s = self.shallow_extract(i_lr)
        pyramid, top = self.encode(f_s)
        latents = self.project_latents(top)
        if self.flags.use_sdt:
            latents = self.truncate(latents)
        f_d = self.decode(latents, pyramid)
        if self.flags.use_sc:
            i_res = self.head(f_s + f_d)
            return i_lr + i_res, i_res
        return self.head(f_d), None

    @torch.no_grad()
    def predict(self, i_lr, batch_size: int = 8):
        """Inference on a (B, 1, H, W) tensor; output clamped to [0, 1]."""
        was_training = self.training
        self.eval()
        try:
            outs = [self(i_lr[i:i + batch_size])[0] for i in range(0, len(i_lr), batch_size)]
        finally:
            self.train(was_training)
        return torch.cat(outs).clamp(0.0, 1.0)

    def describe(self):
        return {"model_config": asdict(self.cfg), "flags": asdict(self.flags), "phi": self.phi}


def restore_volume(v_lr: Volume, r: int, axis, model: TransMRSRNet, plane: str = "x-z",
                   target_len: int | None = None, batch_size: int = 8) -> Volume:
    """Interpolate to the HR grid, restore every slice of ``plane`` and reassemble."""
    if isinstance(axis, int):
        axis = "xyz"[axis]
    if plane not in PLANES:
        raise ValueError(f"unknown plane {plane!r}")
    if axis == PLANES[plane]:
        raise ValueError(f"plane {plane} does not contain the degraded axis {axis}")
    interp = upsample_to_hr(v_lr, r, axis, target_len)
    slice_axis = AXES[PLANES[plane]]
    data = np.moveaxis(interp.data, slice_axis, 0)
    size = model.cfg.image_size
    out = np.zeros_like(data)
    informative = [i for i in range(data.shape[0]) if data[i].max() > 0]
    boxes, batch = [], []
    for i in informative:
        padded, box = pad_to(data[i], size)
        boxes.append(box)
        batch.append(padded)
    if batch:
        x = torch.from_numpy(np.stack(batch)[:, None]).to(next(model.parameters()).dtype)
        sr = model.predict(x, batch_size=batch_size).numpy()[:, 0]
        for i, box, img in zip(informative, boxes, sr):
            out[i] = crop(img, box)
    return Volume(np.moveaxis(out, 0, slice_axis), interp.spacing)
