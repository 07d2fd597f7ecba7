"""Stage-one generative prior, latent clustering and self-distilled truncation."""
from __future__ import annotations

import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .blocks import EqualLinear
from .model import Decoder, ModelConfig

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


class MappingNetwork(nn.Module):
    def __init__(self, latent_dim: int, n_layers: int = 4):
        super().__init__()
        layers = []
        for _ in range(n_layers):
            layers += [EqualLinear(latent_dim, latent_dim, lr_mul=0.01), nn.LeakyReLU(0.2)]
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        z = z * torch.rsqrt(z.pow(2).mean(dim=1, keepdim=True) + 1e-8)
        return self.net(z)


class Generator(nn.Module):
    """Mapping head + style decoder (no encoder injection) + 1x1 image head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.mapping = MappingNetwork(cfg.latent_dim, cfg.mapping_layers)
        self.decoder = Decoder(cfg, use_mref=False)
        self.to_img = nn.Conv2d(cfg.channels[0], 1, 1)

    def map(self, z):
        return self.mapping(z)

    def synthesize(self, w):
        ws = w.unsqueeze(1).expand(-1, self.cfg.n_style_blocks, -1)
        return self.to_img(self.decoder(ws))

    def forward(self, z):
        if z.shape[-1] != self.cfg.latent_dim:
            raise ValueError(f"latent dim {z.shape[-1]} != {self.cfg.latent_dim}")
        return self.synthesize(self.map(z))


class Discriminator(nn.Module):
    def __init__(self, image_size: int, base: int = 16, max_ch: int = 128):
        super().__init__()
        layers, ch, edge = [nn.Conv2d(1, base, 3, 1, 1), nn.LeakyReLU(0.2)], base, image_size
        while edge > 4:
            out = min(ch * 2, max_ch)
            layers += [nn.Conv2d(ch, out, 4, 2, 1), nn.LeakyReLU(0.2)]
            ch, edge = out, edge // 2
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(ch * 16, 1)

    def forward(self, x):
        return self.fc(self.features(x).flatten(1))


@dataclass
class PretrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 2e-3
    betas: tuple[float, float] = (0.0, 0.99)
    r1_weight: float = 10.0
    r1_every: int = 16
    sample_every: int = 500
    seed: int = 0


@dataclass
class GanState:
    generator: Generator
    discriminator: Discriminator
    step: int = 0
    seed: int = 0
    history: list = field(default_factory=list)

    def save(self, path):
        torch.save({
            "model_config": asdict(self.generator.cfg),
            "generator": self.generator.state_dict(),
            "discriminator": self.discriminator.state_dict(),
            "step": self.step,
            "seed": self.seed,
            "history": self.history,
        }, path)

    @classmethod
    def load(cls, path):
        blob = torch.load(path, map_location="cpu", weights_only=False)
        if "generator" not in blob:
            raise ValueError(f"{path} is not a generator checkpoint")
        cfg = ModelConfig.from_dict(blob["model_config"])
        g, d = Generator(cfg), Discriminator(cfg.image_size)
        g.load_state_dict(blob["generator"])
        d.load_state_dict(blob["discriminator"])
        return cls(g, d, blob["step"], blob["seed"], blob.get("history", []))


def new_gan(cfg: ModelConfig, seed: int = 0) -> GanState:
    torch.manual_seed(seed)
    return GanState(Generator(cfg), Discriminator(cfg.image_size), 0, seed)


def sample_latent(rng: np.random.Generator, latent_dim: int, n: int | None = None) -> np.ndarray:
    shape = (latent_dim,) if n is None else (n, latent_dim)
    return rng.standard_normal(shape)


@torch.no_grad()
def generate(z, gan: GanState) -> np.ndarray:
    """Images for one latent ``(L,)`` or a batch ``(B, L)``."""
    g = gan.generator
    zt = torch.as_tensor(np.asarray(z), dtype=torch.float32)
    single = zt.dim() == 1
    if single:
        zt = zt[None]
    was = g.training
    g.eval()
    img = g(zt)[:, 0].numpy()
    g.train(was)
    return img[0] if single else img


def _check_finite(*tensors, where=""):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise DivergenceError(f"non-finite value {where}")


def pretrain(images: np.ndarray, cfg: ModelConfig, pcfg: PretrainConfig = PretrainConfig(),
             state: GanState | None = None, sample_dir=None) -> GanState:
    """Adversarial pretraining of the generator on HR slices ``(N, H, W)``.

    Non-saturating logistic loss with a lazy R1 penalty on real images.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 3 or len(images) == 0:
        raise ValueError(f"need a non-empty (N, H, W) image stack, got {images.shape}")
    if images.shape[1:] != (cfg.image_size, cfg.image_size):
        raise ValueError(f"images are {images.shape[1:]}, generator makes {cfg.image_size}")
    state = state or new_gan(cfg, pcfg.seed)
    g, d = state.generator, state.discriminator
    opt_g = torch.optim.Adam(g.parameters(), lr=pcfg.lr, betas=pcfg.betas)
    opt_d = torch.optim.Adam(d.parameters(), lr=pcfg.lr, betas=pcfg.betas)
    data = torch.from_numpy(images[:, None])
    rng = np.random.default_rng([pcfg.seed, 1])
    torch.manual_seed(pcfg.seed)
    g.train()
    d.train()
    for _ in range(pcfg.steps):
        step = state.step
        idx = rng.integers(0, len(data), pcfg.batch_size)
        real = data[idx]
        z = torch.from_numpy(sample_latent(rng, cfg.latent_dim, pcfg.batch_size)).float()

        fake = g(z)
        d_loss = F.softplus(d(fake.detach())).mean() + F.softplus(-d(real)).mean()
        opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        opt_d.step()

        r1 = torch.zeros(())
        if pcfg.r1_every and step % pcfg.r1_every == 0:
            real_r = real.clone().requires_grad_(True)
            (grad,) = torch.autograd.grad(d(real_r).sum(), real_r, create_graph=True)
            r1 = grad.pow(2).flatten(1).sum(1).mean()
            opt_d.zero_grad(set_to_none=True)
            (0.5 * pcfg.r1_weight * pcfg.r1_every * r1).backward()
            opt_d.step()

        g_loss = F.softplus(-d(g(z))).mean()
        opt_g.zero_grad(set_to_none=True)
        g_loss.backward()
        opt_g.step()

        _check_finite(d_loss, g_loss, r1, where=f"in GAN losses at step {step}")
        state.step += 1
        state.history.append((d_loss.item(), g_loss.item()))
        if sample_dir is not None and pcfg.sample_every and state.step % pcfg.sample_every == 0:
            _save_grid(g, cfg, Path(sample_dir) / f"samples_{state.step:06d}.pgm")
    for p in list(g.parameters()) + list(d.parameters()):
        _check_finite(p, where="in parameters after pretraining")
    return state


def _save_grid(g: Generator, cfg: ModelConfig, path, n: int = 4):
    from .volume import write_pgm
    path.parent.mkdir(parents=True, exist_ok=True)
    z = torch.from_numpy(sample_latent(np.random.default_rng(1234), cfg.latent_dim, n * n)).float()
    with torch.no_grad():
        imgs = g(z)[:, 0].numpy()
    s = cfg.image_size
    grid = imgs.reshape(n, n, s, s).transpose(0, 2, 1, 3).reshape(n * s, n * s)
    write_pgm(grid, path)
    log.info("wrote sample grid %s", path)


# --- clustering ---------------------------------------------------------------

def _sq_dists(x, centers):
    return ((x[:, None, :] - centers[None, :, :]) ** 2).sum(-1)


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = _sq_dists(x, np.array(centers))[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(len(x))
        else:
            idx = rng.choice(len(x), p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, _sq_dists(x, x[idx:idx + 1])[:, 0])
    return np.array(centers)


def kmeans(x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 100,
           tol: float = 1e-6, init: np.ndarray | None = None):
    """Lloyd's algorithm with k-means++ seeding.

    Returns ``(centers, labels, sse_trace)``; ``sse_trace[i]`` is the
    within-cluster SSE after the i-th assignment step. Stops when the
    relative SSE decrease falls below ``tol``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if not 1 <= k <= len(x):
        raise ValueError(f"need 1 <= k <= n_samples, got k={k}, n={len(x)}")
    centers = kmeans_plusplus(x, k, rng) if init is None else np.array(init, dtype=np.float64)
    trace = []
    labels = None
    for _ in range(max_iter):
        d2 = _sq_dists(x, centers)
        labels = d2.argmin(1)
        sse = float(d2[np.arange(len(x)), labels].sum())
        trace.append(sse)
        new = centers.copy()
        for j in range(k):
            members = x[labels == j]
            if len(members):
                new[j] = members.mean(0)
            else:
                # empty cluster: move it to the worst-served point
                new[j] = x[d2[np.arange(len(x)), labels].argmax()]
        centers = new
        if len(trace) > 1 and trace[-2] - trace[-1] <= tol * max(trace[-2], 1e-300):
            break
    d2 = _sq_dists(x, centers)
    labels = d2.argmin(1)
    trace.append(float(d2[np.arange(len(x)), labels].sum()))
    return centers, labels, trace


BANK_MAGIC = b"TMCB1"
_BANK_HEADER = struct.Struct("<5sII")


@dataclass
class CentroidBank:
    centers: np.ndarray
    sample_count: int = 0

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float32)
        if self.centers.ndim != 2 or len(self.centers) < 1:
            raise ValueError(f"centroid bank needs (N >= 1, D) centers, got {self.centers.shape}")
        if not np.isfinite(self.centers).all():
            raise ValueError("centroid bank contains non-finite values")

    @property
    def n_clusters(self):
        return self.centers.shape[0]

    @property
    def latent_dim(self):
        return self.centers.shape[1]

    def save(self, path):
        n, dim = self.centers.shape
        with open(path, "wb") as fh:
            fh.write(_BANK_HEADER.pack(BANK_MAGIC, n, dim))
            fh.write(self.centers.astype("<f4").tobytes())

    @classmethod
    def load(cls, path):
        raw = Path(path).read_bytes()
        if raw[:5] != BANK_MAGIC:
            raise ValueError(f"{path}: not a TMCB1 centroid bank")
        if len(raw) < _BANK_HEADER.size:
            raise ValueError(f"{path}: truncated header")
        _, n, dim = _BANK_HEADER.unpack_from(raw)
        payload = raw[_BANK_HEADER.size:]
        if len(payload) != 4 * n * dim:
            raise ValueError(f"{path}: payload of {len(payload)} bytes does not match {n}x{dim}")
        return cls(np.frombuffer(payload, dtype="<f4").reshape(n, dim).copy())

    def __eq__(self, other):
        return isinstance(other, CentroidBank) and np.array_equal(self.centers, other.centers)


@torch.no_grad()
def mapped_latents(gan: GanState, m: int, rng: np.random.Generator, chunk: int = 4096) -> np.ndarray:
    g = gan.generator
    out = []
    for start in range(0, m, chunk):
        z = torch.from_numpy(sample_latent(rng, g.cfg.latent_dim, min(chunk, m - start))).float()
        out.append(g.map(z).numpy())
    return np.concatenate(out)


def build_centroid_bank(gan: GanState | None, m: int = 60000, n: int = 8,
                        rng: np.random.Generator | None = None, latents=None, **kmeans_kw) -> CentroidBank:
    """Cluster ``m`` mapped latents into ``n`` centers (done once after pretraining).

    ``latents`` bypasses sampling: those rows are clustered as given and ``m``
    becomes their count.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    if latents is not None:
        w = np.asarray(latents, dtype=np.float64)
        w = w[:, None] if w.ndim == 1 else w
        m = len(w)
    if m < n or n < 1:
        raise ValueError(f"need m >= n >= 1, got m={m}, n={n}")
    if latents is None:
        if gan is None:
            raise ValueError("need a generator or explicit latents")
        w = mapped_latents(gan, m, rng)
    centers, _, _ = kmeans(w, n, rng, **kmeans_kw)
    return CentroidBank(centers, sample_count=m)


def truncate_torch(latents, centers, phi: float):
    """Pull each latent toward its Euclidean-nearest center: ``phi * f + (1 - phi) * c``.

    ``latents``: (..., D); ``centers``: (N, D). Ties go to the lowest index.
    """
    if centers.shape[0] == 0:
        raise ValueError("empty centroid bank")
    flat = latents.reshape(-1, latents.shape[-1])
    c = centers.to(flat.dtype)
    d2 = ((flat.detach()[:, None, :] - c[None]) ** 2).sum(-1)
    nearest = c[d2.argmin(dim=1)]
    if phi == 1:
        return latents
    if phi == 0:
        return nearest.reshape(latents.shape)
    return (phi * flat + (1 - phi) * nearest).reshape(latents.shape)


def truncate(f_l, bank: CentroidBank, phi: float = 0.7) -> np.ndarray:
    if not 0.0 <= phi <= 1.0:
        raise ValueError(f"truncation level must lie in [0, 1], got {phi}")
    f = np.asarray(f_l, dtype=np.float64)
    if f.shape[-1] != bank.latent_dim:
        raise ValueError(f"latent dim {f.shape[-1]} != bank dim {bank.latent_dim}")
    out = truncate_torch(torch.from_numpy(f), torch.from_numpy(bank.centers.astype(np.float64)), phi)
    return out.numpy()


def nearest_center(f_l, bank: CentroidBank) -> int:
    d2 = ((np.asarray(f_l, dtype=np.float64)[None] - bank.centers.astype(np.float64)) ** 2).sum(-1)
    return int(np.argmin(d2))


def sse(x, centers) -> float:
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    return float(_sq_dists(x, np.asarray(centers, dtype=np.float64).reshape(len(centers), -1)).min(1).sum())

