"""Transformer motion VAE: motion clips <-> a 7-token latent."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .data import FEATURE_DIM, MotionDataset, Normalizer
from .errors import DataError, NumericError, ShapeError
from .layers import EncoderLayer, LayerNorm, sinusoidal_table

log = logging.getLogger(__name__)


@dataclass
class VAEConfig:
    feature_dim: int = FEATURE_DIM
    latent_tokens: int = 7
    latent_dim: int = 256
    width: int = 256
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    max_len: int = 196

    @classmethod
    def paper_scale(cls) -> "VAEConfig":
        return cls(enc_layers=9, dec_layers=9)


class MotionVAE(nn.Module):
    """Encoder reads learned distribution tokens prepended to the motion tokens;
    decoder runs positional queries jointly with the latent tokens."""

    def __init__(self, cfg: VAEConfig | None = None):
        super().__init__()
        cfg = cfg or VAEConfig()
        self.cfg = cfg
        w, T = cfg.width, cfg.latent_tokens
        self.in_proj = nn.Linear(cfg.feature_dim, w)
        self.dist_tokens = nn.Parameter(torch.randn(2 * T, w) * 0.02)
        self.encoder = nn.ModuleList(EncoderLayer(w, cfg.heads) for _ in range(cfg.enc_layers))
        self.enc_norm = LayerNorm(w)
        self.to_latent = nn.Linear(w, cfg.latent_dim)
        self.from_latent = nn.Linear(cfg.latent_dim, w)
        self.latent_pos = nn.Parameter(torch.randn(T, w) * 0.02)
        self.decoder = nn.ModuleList(EncoderLayer(w, cfg.heads) for _ in range(cfg.dec_layers))
        self.dec_norm = LayerNorm(w)
        self.out_proj = nn.Linear(w, cfg.feature_dim)
        self.register_buffer("pos_table", sinusoidal_table(cfg.max_len, w), persistent=False)
        self.register_buffer("feat_mean", torch.zeros(cfg.feature_dim))
        self.register_buffer("feat_std", torch.ones(cfg.feature_dim))
        self.register_buffer("latent_mean", torch.zeros(()))
        self.register_buffer("latent_std", torch.ones(()))

    # -- normalization helpers -------------------------------------------------
    def set_normalizer(self, norm: Normalizer) -> None:
        self.feat_mean.copy_(torch.as_tensor(norm.mean))
        self.feat_std.copy_(torch.as_tensor(norm.std))

    def normalize(self, m: Tensor) -> Tensor:
        return (m - self.feat_mean) / self.feat_std

    def denormalize(self, m: Tensor) -> Tensor:
        return m * self.feat_std + self.feat_mean

    def _check_length(self, L: int) -> None:
        if not 1 <= L <= self.cfg.max_len:
            raise ShapeError(f"length {L} outside 1..{self.cfg.max_len}")

    # -- encoder / decoder -----------------------------------------------------
    def encode(self, m: Tensor, mask: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """Normalized motion ``(B, L, H)`` or ``(L, H)`` -> (mean, logvar), each ``(B, T, C)``."""
        single = m.dim() == 2
        if single:
            m = m[None]
        B, L, H = m.shape
        self._check_length(L)
        if H != self.cfg.feature_dim:
            raise ShapeError(f"feature dim {H} != {self.cfg.feature_dim}")
        if mask is None:
            mask = torch.ones(B, L, dtype=torch.bool, device=m.device)
        T = self.cfg.latent_tokens
        x = self.in_proj(m) + self.pos_table[:L].to(m.dtype)
        x = torch.cat([self.dist_tokens.expand(B, -1, -1), x], dim=1)
        key_mask = torch.cat([torch.ones(B, 2 * T, dtype=torch.bool, device=m.device), mask], dim=1)
        for layer in self.encoder:
            x = layer(x, key_mask)
        stats = self.to_latent(self.enc_norm(x[:, : 2 * T]))
        mean, logvar = stats[:, :T], stats[:, T:]
        if single:
            return mean[0], logvar[0]
        return mean, logvar

    def decode(self, z: Tensor, length: int, mask: Tensor | None = None) -> Tensor:
        """Latent ``(B, T, C)`` or ``(T, C)`` -> normalized motion ``(B, length, H)``."""
        single = z.dim() == 2
        if single:
            z = z[None]
        self._check_length(length)
        if tuple(z.shape[1:]) != (self.cfg.latent_tokens, self.cfg.latent_dim):
            raise ShapeError(f"latent shape {tuple(z.shape[1:])} does not match config")
        B = z.shape[0]
        T = self.cfg.latent_tokens
        lat = self.from_latent(z) + self.latent_pos
        queries = self.pos_table[:length].to(z.dtype).expand(B, -1, -1)
        x = torch.cat([lat, queries], dim=1)
        key_mask = None
        if mask is not None:
            key_mask = torch.cat([torch.ones(B, T, dtype=torch.bool, device=z.device), mask], dim=1)
        for layer in self.decoder:
            x = layer(x, key_mask)
        out = self.out_proj(self.dec_norm(x[:, T:]))
        return out[0] if single else out

    def forward(self, m: Tensor, mask: Tensor | None = None, seed: int | None = None):
        mean, logvar = self.encode(m, mask)
        z = mean if seed is None else sample_latent(mean, logvar, seed)
        return self.decode(z, m.shape[-2], mask), mean, logvar

    # -- latent normalization used by diffusion ------------------------------
    def scale_latent(self, z: Tensor) -> Tensor:
        return (z - self.latent_mean) / self.latent_std

    def unscale_latent(self, z: Tensor) -> Tensor:
        return z * self.latent_std + self.latent_mean


def encode(m, vae: MotionVAE):
    """Encode one normalized clip ``(L, H)``; deterministic."""
    with torch.no_grad():
        return vae.encode(torch.as_tensor(m, dtype=_dtype(vae)))


def decode(z, length: int, vae: MotionVAE):
    with torch.no_grad():
        return vae.decode(torch.as_tensor(z, dtype=_dtype(vae)), length)


def sample_latent(mean: Tensor, logvar: Tensor, seed: int) -> Tensor:
    """Reparameterized draw ``mean + exp(logvar / 2) * eps`` with seeded ``eps``."""
    if mean.shape != logvar.shape:
        raise ShapeError("mean/logvar shape mismatch")
    g = torch.Generator().manual_seed(int(seed))
    eps = torch.randn(mean.shape, generator=g, dtype=mean.dtype)
    return mean + torch.exp(0.5 * logvar) * eps


def kl_term(mean: Tensor, logvar: Tensor) -> Tensor:
    return (0.5 * (mean**2 + torch.expm1(logvar) - logvar)).mean()


def vae_loss(
    m: Tensor,
    m_hat: Tensor,
    mean: Tensor,
    logvar: Tensor,
    kl_weight: float = 1e-4,
    mask: Tensor | None = None,
) -> Tensor:
    if m.shape != m_hat.shape or mean.shape != logvar.shape:
        raise ShapeError("vae_loss shape mismatch")
    sq = (m - m_hat) ** 2
    if mask is None:
        mse = sq.mean()
    else:
        w = mask[..., None].to(sq.dtype)
        mse = (sq * w).sum() / (w.sum() * sq.shape[-1])
    return mse + kl_weight * kl_term(mean, logvar)


@dataclass
class VAETrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-4
    kl_weight: float = 1e-4
    weight_decay: float = 0.0
    warmup: int = 0
    lr_floor: float = 1.0  # 1.0 keeps the rate constant
    clip_norm: float = 0.0  # 0 disables clipping
    log_every: int = 100
    dtype: str = "float32"


def _dtype(module: nn.Module) -> torch.dtype:
    return next(module.parameters()).dtype


def pad_batch(motions: list[np.ndarray], dtype=torch.float32) -> tuple[Tensor, Tensor]:
    L = max(m.shape[0] for m in motions)
    H = motions[0].shape[1]
    out = torch.zeros(len(motions), L, H, dtype=dtype)
    mask = torch.zeros(len(motions), L, dtype=torch.bool)
    for i, m in enumerate(motions):
        out[i, : m.shape[0]] = torch.as_tensor(m, dtype=dtype)
        mask[i, : m.shape[0]] = True
    return out, mask


def train_vae(
    dataset: MotionDataset,
    cfg: VAEConfig | None = None,
    train: VAETrainConfig | None = None,
    seed: int = 1234,
) -> tuple[MotionVAE, list[float]]:
    """Fit a VAE on ``dataset``; returns the model and the per-step losses."""
    from .numerics import AdamW, warmup_cosine

    if len(dataset) == 0:
        raise DataError("empty dataset")
    train = train or VAETrainConfig()
    dtype = getattr(torch, train.dtype)
    torch.manual_seed(seed)
    vae = MotionVAE(cfg).to(dtype)
    norm = Normalizer.fit(dataset.motions())
    vae.set_normalizer(norm)
    data = [norm.normalize(m) for m in dataset.motions()]
    opt = AdamW(vae.named_parameters(), lr=train.lr, weight_decay=train.weight_decay)
    gen = torch.Generator().manual_seed(seed)
    history: list[float] = []
    vae.train()
    for step in range(train.steps):
        idx = torch.randint(len(data), (min(train.batch_size, len(data)),), generator=gen).tolist()
        m, mask = pad_batch([data[i] for i in idx], dtype)
        m_hat, mean, logvar = vae(m, mask, seed=int(torch.randint(2**31 - 1, (1,), generator=gen)))
        loss = vae_loss(m, m_hat, mean, logvar, train.kl_weight, mask)
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite VAE loss at step {step}")
        opt.zero_grad()
        loss.backward()
        if train.clip_norm > 0:
            opt.clip_grad_norm(train.clip_norm)
        opt.state.lr = warmup_cosine(step, train.steps, train.lr, train.warmup, train.lr_floor)
        opt.step()
        history.append(loss.item())
        if train.log_every and step % train.log_every == 0:
            log.info("vae step %d loss %.5f", step, history[-1])
    vae.eval()
    fit_latent_stats(vae, dataset)
    return vae, history


@torch.no_grad()
def fit_latent_stats(vae: MotionVAE, dataset: MotionDataset) -> None:
    """Store the scalar mean/std of posterior means, used to whiten diffusion latents."""
    z = encode_dataset(vae, dataset, scaled=False)
    vae.latent_mean.copy_(z.mean())
    vae.latent_std.copy_(z.std().clamp_min(1e-6))


@torch.no_grad()
def encode_dataset(vae: MotionVAE, dataset: MotionDataset, scaled: bool = True, batch: int = 64) -> Tensor:
    dtype = _dtype(vae)
    out = []
    for s in range(0, len(dataset), batch):
        chunk = [vae.normalize(torch.as_tensor(c.motion, dtype=dtype)).numpy() for c in dataset.clips[s : s + batch]]
        m, mask = pad_batch(chunk, dtype)
        mean, _ = vae.encode(m, mask)
        out.append(mean)
    z = torch.cat(out)
    return vae.scale_latent(z) if scaled else z


@torch.no_grad()
def reconstruction_mse(vae: MotionVAE, dataset: MotionDataset) -> float:
    dtype = _dtype(vae)
    total, count = 0.0, 0
    for c in dataset.clips:
        m = vae.normalize(torch.as_tensor(c.motion, dtype=dtype))
        mean, _ = vae.encode(m)
        m_hat = vae.decode(mean, m.shape[0])
        total += float(((m - m_hat) ** 2).sum())
        count += m.numel()
    return total / count


def config_dict(cfg: VAEConfig) -> dict:
    return asdict(cfg)


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


__all__ = [
    "VAEConfig",
    "MotionVAE",
    "encode",
    "decode",
    "sample_latent",
    "vae_loss",
    "kl_term",
    "VAETrainConfig",
    "train_vae",
    "fit_latent_stats",
    "encode_dataset",
    "reconstruction_mse",
    "pad_batch",
    "param_count",
]

