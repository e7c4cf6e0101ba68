"""Hip-trajectory ControlNet and trajectory error metrics."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .data import MotionDataset, hip_track
from .diffusion import (
    ConditionBundle,
    Denoiser,
    DiffusionBatch,
    GuidanceConfig,
    NoiseSchedule,
    TextBatch,
    adm_loss,
    build_corpus,
    embed_inputs,
    random_batch,
    run_blocks,
)
from .errors import DataError, FrozenTensorError, ShapeError
from .layers import LayerNorm, sinusoidal_table
from .numerics import AdamW, gelu, tensor_digest, warmup_cosine

log = logging.getLogger(__name__)

FRAME_FEATURES = 16
MAX_FRAMES = 196


@dataclass
class TrajectorySignal:
    points: np.ndarray  # (L, J, 3) metres
    mask: np.ndarray  # (L, J) bool

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim == 2:
            self.points = self.points[:, None, :]
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim == 1:
            self.mask = self.mask[:, None]
        if self.points.ndim != 3 or self.points.shape[-1] != 3:
            raise ShapeError(f"trajectory points must be (L, J, 3), got {self.points.shape}")
        if self.mask.shape != self.points.shape[:2]:
            raise ShapeError("trajectory mask must be (L, J)")
        if not np.isfinite(self.points[self.mask]).all():
            raise DataError("non-finite controlled trajectory entries")

    @property
    def length(self) -> int:
        return self.points.shape[0]

    @classmethod
    def from_motion(cls, motion: np.ndarray, mask=None) -> "TrajectorySignal":
        hip = hip_track(motion)
        if mask is None:
            mask = np.ones(len(hip), dtype=bool)
        return cls(hip, mask)

    def masked_points(self) -> np.ndarray:
        """Points with uncontrolled entries zeroed, so they never leak downstream."""
        return np.where(self.mask[..., None], self.points, 0.0)


def segment_bounds(length: int, tokens: int) -> list[tuple[int, int]]:
    edges = np.linspace(0, length, tokens + 1)
    return [(int(round(a)), int(round(b))) for a, b in zip(edges[:-1], edges[1:])]


class TrajectoryEncoder(nn.Module):
    """Per-frame MLP over (position, frame index), mean-pooled into fixed segments."""

    def __init__(self, width: int, tokens: int, joints: int = 1, hidden: int = 128):
        super().__init__()
        self.tokens = tokens
        self.joints = joints
        self.fc1 = nn.Linear(3 * joints + FRAME_FEATURES, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.null_token = nn.Parameter(torch.randn(hidden) * 0.02)
        self.norm = LayerNorm(hidden)
        self.out = nn.Linear(hidden, width)
        self.register_buffer("frame_table", sinusoidal_table(MAX_FRAMES, FRAME_FEATURES), persistent=False)

    def frame_features(self, signal: TrajectorySignal, dtype) -> Tensor:
        if signal.points.shape[1] != self.joints:
            raise ShapeError(f"encoder expects {self.joints} joint(s)")
        L = signal.length
        if not 1 <= L <= MAX_FRAMES:
            raise ShapeError(f"trajectory length {L} outside 1..{MAX_FRAMES}")
        pts = torch.as_tensor(signal.masked_points().reshape(L, -1), dtype=dtype)
        h = torch.cat([pts, self.frame_table[:L].to(dtype)], dim=-1)
        h = self.fc2(gelu(self.fc1(h)))
        controlled = torch.as_tensor(signal.mask.any(axis=1))[:, None]
        return torch.where(controlled, h, self.null_token.to(dtype).expand_as(h))

    def forward(self, signal: TrajectorySignal, dtype=torch.float32) -> Tensor:
        per_frame = self.frame_features(signal, dtype)
        pooled = []
        for a, b in segment_bounds(signal.length, self.tokens):
            pooled.append(per_frame[a:b].mean(0) if b > a else self.null_token.to(dtype))
        return self.out(self.norm(torch.stack(pooled)))

    def null(self, dtype=torch.float32) -> Tensor:
        tok = self.out(self.norm(self.null_token.to(dtype)))
        return tok.expand(self.tokens, -1)


class ControlNet(nn.Module):
    """Trainable copy of the denoiser trunk with zero-initialized per-layer injections."""

    def __init__(self, base: Denoiser, joints: int = 1):
        super().__init__()
        self.cfg = copy.deepcopy(base.cfg)
        self.in_proj = copy.deepcopy(base.in_proj)
        self.step_mlp = copy.deepcopy(base.step_mlp)
        self.text_proj = copy.deepcopy(base.text_proj)
        self.blocks = copy.deepcopy(base.blocks)
        self.register_buffer("token_pos", base.token_pos.clone(), persistent=False)
        self.register_buffer("text_pos", base.text_pos.clone(), persistent=False)
        w = self.cfg.width
        self.zero_proj = nn.ModuleList(nn.Linear(w, w) for _ in range(self.cfg.layers))
        for p in self.zero_proj:
            nn.init.zeros_(p.weight)
            nn.init.zeros_(p.bias)
        self.encoder = TrajectoryEncoder(w, self.cfg.latent_tokens, joints)

    def encode(self, signal, dtype=torch.float32, length: int | None = None) -> Tensor:
        """Features ``(B, T, width)`` for one signal or a list of signals."""
        signals = [signal] if isinstance(signal, TrajectorySignal) else list(signal)
        for s in signals:
            if length is not None and s.length != length:
                raise ShapeError(f"trajectory length {s.length} != motion length {length}")
        return torch.stack([self.encoder(s, dtype) for s in signals])

    def null_features(self, dtype=torch.float32) -> Tensor:
        return self.encoder.null(dtype)[None]

    def control_residuals(self, z_k: Tensor, k, cond: ConditionBundle) -> list[Tensor]:
        x, temb, ctx = embed_inputs(self, z_k, k, cond)
        traj = cond.traj
        if traj is None:
            traj = self.null_features(z_k.dtype).expand(z_k.shape[0], -1, -1)
        _, outs = run_blocks(self, x + traj, temb, ctx, collect=True)
        return [proj(o) for proj, o in zip(self.zero_proj, outs)]

    def controlled_denoise(self, z_k: Tensor, k, cond: ConditionBundle, base: Denoiser, adapter=None) -> Tensor:
        if base is None:
            raise DataError("controlled denoising needs base denoiser weights")
        return base(z_k, k, cond, adapter=adapter, control=self.control_residuals(z_k, k, cond))


def init_controlnet(base: Denoiser, joints: int = 1, seed: int = 1234) -> ControlNet:
    torch.manual_seed(seed)
    dtype = next(base.parameters()).dtype
    return ControlNet(base, joints).to(dtype)


def copied_names(cnet: ControlNet) -> list[str]:
    """Parameter names shared (by construction) with the base denoiser."""
    return [n for n, _ in cnet.named_parameters() if n.split(".")[0] in ("in_proj", "step_mlp", "text_proj", "blocks")]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class ControlTrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 0.0
    uncond_prob: float = 0.1
    frame_keep: float = 1.0  # probability a frame stays controlled during training
    warmup: int = 0
    lr_floor: float = 1.0
    clip_norm: float = 0.0
    motion_space_loss: bool = False  # experimental; off by default
    motion_space_weight: float = 1.0
    log_every: int = 250


def controlnet_loss(
    batch: DiffusionBatch,
    cond: ConditionBundle,
    cnet: ControlNet,
    base: Denoiser,
    sched: NoiseSchedule,
    guidance: GuidanceConfig,
    generator: torch.Generator | None = None,
) -> Tensor:
    """Latent noise-prediction loss with text and trajectory in the condition."""
    null = cnet.null_features(batch.z0.dtype)
    return adm_loss(
        batch,
        cond,
        base,
        sched,
        guidance,
        generator,
        predict=lambda z, k, c: cnet.controlled_denoise(z, k, c, base),
        null_traj=null,
    )


def _motion_space_term(batch, cond, cnet, base, vae, sched, hips, masks) -> Tensor:
    from .diffusion import forward_diffuse

    z_k = forward_diffuse(batch.z0, batch.k, batch.eps, sched)
    eps = cnet.controlled_denoise(z_k, batch.k, cond, base)
    ab = sched.abar(batch.k).to(z_k.dtype)[:, None, None]
    z0 = (z_k - torch.sqrt(1 - ab) * eps) / torch.sqrt(ab)
    L = hips.shape[1]
    m = vae.denormalize(vae.decode(vae.unscale_latent(z0), L))
    diff = ((m[..., 0:3] - hips) ** 2).sum(-1)
    w = masks.to(diff.dtype)
    return (diff * w).sum() / w.sum().clamp_min(1.0)


def _random_mask(L: int, keep: float, gen: torch.Generator) -> np.ndarray:
    if keep >= 1.0:
        return np.ones(L, dtype=bool)
    m = (torch.rand(L, generator=gen) < keep).numpy()
    if not m.any():
        m[int(torch.randint(L, (1,), generator=gen))] = True
    return m


def train_controlnet(
    base: Denoiser,
    vae,
    dataset: MotionDataset,
    sched: NoiseSchedule,
    config: ControlTrainConfig | None = None,
    seed: int = 1234,
    cnet: ControlNet | None = None,
) -> tuple[ControlNet, list[float]]:
    """Train a ControlNet on the dataset's hip tracks; base and VAE stay bit-identical."""
    if len(dataset) == 0:
        raise DataError("empty trajectory dataset")
    config = config or ControlTrainConfig()
    dtype = next(base.parameters()).dtype
    cnet = cnet if cnet is not None else init_controlnet(base, seed=seed)
    frozen = {f"denoiser.{n}": p for n, p in base.named_parameters()}
    frozen.update({f"vae.{n}": p for n, p in vae.named_parameters()})
    before = {n: tensor_digest(p) for n, p in frozen.items()}
    for p in frozen.values():
        p.requires_grad_(False)

    corpus = build_corpus(dataset, vae, dtype)
    signals = [TrajectorySignal(c.hip, np.ones(c.length, dtype=bool)) for c in dataset.clips]
    opt = AdamW(cnet.named_parameters(), lr=config.lr, weight_decay=config.weight_decay, frozen=())
    gen = torch.Generator().manual_seed(seed)
    guidance = GuidanceConfig(uncond_prob=config.uncond_prob)
    history: list[float] = []
    try:
        for step in range(config.steps):
            idx = torch.randint(len(dataset), (config.batch_size,), generator=gen).tolist()
            batch = random_batch(corpus.z0[idx], sched, gen)
            sigs = [
                TrajectorySignal(signals[i].points, _random_mask(signals[i].length, config.frame_keep, gen))
                for i in idx
            ]
            cond = ConditionBundle(
                TextBatch.from_embeddings([corpus.texts[i] for i in idx], dtype), traj=cnet.encode(sigs, dtype)
            )
            loss = controlnet_loss(batch, cond, cnet, base, sched, guidance, gen)
            if config.motion_space_loss:
                hips = torch.as_tensor(np.stack([s.points[:, 0] for s in sigs]), dtype=dtype)
                masks = torch.as_tensor(np.stack([s.mask[:, 0] for s in sigs]))
                loss = loss + config.motion_space_weight * _motion_space_term(
                    batch, cond, cnet, base, vae, sched, hips, masks
                )
            opt.zero_grad()
            loss.backward()
            if config.clip_norm > 0:
                opt.clip_grad_norm(config.clip_norm)
            opt.state.lr = warmup_cosine(step, config.steps, config.lr, config.warmup, config.lr_floor)
            opt.step()
            history.append(loss.item())
            if config.log_every and step % config.log_every == 0:
                log.info("controlnet step %d loss %.4f", step, history[-1])
    finally:
        for p in frozen.values():
            p.requires_grad_(True)
    changed = [n for n, p in frozen.items() if tensor_digest(p) != before[n]]
    if changed:
        raise FrozenTensorError(f"frozen tensors changed during control training: {changed[:5]}")
    cnet.eval()
    return cnet, history


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def trajectory_errors(generated, targets, threshold: float = 0.5) -> tuple[float, float, float]:
    """(traj_err, loc_err, avg_err) of generated hip tracks against target signals.

    traj_err is the fraction of samples whose worst controlled frame deviates
    by more than ``threshold``; loc_err is the fraction of controlled frames
    (pooled over samples) beyond it; avg_err is the mean deviation in metres
    over the same pooled frames.
    """
    if isinstance(targets, TrajectorySignal):
        targets, generated = [targets], [generated]
    if len(generated) != len(targets):
        raise ShapeError("one generated track per target signal required")
    sample_fail = []
    devs = []
    for g, t in zip(generated, targets):
        g = np.asarray(g, dtype=np.float64)
        if g.ndim == 2:
            g = g[:, None, :]
        if g.shape != t.points.shape:
            raise ShapeError(f"generated track {g.shape} does not match target {t.points.shape}")
        if not t.mask.any():
            continue
        d = np.linalg.norm(g - t.points, axis=-1)[t.mask]
        devs.append(d)
        sample_fail.append(bool(d.max() > threshold))
    if not devs:
        raise DataError("no controlled frames")
    pooled = np.concatenate(devs)
    return float(np.mean(sample_fail)), float((pooled > threshold).mean()), float(pooled.mean())


def hip_tracks(motions: Sequence[np.ndarray]) -> list[np.ndarray]:
    return [hip_track(m) for m in motions]


def circle_track(length: int, radius: float = 1.0, height: float = 0.95) -> TrajectorySignal:
    t = np.linspace(0.0, 2 * math.pi, length, endpoint=False)
    pts = np.stack([radius * np.cos(t) - radius, np.full(length, height), radius * np.sin(t)], axis=1)
    return TrajectorySignal(pts, np.ones(length, dtype=bool))
