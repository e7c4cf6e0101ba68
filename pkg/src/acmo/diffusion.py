"""Latent diffusion over VAE codes: schedule, text stub, denoiser, loss and guided sampling."""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .data import MotionDataset
from .errors import DataError, NumericError, ShapeError
from .layers import Attention, FeedForward, LayerNorm, sinusoidal_table, timestep_features
from .numerics import AdamW, gelu, scaled_dot_attention, warmup_cosine

log = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# noise schedule and forward process
# ---------------------------------------------------------------------------


@dataclass
class NoiseSchedule:
    alpha: Tensor  # (K,) float64, alpha[k - 1] is alpha_k
    alpha_bar: Tensor

    @property
    def K(self) -> int:
        return int(self.alpha.shape[0])

    def abar(self, k) -> Tensor:
        k = torch.as_tensor(k)
        if bool((k < 1).any()) or bool((k > self.K).any()):
            raise DataError(f"diffusion step outside 1..{self.K}")
        return self.alpha_bar[k.long() - 1]


def build_noise_schedule(
    K: int = 1000,
    kind: str = "linear",
    beta_start: float = 1e-4,
    beta_end: float = 2e-2,
) -> NoiseSchedule:
    if K < 1:
        raise DataError("schedule needs K >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise DataError(f"invalid beta bounds ({beta_start}, {beta_end})")
    if kind == "linear":
        beta = torch.linspace(beta_start, beta_end, K, dtype=torch.float64)
    elif kind == "scaled_linear":
        beta = torch.linspace(math.sqrt(beta_start), math.sqrt(beta_end), K, dtype=torch.float64) ** 2
    elif kind == "cosine":
        s = 0.008
        t = torch.arange(K + 1, dtype=torch.float64) / K
        f = torch.cos((t + s) / (1 + s) * math.pi / 2) ** 2
        ab = f / f[0]
        beta = (1 - ab[1:] / ab[:-1]).clamp(beta_start, 0.999)
    else:
        raise DataError(f"unknown schedule kind {kind!r}")
    alpha = 1.0 - beta
    return NoiseSchedule(alpha, torch.cumprod(alpha, dim=0))


def forward_diffuse(z0: Tensor, k, eps: Tensor, sched: NoiseSchedule) -> Tensor:
    """Closed-form ``z_k = sqrt(abar_k) z0 + sqrt(1 - abar_k) eps``; ``k`` may be per-sample."""
    if eps.shape != z0.shape:
        raise ShapeError("noise shape differs from z0")
    ab = sched.abar(k).to(z0.dtype)
    while ab.dim() < z0.dim():
        ab = ab[..., None]
    return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * eps


def cfg_combine(eps_cond: Tensor, eps_uncond: Tensor, w: float) -> Tensor:
    """``w * cond + (1 - w) * uncond``; w = 1 and w = 0 return a branch bit for bit."""
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeError("guidance branches differ in shape")
    return w * eps_cond + (1.0 - w) * eps_uncond


# ---------------------------------------------------------------------------
# text stub
# ---------------------------------------------------------------------------

TEXT_DIM = 64
MAX_TEXT_TOKENS = 16


@dataclass
class TextEmbedding:
    features: np.ndarray  # (S, TEXT_DIM)
    mask: np.ndarray  # (S,) bool

    @property
    def is_null(self) -> bool:
        return bool(self.mask[0]) and not self.mask[1:].any() and not self.features.any()


def token_vector(token: str, dim: int = TEXT_DIM) -> np.ndarray:
    seed = int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")
    v = np.random.default_rng(seed).standard_normal(dim)
    return v / np.linalg.norm(v)


def null_embedding(dim: int = TEXT_DIM, max_tokens: int = MAX_TEXT_TOKENS) -> TextEmbedding:
    mask = np.zeros(max_tokens, dtype=bool)
    mask[0] = True
    return TextEmbedding(np.zeros((max_tokens, dim)), mask)


def text_encode_stub(text: str, dim: int = TEXT_DIM, max_tokens: int = MAX_TEXT_TOKENS) -> TextEmbedding:
    """Frozen stand-in text encoder: one hashed unit vector per whitespace token."""
    tokens = text.lower().split()[:max_tokens]
    if not tokens:
        return null_embedding(dim, max_tokens)
    feats = np.zeros((max_tokens, dim))
    mask = np.zeros(max_tokens, dtype=bool)
    for i, tok in enumerate(tokens):
        feats[i] = token_vector(tok, dim)
        mask[i] = True
    return TextEmbedding(feats, mask)


@dataclass
class TextBatch:
    features: Tensor  # (B, S, D)
    mask: Tensor  # (B, S)

    @classmethod
    def from_embeddings(cls, embs: Sequence[TextEmbedding], dtype=torch.float32) -> "TextBatch":
        return cls(
            torch.as_tensor(np.stack([e.features for e in embs]), dtype=dtype),
            torch.as_tensor(np.stack([e.mask for e in embs])),
        )

    @classmethod
    def from_texts(cls, texts: Sequence[str], dtype=torch.float32) -> "TextBatch":
        return cls.from_embeddings([text_encode_stub(t) for t in texts], dtype)

    @classmethod
    def null(cls, batch: int, dtype=torch.float32) -> "TextBatch":
        return cls.from_embeddings([null_embedding()] * batch, dtype)

    def where(self, keep: Tensor, other: "TextBatch") -> "TextBatch":
        """Per-sample select: rows with ``keep`` from self, the rest from ``other``."""
        k = keep.to(torch.bool)
        return TextBatch(
            torch.where(k[:, None, None], self.features, other.features),
            torch.where(k[:, None], self.mask, other.mask),
        )


# ---------------------------------------------------------------------------
# denoiser
# ---------------------------------------------------------------------------


@dataclass
class DenoiserConfig:
    latent_tokens: int = 7
    latent_dim: int = 256
    width: int = 256
    layers: int = 2
    heads: int = 4
    text_dim: int = TEXT_DIM
    ff_mult: int = 4
    wiring: str = "block"
    # "motion_query": motion tokens attend to text; "text_query": text tokens query motion
    orientation: str = "motion_query"
    K: int = 1000
    schedule: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    # eps_hat = sqrt(1 - abar_k) * z_k + network output
    input_skip: bool = True

    def __post_init__(self):
        if self.wiring not in ("block", "stack"):
            raise DataError(f"unknown wiring {self.wiring!r}")
        if self.orientation not in ("motion_query", "text_query"):
            raise DataError(f"unknown cross-attention orientation {self.orientation!r}")

    @classmethod
    def paper_scale(cls) -> "DenoiserConfig":
        return cls(layers=11, heads=4)


def skip_partner(i: int, n: int) -> int:
    """Long-skip pairing of layer ``i`` in an ``n``-layer stack."""
    return n - 1 - i


class TextMotionBlock(nn.Module):
    def __init__(self, width: int, heads: int, ff_mult: int, skip_in: bool):
        super().__init__()
        self.skip = nn.Linear(2 * width, width) if skip_in else None
        self.norm1 = LayerNorm(width)
        self.self_attn = Attention(width, heads)
        self.norm2 = LayerNorm(width)
        self.cross_attn = Attention(width, heads)
        self.norm3 = LayerNorm(width)
        self.ff = FeedForward(width, ff_mult)


@dataclass
class ConditionBundle:
    """Per-batch conditions; ``None`` entries route through the null branch."""

    text: TextBatch | None = None
    style: Tensor | None = None  # (B, T, latent_dim) motion-prompt latent
    style_keep: Tensor | None = None  # (B,) bool; False nulls the prompt for that sample
    traj: Tensor | None = None  # (B, T, width) trajectory features

    def batch_text(self, batch: int, dtype) -> TextBatch:
        return self.text if self.text is not None else TextBatch.null(batch, dtype)


class Denoiser(nn.Module):
    """Noise predictor over the latent tokens built from text-motion blocks."""

    def __init__(self, cfg: DenoiserConfig | None = None):
        super().__init__()
        cfg = cfg or DenoiserConfig()
        self.cfg = cfg
        w = cfg.width
        self.in_proj = nn.Linear(cfg.latent_dim, w)
        self.step_mlp = nn.Sequential(nn.Linear(w, w), _GELU(), nn.Linear(w, w))
        self.text_proj = nn.Linear(cfg.text_dim, w)
        n = cfg.layers
        self.blocks = nn.ModuleList(
            TextMotionBlock(w, cfg.heads, cfg.ff_mult, skip_in=_receives_skip(i, n)) for i in range(n)
        )
        self.out_norm = LayerNorm(w)
        self.out_proj = nn.Linear(w, cfg.latent_dim)
        self.register_buffer("token_pos", sinusoidal_table(cfg.latent_tokens, w), persistent=False)
        self.register_buffer("text_pos", sinusoidal_table(MAX_TEXT_TOKENS, w), persistent=False)
        sched = self.schedule()
        self.register_buffer("skip_coef", torch.sqrt(1.0 - sched.alpha_bar).float(), persistent=False)

    def schedule(self) -> NoiseSchedule:
        c = self.cfg
        return build_noise_schedule(c.K, c.schedule, c.beta_start, c.beta_end)

    def forward(
        self,
        z_k: Tensor,
        k: Tensor,
        cond: ConditionBundle | None = None,
        adapter=None,
        control: Sequence[Tensor] | None = None,
    ) -> Tensor:
        cond = cond or ConditionBundle()
        x, temb, ctx = embed_inputs(self, z_k, k, cond)
        style = None
        if adapter is not None:
            style = adapter.prompt_tokens(cond, x.dtype)
        x, _ = run_blocks(self, x, temb, ctx, adapter=adapter, style=style, control=control)
        out = self.out_proj(self.out_norm(x))
        if self.cfg.input_skip:
            k = torch.as_tensor(k).long().expand(z_k.shape[0])
            if bool((k < 1).any()) or bool((k > self.cfg.K).any()):
                raise DataError(f"diffusion step outside 1..{self.cfg.K}")
            out = out + self.skip_coef[k - 1].to(z_k.dtype)[:, None, None] * z_k
        return out


class _GELU(nn.Module):
    def forward(self, x):
        return gelu(x)


def _receives_skip(i: int, n: int) -> bool:
    return skip_partner(i, n) < i


def embed_inputs(net, z_k: Tensor, k, cond: ConditionBundle):
    """Project latents, step and text; ``net`` provides in_proj/step_mlp/text_proj."""
    cfg = net.cfg
    if z_k.dim() != 3 or tuple(z_k.shape[1:]) != (cfg.latent_tokens, cfg.latent_dim):
        raise ShapeError(f"latent shape {tuple(z_k.shape)} does not match config")
    B = z_k.shape[0]
    k = torch.as_tensor(k)
    if k.dim() == 0:
        k = k.expand(B)
    temb = net.step_mlp(timestep_features(k, cfg.width).to(z_k.dtype))[:, None, :]
    x = net.in_proj(z_k) + net.token_pos.to(z_k.dtype)
    text = cond.batch_text(B, z_k.dtype)
    ctx = (net.text_proj(text.features.to(z_k.dtype)) + net.text_pos.to(z_k.dtype), text.mask)
    return x, temb, ctx


def _self_sublayer(blk: TextMotionBlock, x: Tensor, i: int, adapter, style) -> Tensor:
    h = blk.norm1(x)
    out = x + blk.self_attn(h, h)
    if adapter is not None:
        out = adapter.self_terms(i, blk, h, out, style)
    return out


def _cross_sublayer(blk: TextMotionBlock, x: Tensor, i: int, ctx, orientation: str, adapter) -> Tensor:
    h = blk.norm2(x)
    text, mask = ctx
    if orientation == "motion_query":
        return x + decoupled_cross_attention(h, text, mask, blk.cross_attn, adapter, i)
    # text tokens query the motion stream; the per-text outputs are pooled back
    # over valid text tokens and broadcast to every motion token
    upd = decoupled_cross_attention(text, h, None, blk.cross_attn, adapter, i)
    wts = mask.to(upd.dtype)[..., None]
    pooled = (upd * wts).sum(dim=1, keepdim=True) / wts.sum(dim=1, keepdim=True)
    return x + pooled


def decoupled_cross_attention(query, context, key_mask, attn: Attention, adapter=None, index: int = 0) -> Tensor:
    """Base cross-attention plus the gated adapter term sharing the same query.

    ``o(softmax(q k^T) v + gate * softmax(q k'^T) v')`` with ``k' = context W'_k``
    and ``v' = context W'_v`` taken from the adapter.
    """
    q = attn.q(query)
    base = scaled_dot_attention(q, attn.k(context), attn.v(context), attn.heads, key_mask)
    if adapter is not None and adapter.has_text_branch:
        kp, vp = adapter.text_kv(index, context)
        base = base + adapter.gate(index, "text") * scaled_dot_attention(q, kp, vp, attn.heads, key_mask)
    return attn.o(base)


def run_blocks(net, x, temb, ctx, adapter=None, style=None, control=None, collect: bool = False):
    """Apply ``net.blocks`` under the configured wiring with U-Net style long skips.

    ``control[i]`` is added to the input of layer ``i``.  With ``collect`` the
    per-layer outputs are returned as well (used by the ControlNet branch).
    """
    cfg = net.cfg
    n = len(net.blocks)
    skips: list[Tensor] = []
    outs: list[Tensor] = []
    for i, blk in enumerate(net.blocks):
        if blk.skip is not None:
            x = blk.skip(torch.cat([x, skips.pop()], dim=-1))
        x = x + temb
        if control is not None:
            x = x + control[i]
        x = _self_sublayer(blk, x, i, adapter, style)
        if cfg.wiring == "block":
            x = _cross_sublayer(blk, x, i, ctx, cfg.orientation, adapter)
        x = x + blk.ff(blk.norm3(x))
        if skip_partner(i, n) > i:
            skips.append(x)
        if collect:
            outs.append(x)
    if cfg.wiring == "stack":
        for i, blk in enumerate(net.blocks):
            x = _cross_sublayer(blk, x, i, ctx, cfg.orientation, adapter)
    return x, outs


def denoiser_forward(z_k, k, cond, model: Denoiser, wiring: str | None = None, **kw) -> Tensor:
    if wiring is not None and wiring != model.cfg.wiring:
        if wiring not in ("block", "stack"):
            raise DataError(f"unknown wiring {wiring!r}")
        saved = model.cfg.wiring
        model.cfg.wiring = wiring
        try:
            return model(z_k, k, cond, **kw)
        finally:
            model.cfg.wiring = saved
    return model(z_k, k, cond, **kw)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class GuidanceConfig:
    w: float = 7.5
    uncond_prob: float = 0.1
    sampler: str = "ddim"  # "ddim" (deterministic skip) or "ancestral"
    steps: int = 50

    def __post_init__(self):
        if self.w < 0:
            raise DataError("guidance scale must be >= 0")
        if not 0.0 <= self.uncond_prob <= 1.0:
            raise DataError("uncond_prob must lie in [0, 1]")
        if self.sampler not in ("ddim", "ancestral"):
            raise DataError(f"unknown sampler {self.sampler!r}")
        if self.steps < 1:
            raise DataError("need at least one inference step")


@dataclass
class DiffusionBatch:
    z0: Tensor  # (B, T, C)
    k: Tensor  # (B,) in 1..K
    eps: Tensor

    def __post_init__(self):
        if self.eps.shape != self.z0.shape or self.k.shape[0] != self.z0.shape[0]:
            raise ShapeError("inconsistent diffusion batch")


def drop_conditions(cond: ConditionBundle, keep: Tensor, null_traj: Tensor | None = None) -> ConditionBundle:
    """Null every condition for samples where ``keep`` is False."""
    B = keep.shape[0]
    text = cond.text
    if text is not None:
        text = text.where(keep, TextBatch.null(B, text.features.dtype))
    style_keep = cond.style_keep
    if cond.style is not None:
        style_keep = keep if style_keep is None else (style_keep & keep)
    traj = cond.traj
    if traj is not None:
        if null_traj is None:
            raise DataError("trajectory features present but no null features to drop to")
        traj = torch.where(keep[:, None, None], traj, null_traj.expand_as(traj))
    return ConditionBundle(text, cond.style, style_keep, traj)


def adm_loss(
    batch: DiffusionBatch,
    cond: ConditionBundle,
    model,
    sched: NoiseSchedule,
    guidance: GuidanceConfig,
    generator: torch.Generator | None = None,
    predict=None,
    null_traj: Tensor | None = None,
) -> Tensor:
    """Mean over the batch of ``||eps - g(z_k, k, c')||^2`` with per-sample condition dropout.

    ``predict(z_k, k, cond)`` overrides the noise predictor (defaults to ``model``).
    """
    B = batch.z0.shape[0]
    if guidance.uncond_prob >= 1.0:
        keep = torch.zeros(B, dtype=torch.bool)
    elif guidance.uncond_prob <= 0.0:
        keep = torch.ones(B, dtype=torch.bool)
    else:
        keep = torch.rand(B, generator=generator) >= guidance.uncond_prob
    cond = drop_conditions(cond, keep, null_traj)
    z_k = forward_diffuse(batch.z0, batch.k, batch.eps, sched)
    pred = (predict or model)(z_k, batch.k, cond)
    loss = ((batch.eps - pred) ** 2).reshape(B, -1).sum(dim=1).mean()
    if not torch.isfinite(loss):
        raise NumericError("non-finite diffusion loss")
    return loss


@dataclass
class ADMTrainConfig:
    steps: int = 5000
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 0.0
    uncond_prob: float = 0.1
    warmup: int = 0
    lr_floor: float = 1.0
    clip_norm: float = 0.0
    log_every: int = 250
    dtype: str = "float32"


@dataclass
class LatentCorpus:
    """Whitened VAE latents paired with stub text embeddings (and optional extras)."""

    z0: Tensor
    texts: list[TextEmbedding]
    lengths: list[int]
    extras: dict = field(default_factory=dict)


def build_corpus(dataset: MotionDataset, vae, dtype=torch.float32) -> LatentCorpus:
    from .vae import encode_dataset

    if len(dataset) == 0:
        raise DataError("empty dataset")
    z = encode_dataset(vae, dataset).to(dtype)
    return LatentCorpus(z, [text_encode_stub(c) for c in dataset.captions()], [c.length for c in dataset.clips])


def train_adm(
    dataset: MotionDataset,
    vae,
    cfg: DenoiserConfig | None = None,
    train: ADMTrainConfig | None = None,
    seed: int = 1234,
) -> tuple[Denoiser, NoiseSchedule, list[float]]:
    train = train or ADMTrainConfig()
    dtype = getattr(torch, train.dtype)
    corpus = build_corpus(dataset, vae, dtype)
    torch.manual_seed(seed)
    model = Denoiser(cfg).to(dtype)
    sched = model.schedule()
    guidance = GuidanceConfig(uncond_prob=train.uncond_prob)
    opt = AdamW(model.named_parameters(), lr=train.lr, weight_decay=train.weight_decay)
    gen = torch.Generator().manual_seed(seed)
    history = []
    for step in range(train.steps):
        idx = torch.randint(len(corpus.texts), (train.batch_size,), generator=gen)
        batch = random_batch(corpus.z0[idx], sched, gen)
        cond = ConditionBundle(TextBatch.from_embeddings([corpus.texts[i] for i in idx.tolist()], dtype))
        loss = adm_loss(batch, cond, model, sched, guidance, gen)
        opt.zero_grad()
        loss.backward()
        if train.clip_norm > 0:
            opt.clip_grad_norm(train.clip_norm)
        opt.state.lr = warmup_cosine(step, train.steps, train.lr, train.warmup, train.lr_floor)
        opt.step()
        history.append(loss.item())
        if train.log_every and step % train.log_every == 0:
            log.info("adm step %d loss %.4f", step, history[-1])
    model.eval()
    return model, sched, history


def random_batch(z0: Tensor, sched: NoiseSchedule, gen: torch.Generator) -> DiffusionBatch:
    k = torch.randint(1, sched.K + 1, (z0.shape[0],), generator=gen)
    eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
    return DiffusionBatch(z0, k, eps)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def inference_steps(K: int, steps: int) -> list[int]:
    """Descending step subsequence ``K, K - s, ...`` with ``steps`` entries."""
    steps = min(steps, K)
    stride = K / steps
    return [int(round(K - i * stride)) for i in range(steps)]


@torch.no_grad()
def sample_latents(
    predict,
    cond: ConditionBundle,
    uncond: ConditionBundle,
    batch: int,
    shape: tuple[int, int],
    sched: NoiseSchedule,
    guidance: GuidanceConfig,
    seeds: Sequence[int],
    dtype=torch.float32,
) -> Tensor:
    """Guided reverse process from seeded Gaussian latents; returns whitened ``z_0``."""
    if len(seeds) != batch:
        raise DataError("one seed per sample required")
    z = torch.stack([torch.randn(shape, generator=torch.Generator().manual_seed(int(s)), dtype=torch.float64) for s in seeds]).to(dtype)
    noise_gens = [torch.Generator().manual_seed(int(s) + 1) for s in seeds]
    ts = inference_steps(sched.K, guidance.steps)
    for j, t in enumerate(ts):
        k = torch.full((batch,), t, dtype=torch.long)
        eps_c = predict(z, k, cond)
        if guidance.w == 1.0:
            eps = cfg_combine(eps_c, torch.zeros_like(eps_c), 1.0)
        else:
            eps = cfg_combine(eps_c, predict(z, k, uncond), guidance.w)
        ab = sched.alpha_bar[t - 1].item()
        ab_prev = sched.alpha_bar[ts[j + 1] - 1].item() if j + 1 < len(ts) else 1.0
        z0 = (z - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
        if guidance.sampler == "ddim" or j + 1 == len(ts):
            z = math.sqrt(ab_prev) * z0 + math.sqrt(1.0 - ab_prev) * eps
        else:
            sigma = math.sqrt((1 - ab_prev) / (1 - ab) * (1 - ab / ab_prev))
            noise = torch.stack([torch.randn(shape, generator=g, dtype=torch.float64) for g in noise_gens]).to(dtype)
            z = math.sqrt(ab_prev) * z0 + math.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps + sigma * noise
    return z


@torch.no_grad()
def sample(
    text: str | Sequence[str],
    length: int | Sequence[int],
    guidance: GuidanceConfig,
    model: Denoiser,
    vae,
    sched: NoiseSchedule,
    seed: int | Sequence[int] = 1234,
    adapter=None,
    style: Tensor | None = None,
    controlnet=None,
    trajectory=None,
) -> list[np.ndarray]:
    """Generate motions (raw feature space, one ``(L, 263)`` array per text).

    ``adapter``/``style`` enable motion-prompt stylization and
    ``controlnet``/``trajectory`` enable hip control; the unconditional
    guidance branch nulls every condition.
    """
    if model is None or vae is None:
        raise DataError("sampling needs denoiser and VAE weights")
    texts = [text] if isinstance(text, str) else list(text)
    B = len(texts)
    lengths = [length] * B if isinstance(length, int) else list(length)
    seeds = [seed + i for i in range(B)] if isinstance(seed, int) else list(seed)
    for L in lengths:
        if not 1 <= L <= vae.cfg.max_len:
            raise DataError(f"invalid motion length {L}")
    dtype = next(model.parameters()).dtype
    cond = ConditionBundle(TextBatch.from_texts(texts, dtype))
    uncond = ConditionBundle(None)
    if style is not None:
        if adapter is None:
            raise DataError("motion prompt given without adapter weights")
        st = style.to(dtype)
        cond.style = st.expand(B, -1, -1) if st.dim() == 3 else st[None].expand(B, -1, -1)
    predict = _predictor(model, adapter, controlnet)
    if controlnet is not None:
        if trajectory is None:
            raise DataError("controlnet sampling needs a trajectory")
        cond.traj = controlnet.encode(trajectory, dtype).expand(B, -1, -1)
        uncond.traj = controlnet.null_features(dtype).expand(B, -1, -1)
    shape = (model.cfg.latent_tokens, model.cfg.latent_dim)
    z = sample_latents(predict, cond, uncond, B, shape, sched, guidance, seeds, dtype)
    z = vae.unscale_latent(z.to(next(vae.parameters()).dtype))
    out = []
    for i in range(B):
        m = vae.denormalize(vae.decode(z[i], lengths[i]))
        out.append(m.double().numpy())
    return out


def _predictor(model, adapter, controlnet):
    if controlnet is not None:
        return lambda z, k, c: controlnet.controlled_denoise(z, k, c, model, adapter=adapter)
    if adapter is not None:
        return lambda z, k, c: model(z, k, c, adapter=adapter)
    return lambda z, k, c: model(z, k, c)


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
