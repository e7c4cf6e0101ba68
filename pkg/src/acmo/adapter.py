"""Motion Adapter: freeze/finetune modes and motion-prompt stylization."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .data import MotionDataset
from .diffusion import (
    ConditionBundle,
    Denoiser,
    DenoiserConfig,
    GuidanceConfig,
    NoiseSchedule,
    TextBatch,
    adm_loss,
    build_corpus,
    random_batch,
    sample,
)
from .errors import DataError, FrozenTensorError
from .layers import Attention, LayerNorm
from .numerics import AdamW, tensor_digest

log = logging.getLogger(__name__)

MODES = ("a", "b", "c")


@dataclass
class StyleCondition:
    prompt_latent: Tensor  # (T, C) whitened VAE posterior mean of the prompt clip
    label: str | None = None


@torch.no_grad()
def style_from_motion(motion: np.ndarray, vae, label: str | None = None) -> StyleCondition:
    """Encode a raw motion prompt with the (frozen) VAE encoder."""
    dtype = next(vae.parameters()).dtype
    m = vae.normalize(torch.as_tensor(motion, dtype=dtype))
    mean, _ = vae.encode(m)
    return StyleCondition(vae.scale_latent(mean), label)


class MotionAdapter(nn.Module):
    """Trainable additions to a frozen denoiser.

    Mode ``a`` adds a gated parallel self-attention per block.  Mode ``c``
    adds gated text cross-attention key/value projections, a prompt transform
    (linear + layer norm) and gated self-to-cross attention that reuses the
    frozen self-attention weights with the prompt as query.  Mode ``b`` adds
    nothing: it retrains the base self-attention instead.  All gates start at
    zero so a fresh adapter is an exact no-op.
    """

    def __init__(self, cfg: DenoiserConfig, mode: str = "c"):
        super().__init__()
        if mode not in MODES:
            raise DataError(f"unknown adapter mode {mode!r}")
        self.mode = mode
        self.cfg = cfg
        n, w = cfg.layers, cfg.width
        self.parallel = None
        self.text_k = self.text_v = None
        self.prompt_proj = self.prompt_norm = None
        if mode == "a":
            self.parallel = nn.ModuleList(Attention(w, cfg.heads) for _ in range(n))
            self.self_gate = nn.Parameter(torch.zeros(n))
        elif mode == "c":
            self.text_k = nn.ModuleList(nn.Linear(w, w) for _ in range(n))
            self.text_v = nn.ModuleList(nn.Linear(w, w) for _ in range(n))
            self.text_gate = nn.Parameter(torch.zeros(n))
            self.prompt_proj = nn.Linear(cfg.latent_dim, w)
            self.prompt_norm = LayerNorm(w)
            self.s2c_gate = nn.Parameter(torch.zeros(n))

    @property
    def has_text_branch(self) -> bool:
        return self.text_k is not None

    def gate(self, i: int, kind: str) -> Tensor:
        names = {"text": "text_gate", "self": "self_gate", "s2c": "s2c_gate"}
        if kind not in names or not hasattr(self, names[kind]):
            raise DataError(f"adapter mode {self.mode!r} has no {kind!r} gate")
        return getattr(self, names[kind])[i]

    def text_kv(self, i: int, context: Tensor) -> tuple[Tensor, Tensor]:
        return self.text_k[i](context), self.text_v[i](context)

    def prompt_tokens(self, cond: ConditionBundle, dtype):
        if self.prompt_proj is None or cond.style is None:
            return None
        tokens = self.prompt_norm(self.prompt_proj(cond.style.to(dtype)))
        keep = None
        if cond.style_keep is not None:
            keep = cond.style_keep.to(dtype)[:, None, None]
        return tokens, keep

    def self_terms(self, i: int, blk, h: Tensor, out: Tensor, style) -> Tensor:
        if self.parallel is not None:
            out = out + self.self_gate[i] * self.parallel[i](h, h)
        if style is not None:
            tokens, keep = style
            term = self_to_cross(h, tokens, blk.self_attn)
            if keep is not None:
                term = term * keep
            out = out + self.s2c_gate[i] * term
        return out


def self_to_cross(h: Tensor, prompt_tokens: Tensor, self_attn: Attention) -> Tensor:
    """Self-attention with its query replaced by transformed motion-prompt tokens."""
    if prompt_tokens.shape[-2:] != h.shape[-2:]:
        raise DataError(f"prompt tokens {tuple(prompt_tokens.shape)} do not match stream {tuple(h.shape)}")
    return self_attn(prompt_tokens, h)


@dataclass
class ParameterPartition:
    frozen: set[str]
    trainable: set[str]
    mode: str

    def __post_init__(self):
        if self.frozen & self.trainable:
            raise DataError("partition is not disjoint")


def _names(module: nn.Module, prefix: str) -> set[str]:
    return {f"{prefix}.{n}" for n, _ in module.named_parameters()}


def partition_parameters(base: Denoiser, mode: str, adapter: MotionAdapter | None = None) -> ParameterPartition:
    """Split ``denoiser.*`` and ``adapter.*`` tensor names into frozen/trainable sets."""
    if mode not in MODES:
        raise DataError(f"unknown adapter mode {mode!r}")
    adapter = adapter if adapter is not None else MotionAdapter(base.cfg, mode)
    base_names = _names(base, "denoiser")
    adapter_names = _names(adapter, "adapter")
    if mode == "b":
        trainable = {n for n in base_names if ".self_attn." in n}
    else:
        trainable = set(adapter_names)
    frozen = (base_names | adapter_names) - trainable
    return ParameterPartition(frozen, trainable, mode)


def named_tensors(base: Denoiser, adapter: MotionAdapter) -> dict[str, Tensor]:
    out = {f"denoiser.{n}": p for n, p in base.named_parameters()}
    out.update({f"adapter.{n}": p for n, p in adapter.named_parameters()})
    return out


def digests(tensors: dict[str, Tensor], names) -> dict[str, str]:
    return {n: tensor_digest(tensors[n]) for n in sorted(names)}


def count_params(tensors: dict[str, Tensor], names) -> int:
    return sum(tensors[n].numel() for n in names)


@dataclass
class AdapterTrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 0.0
    uncond_prob: float = 0.1
    use_prompt: bool = True
    log_every: int = 20


def finetune_adapter(
    base: Denoiser,
    vae,
    styled: MotionDataset,
    mode: str,
    sched: NoiseSchedule,
    config: AdapterTrainConfig | None = None,
    seed: int = 1234,
) -> tuple[MotionAdapter, Denoiser, list[float]]:
    """Train the mode's trainable partition on ``styled``; returns (adapter, denoiser, losses).

    The base denoiser passed in is never modified; the returned denoiser is a
    copy that differs from it only in mode ``b``.  Every frozen tensor is
    checked bit for bit after training.
    """
    if len(styled) == 0:
        raise DataError("empty styled dataset")
    config = config or AdapterTrainConfig()
    dtype = next(base.parameters()).dtype
    torch.manual_seed(seed)
    tuned = copy.deepcopy(base)
    adapter = MotionAdapter(base.cfg, mode).to(dtype)
    part = partition_parameters(tuned, mode, adapter)
    tensors = named_tensors(tuned, adapter)
    before = digests(tensors, part.frozen)
    for name, p in tensors.items():
        p.requires_grad_(name in part.trainable)

    corpus = build_corpus(styled, vae, dtype)
    prompts = corpus.z0  # each clip's own latent doubles as its motion prompt pool
    by_style: dict[str, list[int]] = {}
    for i, c in enumerate(styled.clips):
        by_style.setdefault(c.style, []).append(i)

    opt = AdamW(((n, tensors[n]) for n in sorted(part.trainable)), lr=config.lr, weight_decay=config.weight_decay)
    gen = torch.Generator().manual_seed(seed)
    guidance = GuidanceConfig(uncond_prob=config.uncond_prob)
    n = len(styled)
    steps_per_epoch = max(1, -(-n // config.batch_size))
    history: list[float] = []
    use_prompt = config.use_prompt and mode == "c"
    for epoch in range(config.epochs):
        order = torch.randperm(n, generator=gen)
        for s in range(steps_per_epoch):
            idx = order[s * config.batch_size : (s + 1) * config.batch_size]
            batch = random_batch(corpus.z0[idx], sched, gen)
            cond = ConditionBundle(TextBatch.from_embeddings([corpus.texts[i] for i in idx.tolist()], dtype))
            if use_prompt:
                pick = []
                for i in idx.tolist():
                    pool = by_style[styled.clips[i].style]
                    pick.append(pool[int(torch.randint(len(pool), (1,), generator=gen))])
                cond.style = prompts[pick]
            loss = adm_loss(batch, cond, tuned, sched, guidance, gen, predict=lambda z, k, c: tuned(z, k, c, adapter=adapter))
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.append(loss.item())
        if config.log_every and epoch % config.log_every == 0:
            log.info("adapter[%s] epoch %d loss %.4f", mode, epoch, history[-1])

    for p in tensors.values():
        p.requires_grad_(True)
    after = digests(tensors, part.frozen)
    changed = [k for k in before if before[k] != after[k]]
    if changed:
        raise FrozenTensorError(f"frozen tensors changed during finetuning: {changed[:5]}")
    adapter.eval()
    tuned.eval()
    return adapter, tuned, history


def generate_stylized(
    text,
    style: StyleCondition | None,
    guidance: GuidanceConfig,
    model: Denoiser,
    adapter: MotionAdapter,
    vae,
    sched: NoiseSchedule,
    length: int = 40,
    seed=1234,
):
    if adapter is None:
        raise DataError("stylized generation needs adapter weights")
    prompt = style.prompt_latent if (style is not None and adapter.mode == "c") else None
    return sample(text, length, guidance, model, vae, sched, seed, adapter=adapter, style=prompt)
