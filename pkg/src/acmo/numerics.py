"""Dense kernels, the AdamW optimizer and a finite-difference gradient checker.

Reverse-mode differentiation is torch autograd: every kernel here is written
from differentiable torch primitives so the recorded graph doubles as the
gradient tape.  Tests run at float64, training at float32.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import torch
from torch import Tensor

from .errors import FrozenTensorError, NumericError, ShapeError

__all__ = [
    "softmax",
    "scaled_dot_attention",
    "layer_norm",
    "gelu",
    "OptimizerState",
    "adamw_step",
    "AdamW",
    "check_gradient",
    "check_module_gradient",
    "tensor_digest",
    "warmup_cosine",
]


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    """Max-subtracted softmax along ``dim``."""
    x = torch.as_tensor(x)
    if x.numel() == 0 or x.shape[dim] == 0:
        raise ShapeError("softmax of an empty vector")
    # the shift is a constant for the gradient because softmax is shift invariant
    shift = x.amax(dim=dim, keepdim=True).detach()
    shift = torch.where(torch.isfinite(shift), shift, torch.zeros_like(shift))
    e = torch.exp(x - shift)
    return e / e.sum(dim=dim, keepdim=True)


def scaled_dot_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: int = 1,
    key_mask: Tensor | None = None,
) -> Tensor:
    """Multi-head ``softmax(q k^T / sqrt(d)) v``.

    ``q`` is ``(..., Tq, C)``, ``k`` is ``(..., Tk, C)`` and ``v`` is
    ``(..., Tk, Cv)``.  Channels are split evenly into ``heads`` groups, each
    head attends independently and the results are concatenated back.
    ``key_mask`` is a boolean ``(..., Tk)`` marking valid keys; every query
    must see at least one valid key.
    """
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key rows {k.shape[-2]} != value rows {v.shape[-2]}")
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    c, cv = q.shape[-1], v.shape[-1]
    if heads < 1 or c % heads or cv % heads:
        raise ShapeError(f"channels ({c}, {cv}) not divisible by {heads} heads")
    d = c // heads

    def split(t: Tensor) -> Tensor:
        return t.reshape(*t.shape[:-1], heads, t.shape[-1] // heads).transpose(-3, -2)

    qh, kh, vh = split(q), split(k), split(v)
    logits = qh @ kh.transpose(-1, -2) / math.sqrt(d)
    if key_mask is not None:
        if not bool(key_mask.any(dim=-1).all()):
            raise ShapeError("attention row with no valid keys")
        mask = key_mask[..., None, None, :].to(torch.bool)
        logits = logits.masked_fill(~mask, float("-inf"))
    w = softmax(logits, dim=-1)
    out = w @ vh
    return out.transpose(-3, -2).reshape(*q.shape[:-1], cv)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    n = x.shape[-1]
    if n == 0:
        raise ShapeError("layer_norm over a zero-length dimension")
    if gamma.shape[-1] != n or beta.shape[-1] != n:
        raise ShapeError(f"gamma/beta length {gamma.shape[-1]} != {n}")
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps) * gamma + beta


def gelu(x):
    """Exact GELU ``x * Phi(x)``; accepts python floats or tensors."""
    if isinstance(x, Tensor):
        return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


@dataclass
class OptimizerState:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    exp_avg: dict[str, Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, Tensor] = field(default_factory=dict)


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Tensor | None],
    state: OptimizerState,
) -> tuple[dict[str, Tensor], OptimizerState]:
    """One AdamW update, in place on ``params``.

    Weight decay multiplies the parameter by ``1 - lr * weight_decay`` before
    the moment update is applied, independent of the gradient.
    """
    if state.step < 0:
        raise ValueError("negative optimizer step counter")
    for name, g in grads.items():
        if name not in params:
            raise ShapeError(f"gradient for unknown parameter {name!r}")
        if g is not None and g.shape != params[name].shape:
            raise ShapeError(f"{name}: grad shape {tuple(g.shape)} != {tuple(params[name].shape)}")
        if g is not None and not bool(torch.isfinite(g).all()):
            raise NumericError(f"non-finite gradient for {name!r}")

    state.step += 1
    b1, b2 = state.betas
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = state.exp_avg.get(name)
            if m is None:
                m = state.exp_avg[name] = torch.zeros_like(p)
                state.exp_avg_sq[name] = torch.zeros_like(p)
            s = state.exp_avg_sq[name]
            if state.weight_decay:
                p.mul_(1.0 - state.lr * state.weight_decay)
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            s.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (s / bc2).sqrt_().add_(state.eps)
            p.addcdiv_(m, denom, value=-state.lr / bc1)
    return dict(params), state


class AdamW:
    """Named-parameter AdamW that refuses to touch frozen tensors."""

    def __init__(
        self,
        named_params: Iterable[tuple[str, Tensor]],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        frozen: Iterable[str] = (),
    ):
        self.params = dict(named_params)
        self.frozen = set(frozen)
        clash = self.frozen & set(self.params)
        if clash:
            raise FrozenTensorError(f"frozen tensors handed to optimizer: {sorted(clash)[:5]}")
        self.state = OptimizerState(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        grads = {n: p.grad for n, p in self.params.items()}
        adamw_step(self.params, grads, self.state)

    def clip_grad_norm(self, max_norm: float) -> float:
        """Rescale gradients in place so their global L2 norm is at most ``max_norm``."""
        grads = [p.grad for p in self.params.values() if p.grad is not None]
        if not grads:
            return 0.0
        total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads))
        if max_norm > 0 and total > max_norm:
            for g in grads:
                g.mul_(max_norm / (total + 1e-12))
        return total


def warmup_cosine(step: int, total: int, base_lr: float, warmup: int = 0, floor: float = 0.1) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to ``floor * base_lr``."""
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(1, total - warmup)
    t = min(1.0, (step - warmup) / span)
    return base_lr * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * t)))


def check_gradient(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    indices: Iterable[int] | None = None,
) -> float:
    """Max relative error between autograd and central differences.

    The denominator is ``max(|a|, |b|, 1e-8)``.  ``indices`` restricts the
    comparison to selected flat coordinates of ``x``.
    """
    x = x.detach().clone().requires_grad_(True)
    y = f(x)
    if y.numel() != 1:
        raise ShapeError("check_gradient needs a scalar function")
    (g,) = torch.autograd.grad(y, x, allow_unused=True)
    if g is None:
        g = torch.zeros_like(x)
    analytic = g.detach().reshape(-1)

    flat = x.detach().clone().reshape(-1)
    idx = range(flat.numel()) if indices is None else list(indices)
    worst = 0.0
    with torch.no_grad():
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + h
            fp = f(flat.view_as(x)).item()
            flat[i] = orig - h
            fm = f(flat.view_as(x)).item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError(f"function not evaluable near coordinate {i}")
            numeric = (fp - fm) / (2.0 * h)
            a = analytic[i].item()
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


def check_module_gradient(
    loss: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    per_tensor: int = 4,
    seed: int = 0,
    floor: float = 1e-8,
) -> float:
    """Finite-difference check of ``loss()`` against selected parameter coordinates.

    ``params`` maps names to leaf tensors that ``loss`` reads.  Up to
    ``per_tensor`` seeded coordinates of each tensor are perturbed in place.
    ``floor`` is the denominator floor; raise it when the loss is large enough
    that central-difference roundoff (about ``1e-16 * |loss| / h``) swamps
    coordinates with tiny gradients.
    """
    names = list(params)
    tensors = [params[n] for n in names]
    y = loss()
    if y.numel() != 1:
        raise ShapeError("check_module_gradient needs a scalar loss")
    grads = torch.autograd.grad(y, tensors, allow_unused=True)
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    with torch.no_grad():
        for name, p, g in zip(names, tensors, grads):
            analytic = torch.zeros(p.numel(), dtype=p.dtype) if g is None else g.detach().reshape(-1)
            flat = p.view(-1)
            k = min(per_tensor, flat.numel())
            for i in torch.randperm(flat.numel(), generator=gen)[:k].tolist():
                orig = flat[i].item()
                flat[i] = orig + h
                fp = loss().item()
                flat[i] = orig - h
                fm = loss().item()
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NumericError(f"loss not evaluable near {name}[{i}]")
                numeric = (fp - fm) / (2.0 * h)
                a = analytic[i].item()
                worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
    return worst


def tensor_digest(t: Tensor) -> str:
    import hashlib

    arr = t.detach().cpu().contiguous()
    hasher = hashlib.sha256()
    hasher.update(str(arr.dtype).encode())
    hasher.update(str(tuple(arr.shape)).encode())
    hasher.update(arr.numpy().tobytes())
    return hasher.hexdigest()
