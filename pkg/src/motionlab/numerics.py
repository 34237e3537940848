"""Dense tensor math, seeded randomness and the AdamW update.

Tensors are ``torch.Tensor`` on CPU; autograd provides the reverse-mode
gradients. The helpers here add the contracts the rest of the package relies
on: shape checks, hard failure on non-finite values, a counted random stream,
and a central-difference gradient checker that is independent of autograd.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import torch
from torch import Tensor


class DimensionError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class ConfigError(ValueError):
    pass


class StateError(RuntimeError):
    pass


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite values in {what}")
    return x


@contextlib.contextmanager
def float64_mode():
    """Switch the default dtype to float64 for the duration of the block."""
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        torch.set_default_dtype(prev)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise DimensionError(f"matmul inner extents disagree: {tuple(a.shape)} x {tuple(b.shape)}")
    return check_finite(a @ b, "matmul output")


def softmax_lastdim(x: Tensor, check: bool = True) -> Tensor:
    """Max-subtracted softmax over the last axis.

    ``check=False`` skips the finiteness scan; hot paths verify their final
    output instead.
    """
    if x.dim() == 0 or x.shape[-1] == 0:
        raise DimensionError("softmax over an empty last dimension")
    out = torch.softmax(x, dim=-1)
    return check_finite(out, "softmax output") if check else out


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    if eps <= 0:
        raise ConfigError("eps must be positive")
    if gain.shape != x.shape[-1:]:
        raise DimensionError(f"gain extent {tuple(gain.shape)} != last extent {x.shape[-1]}")
    if x.shape[-1] == 0:
        return x
    scale = torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)
    return x * scale * gain


@dataclass
class RandomSource:
    """Seeded random stream; ``position`` counts values drawn so far."""

    seed: int
    position: int = 0
    _gen: torch.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self._gen = torch.Generator().manual_seed(int(self.seed) & 0xFFFF_FFFF_FFFF_FFFF)

    def normal(self, shape: Sequence[int], dtype: torch.dtype | None = None) -> Tensor:
        shape = tuple(int(s) for s in shape)
        self.position += math.prod(shape)
        return torch.randn(shape, generator=self._gen, dtype=dtype or torch.get_default_dtype())

    def uniform(self, shape: Sequence[int] = ()) -> Tensor:
        shape = tuple(int(s) for s in shape)
        self.position += max(1, math.prod(shape))
        return torch.rand(shape, generator=self._gen, dtype=torch.get_default_dtype())

    def randint(self, high: int) -> int:
        self.position += 1
        return int(torch.randint(high, (1,), generator=self._gen).item())

    def integers(self, high: int, n: int) -> Tensor:
        self.position += n
        return torch.randint(high, (n,), generator=self._gen)

    def spawn(self) -> "RandomSource":
        """Derive an independent child stream (advances this one by one draw)."""
        self.position += 1
        child = int(torch.randint(0, 2**62, (1,), generator=self._gen).item())
        return RandomSource(child)


def draw_normal(src: RandomSource, shape: Sequence[int]) -> Tensor:
    return src.normal(shape)


@dataclass
class OptimizerState:
    lr: float
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    exp_avg: dict[int, Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[int, Tensor] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: Sequence[Tensor], grads: Sequence[Tensor | None], state: OptimizerState,
               names: Sequence[str] | None = None) -> None:
    """One AdamW update in place. Weight decay acts on the parameter directly.

    Gradients of ``None`` are treated as zero. A non-finite gradient aborts the
    whole step before anything is modified.
    """
    if len(params) != len(grads):
        raise DimensionError("params and grads differ in length")
    names = list(names) if names is not None else [f"param[{i}]" for i in range(len(params))]
    for p, g, name in zip(params, grads, names):
        if g is not None:
            if g.shape != p.shape:
                raise DimensionError(f"gradient shape mismatch for {name}")
            if not torch.isfinite(g).all():
                raise NumericError(f"non-finite gradient for {name}")

    b1, b2 = state.betas
    state.step += 1
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    with torch.no_grad():
        for i, (p, g) in enumerate(zip(params, grads)):
            if g is None:
                g = torch.zeros_like(p)
            m = state.exp_avg.setdefault(i, torch.zeros_like(p))
            v = state.exp_avg_sq.setdefault(i, torch.zeros_like(p))
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.mul_(1.0 - state.lr * state.weight_decay)
            denom = (v / bc2).sqrt_().add_(state.eps)
            p.addcdiv_(m / bc1, denom, value=-state.lr)


class AdamW:
    """Thin stateful wrapper over :func:`adamw_step` for a fixed parameter list."""

    def __init__(self, params: Iterable[Tensor], lr: float, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 names: Sequence[str] | None = None):
        self.params = list(params)
        self.names = names
        self.state = OptimizerState(lr=lr, weight_decay=weight_decay, betas=betas, eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adamw_step(self.params, [p.grad for p in self.params], self.state, self.names)


def gradient_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                   n_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between autograd and central differences.

    ``f`` is re-evaluated with each sampled coordinate nudged by ``±h``; it
    must read ``params`` afresh on every call. When ``n_coords`` is None every
    coordinate is checked, otherwise that many are sampled uniformly across the
    concatenated parameters.
    """
    if h <= 0:
        raise ConfigError("h must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    if not torch.isfinite(loss):
        raise NumericError("objective is not finite")
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    analytic = [torch.zeros_like(p) if g is None else g for p, g in zip(params, analytic)]

    sizes = [p.numel() for p in params]
    total = sum(sizes)
    if n_coords is None or n_coords >= total:
        flat_ids = range(total)
    else:
        gen = torch.Generator().manual_seed(seed)
        flat_ids = torch.randperm(total, generator=gen)[:n_coords].tolist()

    offsets = [0]
    for s in sizes:
        offsets.append(offsets[-1] + s)

    worst = 0.0
    with torch.no_grad():
        for fid in flat_ids:
            k = next(j for j in range(len(params)) if offsets[j] <= fid < offsets[j + 1])
            idx = fid - offsets[k]
            flat = params[k].view(-1)
            orig = flat[idx].item()
            flat[idx] = orig + h
            fp = f().item()
            flat[idx] = orig - h
            fm = f().item()
            flat[idx] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError("objective is not finite under perturbation")
            central = (fp - fm) / (2 * h)
            a = analytic[k].reshape(-1)[idx].item()
            err = abs(a - central) / (abs(a) + abs(central) + 1e-12)
            worst = max(worst, err)
    return worst
