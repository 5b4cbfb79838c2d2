"""Differentiable tensor primitives, SGD parameter updates, and a
finite-difference gradient verification harness.

Forward/backward semantics are provided by torch autograd; this module pins
the contracts (shape rules, error behaviour, the exact update rule) that the
rest of the package relies on, independent of backend defaults.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import torch
import torch.nn.functional as F


class ShapeError(ValueError):
    """Tensor arguments have incompatible or malformed shapes."""


class GradientCheckError(RuntimeError):
    """The checked function produced a non-finite value."""


def conv2d(x: torch.Tensor, weight: torch.Tensor, stride: int = 1, padding: int = 0) -> torch.Tensor:
    """Cross-correlation of ``x`` (N,C,H,W) with ``weight`` (Co,C,kh,kw).

    Output spatial size is floor((H + 2*padding - kh)/stride) + 1 (same for W).
    Differentiable w.r.t. both operands.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.ndim}-D and {weight.ndim}-D")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[1]}, kernel expects {weight.shape[1]}")
    kh, kw = weight.shape[2], weight.shape[3]
    if kh > x.shape[2] + 2 * padding or kw > x.shape[3] + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {x.shape[2] + 2 * padding}x{x.shape[3] + 2 * padding}")
    return F.conv2d(x, weight, stride=stride, padding=padding)


def transposed_conv2d(x: torch.Tensor, weight: torch.Tensor, stride: int = 1, padding: int = 0) -> torch.Tensor:
    """Transposed convolution; ``weight`` is (C_in, C_out, kh, kw).

    Output spatial size is (H - 1)*stride - 2*padding + kh (same for W).
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"transposed_conv2d expects 4-D input and kernel, got {x.ndim}-D and {weight.ndim}-D")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"transposed_conv2d channel mismatch: input has {x.shape[1]}, kernel expects {weight.shape[0]}")
    return F.conv_transpose2d(x, weight, stride=stride, padding=padding)


def horizontal_slices(x: torch.Tensor, count: int) -> list[torch.Tensor]:
    """Split a (N,C,H,W) map into ``count`` contiguous horizontal bands.

    When H is not divisible, the first H % count bands are one row taller,
    so band heights never differ by more than 1.
    """
    if x.ndim != 4:
        raise ShapeError(f"expected a 4-D map, got {x.ndim}-D")
    height = x.shape[2]
    if count < 1 or count > height:
        raise ShapeError(f"cannot cut height {height} into {count} bands")
    base, extra = divmod(height, count)
    slices = []
    top = 0
    for i in range(count):
        h = base + (1 if i < extra else 0)
        slices.append(x[:, :, top:top + h, :])
        top += h
    return slices


@dataclass
class ParamState:
    """One trainable tensor plus its optimizer state."""

    name: str
    tensor: torch.nn.Parameter
    momentum_buffer: torch.Tensor
    apply_weight_decay: bool = True
    lr_scale: float = 1.0


def sgd_update(p: ParamState, lr: float, weight_decay: float = 0.0, momentum: float = 0.0) -> ParamState:
    """In-place SGD step: g' = grad + wd*w; buf = momentum*buf + g'; w -= lr*buf."""
    grad = p.tensor.grad
    if grad is None:
        raise ValueError(f"parameter {p.name!r} has no gradient")
    with torch.no_grad():
        g = grad
        if weight_decay != 0.0 and p.apply_weight_decay:
            g = g + weight_decay * p.tensor
        p.momentum_buffer.mul_(momentum).add_(g)
        p.tensor.sub_(lr * p.momentum_buffer)
    return p


class SGD:
    """Momentum SGD over uniquely named parameters.

    ``no_decay`` names are exempt from weight decay (used for the batch-norm
    scale/shift toggle). Single-writer: one optimizer owns its parameters.
    """

    def __init__(
        self,
        named_params: Iterable[tuple[str, torch.nn.Parameter]],
        momentum: float = 0.9,
        weight_decay: float = 0.0,
        no_decay: Sequence[str] = (),
        lr_scale_fn: Callable[[str], float] | None = None,
    ) -> None:
        self.momentum = momentum
        self.weight_decay = weight_decay
        no_decay = set(no_decay)
        self.params: list[ParamState] = []
        seen: set[str] = set()
        for name, p in named_params:
            if name in seen:
                raise ValueError(f"duplicate parameter name {name!r}")
            seen.add(name)
            self.params.append(ParamState(
                name, p, torch.zeros_like(p.detach()), name not in no_decay,
                lr_scale_fn(name) if lr_scale_fn else 1.0,
            ))

    def step(self, lr: float) -> None:
        for p in self.params:
            if p.tensor.grad is not None:
                sgd_update(p, lr * p.lr_scale, self.weight_decay, self.momentum)

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.grad = None

    def clip_grad_norm(self, max_norm: float, names: Callable[[str], bool] | None = None) -> float:
        """Scale gradients so their joint L2 norm is at most max_norm;
        ``names`` restricts clipping to a parameter subset."""
        grads = [
            p.tensor.grad for p in self.params
            if p.tensor.grad is not None and (names is None or names(p.name))
        ]
        total = math.sqrt(sum(float(g.pow(2).sum()) for g in grads))
        if max_norm > 0 and total > max_norm:
            scale = max_norm / total
            with torch.no_grad():
                for g in grads:
                    g.mul_(scale)
        return total


def gradient_check(
    f: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    h: float = 1e-5,
) -> float:
    """Max relative error between autograd and central finite differences.

    ``f`` must return a scalar. Inputs are copied to float64 leaves; the
    relative error per coordinate is |analytic - numeric| / max(1, |numeric|)
    and the maximum over all coordinates of all inputs is returned.
    """
    xs = [torch.as_tensor(x).detach().to(torch.float64).clone().requires_grad_(True) for x in inputs]
    out = f(*xs)
    if out.ndim != 0:
        raise ValueError("gradient_check needs a scalar-valued function")
    if not torch.isfinite(out):
        raise GradientCheckError(f"non-finite value {out.item()} at the base point")
    analytic = torch.autograd.grad(out, xs)
    worst = 0.0
    with torch.no_grad():
        for x, g in zip(xs, analytic):
            flat = x.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = float(f(*xs))
                flat[i] = orig - h
                fm = float(f(*xs))
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise GradientCheckError("non-finite value at a perturbed point")
                numeric = (fp - fm) / (2.0 * h)
                rel = abs(gflat[i].item() - numeric) / max(1.0, abs(numeric))
                worst = max(worst, rel)
    return worst
