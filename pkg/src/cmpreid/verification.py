"""Gradient verification suites: every differentiable primitive and all four
loss terms against float64 central differences."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn.functional as F

from . import losses, substrate

Check = tuple[Callable[..., torch.Tensor], list[torch.Tensor]]


def _t(rng: np.random.Generator, *shape: int) -> torch.Tensor:
    return torch.from_numpy(rng.standard_normal(shape))


def _away_from_zero(x: torch.Tensor, gap: float = 0.15) -> torch.Tensor:
    sign = torch.where(x >= 0, 1.0, -1.0)
    return torch.where(x.abs() < gap, x + gap * sign, x)


def _wsum(rng: np.random.Generator, shape: tuple[int, ...]) -> Callable[[torch.Tensor], torch.Tensor]:
    w = torch.from_numpy(rng.standard_normal(shape))
    return lambda y: (y * w).sum()


def primitive_checks(seed: int) -> dict[str, Check]:
    """(f, inputs) pairs for the primitive set; inputs avoid ReLU kinks."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    checks: dict[str, Check] = {}

    x = _t(rng, 1, 2, 5, 5)
    k = _t(rng, 3, 2, 3, 3)
    w = _wsum(rng, (1, 3, 5, 5))
    checks["conv2d"] = (lambda a, b: w(substrate.conv2d(a, b, stride=1, padding=1)), [x, k])

    xt = _t(rng, 1, 2, 3, 3)
    kt = _t(rng, 2, 3, 4, 4)
    wt = _wsum(rng, (1, 3, 6, 6))
    checks["transposed_conv2d"] = (
        lambda a, b: wt(substrate.transposed_conv2d(a, b, stride=2, padding=1)), [xt, kt])

    xr = _away_from_zero(_t(rng, 3, 4))
    wr = _wsum(rng, (3, 4))
    checks["relu"] = (lambda a: wr(F.relu(a)), [xr])

    xs = _t(rng, 3, 4)
    ws = _wsum(rng, (3, 4))
    checks["sigmoid"] = (lambda a: ws(torch.sigmoid(a)), [xs])

    xb = _t(rng, 4, 3, 2, 2)
    scale = _t(rng, 3).abs() + 0.5
    shift = _t(rng, 3)
    wb = _wsum(rng, (4, 3, 2, 2))
    checks["batch_norm"] = (
        lambda a, s, b: wb(F.batch_norm(a, None, None, s, b, training=True)),
        [xb, scale, shift])

    xg = _t(rng, 2, 3, 4, 4)
    wg = _wsum(rng, (2, 3))
    checks["global_avg_pool"] = (lambda a: wg(a.mean(dim=(2, 3))), [xg])

    xa = _t(rng, 3, 4)
    wa_mat = _t(rng, 4, 5)
    ba = _t(rng, 5)
    wa = _wsum(rng, (3, 5))
    checks["affine"] = (lambda a, m, b: wa(a @ m + b), [xa, wa_mat, ba])

    xl = _t(rng, 3, 5)
    wl = _wsum(rng, (3, 5))
    checks["log_softmax"] = (lambda a: wl(F.log_softmax(a, dim=-1)), [xl])

    c1, c2 = _t(rng, 1, 2, 3, 3), _t(rng, 1, 3, 3, 3)
    wc = _wsum(rng, (1, 5, 3, 3))
    checks["concat_channel"] = (lambda a, b: wc(torch.cat([a, b], dim=1)), [c1, c2])

    b1, b2 = _t(rng, 2, 3, 2, 2), _t(rng, 1, 3, 2, 2)
    wbc = _wsum(rng, (3, 3, 2, 2))
    checks["concat_batch"] = (lambda a, b: wbc(torch.cat([a, b], dim=0)), [b1, b2])

    e1, e2 = _t(rng, 3, 4), _t(rng, 3, 4)
    we = _wsum(rng, (3, 4))
    checks["elementwise_product"] = (lambda a, b: we(a * b), [e1, e2])

    xh = _t(rng, 1, 2, 5, 4)
    hws = [_wsum(rng, (1, 2, h, 4)) for h in (2, 2, 1)]
    checks["horizontal_slices"] = (
        lambda a: sum(w(s) for w, s in zip(hws, substrate.horizontal_slices(a, 3))), [xh])
    return checks


def _hctri_safe_centers(rng: np.random.Generator, margin: float, min_gap: float = 1e-3) -> torch.Tensor:
    """Centers away from hinge kinks, min ties, and zero distances."""
    for _ in range(1000):
        centers = torch.from_numpy(rng.standard_normal((3, 2, 4)))
        flat = centers.reshape(6, -1)
        dist = torch.cdist(flat, flat)
        ids = torch.arange(3).repeat_interleave(2)
        ok = True
        for a in range(6):
            pos = dist[a, 2 * (a // 2) + (1 - a % 2)]
            negs = sorted(dist[a, j].item() for j in range(6) if ids[j] != ids[a])
            residual = margin + pos.item() - negs[0]
            if abs(residual) < min_gap or negs[1] - negs[0] < min_gap or pos.item() < min_gap or negs[0] < min_gap:
                ok = False
                break
        if ok:
            return centers
    raise RuntimeError("could not sample kink-free centers")


def loss_checks(seed: int) -> dict[str, Check]:
    """(f, inputs) pairs for the four loss terms; hinge/tie kinks avoided."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    checks: dict[str, Check] = {}

    gt = _t(rng, 2, 3, 4, 3).abs()
    pred = _t(rng, 2, 3, 4, 3)
    checks["pose_loss"] = (lambda p: losses.pose_loss(gt, p), [pred])

    labels = torch.from_numpy(rng.integers(0, 4, size=2))
    li, lp = _t(rng, 2, 2, 4), _t(rng, 2, 2, 4)
    checks["identity_loss"] = (lambda a, b: losses.identity_loss(a, b, labels), [li, lp])

    margin = 0.3
    centers = _hctri_safe_centers(rng, margin)
    checks["hctri_loss"] = (lambda c: losses.hctri_loss(c, margin), [centers])

    teacher = _t(rng, 2, 4)
    si, sp = _t(rng, 2, 1, 4), _t(rng, 2, 1, 4)
    checks["kd_loss"] = (lambda a, b: losses.kd_loss(teacher, a, b), [si, sp])
    return checks


def run_suite(
    seeds: Iterable[int],
    tol: float = 1e-5,
    include_primitives: bool = True,
    include_losses: bool = True,
) -> tuple[bool, list[tuple[str, float]]]:
    """Worst relative error per check name across all seeds; passes when
    every error is within ``tol``."""
    worst: dict[str, float] = {}
    for seed in seeds:
        suites = []
        if include_primitives:
            suites.append(primitive_checks(seed))
        if include_losses:
            suites.append(loss_checks(seed))
        for suite in suites:
            for name, (f, inputs) in suite.items():
                err = substrate.gradient_check(f, inputs)
                worst[name] = max(worst.get(name, 0.0), err)
    rows = sorted(worst.items())
    return all(err <= tol for _, err in rows), rows
