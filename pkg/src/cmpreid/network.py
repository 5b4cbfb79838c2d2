"""Two-stream cross-modality re-identification network.

Per-modality stems feed a shared trunk. A pose branch regresses keypoint
heatmaps and hands its refined features back as sigmoid attention over the
re-id map; stripe heads produce per-band embeddings and logits for both
branches, and a global teacher head over the concatenated maps provides
soft targets for distillation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
import torch
from torch import nn

from .config import ScaleConfig
from .substrate import ShapeError, horizontal_slices

if TYPE_CHECKING:  # pragma: no cover
    from .data import MiniBatch


class BatchError(ValueError):
    """Malformed batch composition."""


@dataclass
class FeatureBundle:
    """Every named intermediate of one forward pass.

    Pose-branch and teacher fields are None when the corresponding
    component is disabled; ``mask`` is None too (gating acts as all-ones).
    """

    shared: torch.Tensor
    reid_raw: torch.Tensor
    reid_masked: torch.Tensor
    stripe_feats_reid: torch.Tensor          # N x P x fc_dim
    logits_reid: torch.Tensor                # N x P x num_identities
    pose_pre: torch.Tensor | None = None     # trunk-resolution pose features
    pose_up: torch.Tensor | None = None      # heatmap-resolution pose features
    pose_refined: torch.Tensor | None = None
    heatmaps: torch.Tensor | None = None     # predicted keypoint heatmaps
    pose_down: torch.Tensor | None = None    # refined features back at trunk resolution
    pose_final: torch.Tensor | None = None   # aligned with the re-id map
    mask: torch.Tensor | None = None
    stripe_feats_pose: torch.Tensor | None = None
    logits_pose: torch.Tensor | None = None
    teacher_feat: torch.Tensor | None = None
    teacher_logits: torch.Tensor | None = None


class Bottleneck(nn.Module):
    """1x1-3x3-1x1 residual block (mid width = out/4), projection shortcut
    only when the shape changes."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1) -> None:
        super().__init__()
        mid = out_ch // 4
        self.conv1 = nn.Conv2d(in_ch, mid, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid)
        self.conv2 = nn.Conv2d(mid, mid, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(mid)
        self.conv3 = nn.Conv2d(mid, out_ch, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )
        else:
            self.shortcut = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return self.relu(out + skip)


def res_stage(in_ch: int, out_ch: int, stride: int, blocks: int = 2) -> nn.Sequential:
    layers = [Bottleneck(in_ch, out_ch, stride)]
    layers += [Bottleneck(out_ch, out_ch, 1) for _ in range(blocks - 1)]
    return nn.Sequential(*layers)


class ModalityStem(nn.Module):
    """Per-modality front end: 7x7/2 conv + maxpool, then one res stage."""

    def __init__(self, channels: tuple[int, int, int]) -> None:
        super().__init__()
        self.conv = nn.Conv2d(3, channels[0], 7, stride=2, padding=3, bias=False)
        self.bn = nn.BatchNorm2d(channels[0])
        self.relu = nn.ReLU(inplace=True)
        self.pool = nn.MaxPool2d(3, stride=2, padding=1)
        self.stage = res_stage(channels[0], channels[1], stride=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stage(self.pool(self.relu(self.bn(self.conv(x)))))


class UShapedBlock(nn.Module):
    """Two-level encoder/decoder with an additive skip connection."""

    def __init__(self, ch: int) -> None:
        super().__init__()
        self.enc1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.enc2 = nn.Conv2d(ch, ch, 3, stride=2, padding=1)
        self.mid = nn.Conv2d(ch, ch, 3, padding=1)
        self.up = nn.ConvTranspose2d(ch, ch, 4, stride=2, padding=1)
        self.dec = nn.Conv2d(ch, ch, 3, padding=1)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        e1 = self.relu(self.enc1(x))
        e2 = self.relu(self.enc2(e1))
        m = self.relu(self.mid(e2))
        u = self.relu(self.up(m))
        if u.shape != e1.shape:
            raise ShapeError(f"decoder {tuple(u.shape)} does not match its skip source {tuple(e1.shape)}")
        return self.relu(self.dec(u + e1))


class RefineBlock(nn.Module):
    def __init__(self, ch: int) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.relu(x + self.conv2(self.relu(self.conv1(x))))


class RefinementModule(nn.Module):
    """Feature-refinement stage (U block + three refine blocks) and a
    heatmap head (3x3+ReLU then linear 1x1)."""

    def __init__(self, ch: int, keypoint_count: int) -> None:
        super().__init__()
        self.feature_stage = nn.Sequential(
            UShapedBlock(ch), RefineBlock(ch), RefineBlock(ch), RefineBlock(ch)
        )
        self.head_conv = nn.Conv2d(ch, ch, 3, padding=1)
        self.head_out = nn.Conv2d(ch, keypoint_count, 1)
        self.relu = nn.ReLU(inplace=True)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.feature_stage(x)

    def heatmaps(self, refined: torch.Tensor) -> torch.Tensor:
        return self.head_out(self.relu(self.head_conv(refined)))


class PoseBranch(nn.Module):
    """Auxiliary branch: heatmap regression plus keypoint-feature transfer
    back to the re-id map's resolution and width. Plain conv+ReLU throughout
    (no batch norm)."""

    def __init__(self, cfg: ScaleConfig) -> None:
        super().__init__()
        cp = cfg.pose_channels
        self.pre = nn.Conv2d(cfg.stem_channels[2], cp, 3, padding=1)
        self.up = nn.ConvTranspose2d(cp, cp, 4, stride=2, padding=1)
        self.refine = RefinementModule(cp, cfg.keypoint_count)
        self.down = nn.Conv2d(cp, cp, 3, stride=2, padding=1)
        self.fuse1 = nn.Conv2d(cp, cfg.fuse_width, 3, stride=2, padding=1)
        self.fuse2 = nn.Conv2d(cfg.fuse_width, cfg.final_channels, 1)
        self.relu = nn.ReLU(inplace=True)


class StripeHeads(nn.Module):
    """One embedding + classifier pair per horizontal stripe."""

    def __init__(self, in_channels: int, stripes: int, fc_dim: int, num_identities: int) -> None:
        super().__init__()
        self.stripes = stripes
        self.embeds = nn.ModuleList(nn.Linear(in_channels, fc_dim) for _ in range(stripes))
        self.classifiers = nn.ModuleList(
            nn.Linear(fc_dim, num_identities, bias=False) for _ in range(stripes)
        )
        self.relu = nn.ReLU(inplace=True)

    def forward(self, fmap: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        feats, logits = [], []
        for band, embed, classify in zip(horizontal_slices(fmap, self.stripes), self.embeds, self.classifiers):
            pooled = band.mean(dim=(2, 3))
            f = self.relu(embed(pooled))
            feats.append(f)
            logits.append(classify(f))
        return torch.stack(feats, dim=1), torch.stack(logits, dim=1)


class TeacherHead(nn.Module):
    """Global head over the channel-concatenated branch maps (no partition)."""

    def __init__(self, in_channels: int, fc_dim: int, num_identities: int) -> None:
        super().__init__()
        self.embed = nn.Linear(in_channels, fc_dim)
        self.classifier = nn.Linear(fc_dim, num_identities, bias=False)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, pose_map: torch.Tensor, reid_map: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if pose_map.shape[2:] != reid_map.shape[2:]:
            raise ShapeError(f"teacher inputs disagree spatially: {tuple(pose_map.shape)} vs {tuple(reid_map.shape)}")
        pooled = torch.cat([pose_map, reid_map], dim=1).mean(dim=(2, 3))
        feat = self.relu(self.embed(pooled))
        return feat, self.classifier(feat)


class _ScaleGrad(torch.autograd.Function):
    """Identity forward; backward multiplies the gradient by a constant."""

    @staticmethod
    def forward(ctx, x: torch.Tensor, scale: float) -> torch.Tensor:
        ctx.scale = scale
        return x

    @staticmethod
    def backward(ctx, grad: torch.Tensor):
        return grad * ctx.scale, None


def scale_gradient(x: torch.Tensor, scale: float) -> torch.Tensor:
    return _ScaleGrad.apply(x, scale) if scale != 1.0 else x


def mask_integrate(reid_raw: torch.Tensor, pose_final: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Soft attention from the pose map: mask = sigmoid(pose_final),
    masked = reid_raw * mask."""
    if reid_raw.shape != pose_final.shape:
        raise ShapeError(f"mask shapes differ: {tuple(reid_raw.shape)} vs {tuple(pose_final.shape)}")
    mask = torch.sigmoid(pose_final)
    return mask, reid_raw * mask


class CrossModalReIDNet(nn.Module):
    """The full architecture. ``with_pose_branch=False`` drops the pose
    branch, its stripe heads and the mask gating; ``with_teacher=False``
    drops the teacher head."""

    def __init__(
        self,
        cfg: ScaleConfig,
        with_pose_branch: bool = True,
        with_teacher: bool = True,
        pose_trunk_grad_scale: float = 1.0,
    ) -> None:
        super().__init__()
        if cfg.num_identities < 1:
            raise ValueError("num_identities must be set before building the model")
        if with_teacher and not with_pose_branch:
            raise ValueError("the teacher head consumes pose-branch features; enable the pose branch")
        self.cfg = cfg
        # damping factor on heatmap-loss gradients entering the shared trunk;
        # the auxiliary task otherwise out-muscles the identity objective
        self.pose_trunk_grad_scale = pose_trunk_grad_scale
        self.rgb_stem = ModalityStem(cfg.stem_channels)
        self.ir_stem = ModalityStem(cfg.stem_channels)
        self.shared_stage = res_stage(cfg.stem_channels[1], cfg.stem_channels[2], stride=2)
        self.reid_stage3 = res_stage(cfg.stem_channels[2], cfg.reid_channels[0], stride=2)
        self.reid_stage4 = res_stage(cfg.reid_channels[0], cfg.reid_channels[1], stride=1)
        self.reid_heads = StripeHeads(cfg.final_channels, cfg.stripe_count, cfg.fc_dim, cfg.num_identities)
        self.pose: PoseBranch | None = None
        self.pose_heads: StripeHeads | None = None
        self.teacher: TeacherHead | None = None
        if with_pose_branch:
            self.pose = PoseBranch(cfg)
            self.pose_heads = StripeHeads(cfg.final_channels, cfg.stripe_count, cfg.fc_dim, cfg.num_identities)
        if with_teacher:
            self.teacher = TeacherHead(2 * cfg.final_channels, cfg.fc_dim, cfg.num_identities)

    # ---- forward pieces -------------------------------------------------

    def modality_forward(self, rgb: torch.Tensor, ir: torch.Tensor) -> torch.Tensor:
        """Run each modality through its own stem, concatenate along the
        batch dimension, and project into the shared space."""
        if rgb.shape[0] != ir.shape[0]:
            raise BatchError(f"modality batch sizes differ: {rgb.shape[0]} vs {ir.shape[0]}")
        return self.shared_stage(torch.cat([self.rgb_stem(rgb), self.ir_stem(ir)], dim=0))

    def encode_single(self, x: torch.Tensor, modality: str) -> torch.Tensor:
        stem = self.rgb_stem if modality == "RGB" else self.ir_stem
        return self.shared_stage(stem(x))

    def pose_stem(self, shared: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        assert self.pose is not None
        pre = self.pose.relu(self.pose.pre(scale_gradient(shared, self.pose_trunk_grad_scale)))
        up = self.pose.relu(self.pose.up(pre))
        return pre, up

    def refinement_forward(self, pose_up: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        assert self.pose is not None
        refined = self.pose.refine.features(pose_up)
        return refined, self.pose.refine.heatmaps(refined)

    def keypoint_transfer(self, refined: torch.Tensor, pose_pre: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        assert self.pose is not None
        down = self.pose.relu(self.pose.down(refined))
        if down.shape != pose_pre.shape:
            raise ShapeError(f"downsampled pose features {tuple(down.shape)} do not match {tuple(pose_pre.shape)}")
        fused = self.pose.relu(self.pose.fuse1(down + pose_pre))
        return down, self.pose.relu(self.pose.fuse2(fused))

    def reid_forward(self, shared: torch.Tensor) -> torch.Tensor:
        return self.reid_stage4(self.reid_stage3(shared))

    def forward_maps(self, shared: torch.Tensor) -> FeatureBundle:
        """Everything downstream of the shared trunk."""
        reid_raw = self.reid_forward(shared)
        if self.pose is None:
            feats, logits = self.reid_heads(reid_raw)
            return FeatureBundle(
                shared=shared, reid_raw=reid_raw, reid_masked=reid_raw,
                stripe_feats_reid=feats, logits_reid=logits,
            )
        pre, up = self.pose_stem(shared)
        refined, heatmaps = self.refinement_forward(up)
        down, pose_final = self.keypoint_transfer(refined, pre)
        mask, reid_masked = mask_integrate(reid_raw, pose_final)
        feats_id, logits_id = self.reid_heads(reid_masked)
        assert self.pose_heads is not None
        feats_p, logits_p = self.pose_heads(pose_final)
        teacher_feat = teacher_logits = None
        if self.teacher is not None:
            teacher_feat, teacher_logits = self.teacher(pose_final, reid_masked)
        return FeatureBundle(
            shared=shared, reid_raw=reid_raw, reid_masked=reid_masked,
            stripe_feats_reid=feats_id, logits_reid=logits_id,
            pose_pre=pre, pose_up=up, pose_refined=refined, heatmaps=heatmaps,
            pose_down=down, pose_final=pose_final, mask=mask,
            stripe_feats_pose=feats_p, logits_pose=logits_p,
            teacher_feat=teacher_feat, teacher_logits=teacher_logits,
        )

    def full_forward(self, batch: "MiniBatch", mode: str = "train") -> FeatureBundle:
        """Whole pipeline over a sampler batch ([RGB | IR] halves)."""
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.train(mode == "train")
        n = batch.images.shape[0]
        if n % 2 != 0:
            raise BatchError(f"batch of {n} images does not split into modality halves")
        shared = self.modality_forward(batch.images[: n // 2], batch.images[n // 2:])
        return self.forward_maps(shared)


# ---- initialization ------------------------------------------------------

def init_params(model: nn.Module, rng: np.random.Generator, scheme: str = "he-normal") -> None:
    """Deterministic re-initialization: normal(0, std) conv/affine weights,
    zero biases, unit batch-norm scale. std follows the chosen scheme."""
    if scheme not in ("he-normal", "xavier-normal"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                w = m.weight
                if isinstance(m, nn.Linear):
                    fan_in, fan_out = w.shape[1], w.shape[0]
                elif isinstance(m, nn.ConvTranspose2d):
                    fan_in = w.shape[0] * w.shape[2] * w.shape[3]
                    fan_out = w.shape[1] * w.shape[2] * w.shape[3]
                else:
                    fan_in = w.shape[1] * w.shape[2] * w.shape[3]
                    fan_out = w.shape[0] * w.shape[2] * w.shape[3]
                if scheme == "he-normal":
                    std = math.sqrt(2.0 / fan_in)
                else:
                    std = math.sqrt(2.0 / (fan_in + fan_out))
                w.copy_(torch.from_numpy(rng.normal(0.0, std, size=tuple(w.shape))).to(w.dtype))
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()
        if isinstance(model, CrossModalReIDNet):
            # Stripe/teacher embeddings consume non-negative pooled maps; a
            # positive bias keeps their ReLUs trainable through the noisy
            # early iterations instead of dying.
            embeds = []
            for heads in (model.reid_heads, model.pose_heads):
                if heads is not None:
                    embeds += list(heads.embeds)
            if model.teacher is not None:
                embeds.append(model.teacher.embed)
            for embed in embeds:
                embed.bias.fill_(0.25)
        # The pose branch has no batch norm: residual refine blocks start
        # near identity and the heatmap head near zero, so activations stay
        # O(1) and the regression starts at the target floor.
        if isinstance(model, CrossModalReIDNet) and model.pose is not None:
            for m in model.pose.modules():
                if isinstance(m, RefineBlock):
                    m.conv2.weight.copy_(torch.from_numpy(
                        rng.normal(0.0, 0.01, size=tuple(m.conv2.weight.shape))).to(m.conv2.weight.dtype))
                    m.conv2.bias.zero_()
            head = model.pose.refine.head_out
            head.weight.copy_(torch.from_numpy(
                rng.normal(0.0, 1e-3, size=tuple(head.weight.shape))).to(head.weight.dtype))
            head.bias.zero_()


def build_model(
    cfg: ScaleConfig,
    seed: int,
    with_pose_branch: bool = True,
    with_teacher: bool = True,
    init_scheme: str = "he-normal",
) -> CrossModalReIDNet:
    model = CrossModalReIDNet(cfg, with_pose_branch=with_pose_branch, with_teacher=with_teacher)
    init_params(model, np.random.default_rng(np.random.SeedSequence(seed)), scheme=init_scheme)
    return model


# ---- documented shape table ----------------------------------------------

def shape_table(
    cfg: ScaleConfig,
    ids_per_batch: int = 8,
    imgs_per_id: int = 4,
    with_pose_branch: bool = True,
    with_teacher: bool = True,
) -> list[tuple[str, tuple[int, ...], str]]:
    """Closed-form (name, shape, stride) rows for one forward pass."""
    n = 2 * ids_per_batch * imgs_per_id
    h, w = cfg.input_hw
    cs = cfg.stem_channels
    cid = cfg.final_channels
    p, fc, nid, nkp = cfg.stripe_count, cfg.fc_dim, cfg.num_identities, cfg.keypoint_count
    cp = cfg.pose_channels
    rows: list[tuple[str, tuple[int, ...], str]] = [
        ("input", (n, 3, h, w), "1"),
        ("shared", (n, cs[2], h // 8, w // 8), "8"),
    ]
    if with_pose_branch:
        rows += [
            ("pose_pre", (n, cp, h // 8, w // 8), "8"),
            ("pose_up", (n, cp, h // 4, w // 4), "4"),
            ("pose_refined", (n, cp, h // 4, w // 4), "4"),
            ("heatmaps", (n, nkp, h // 4, w // 4), "4"),
            ("pose_down", (n, cp, h // 8, w // 8), "8"),
            ("pose_final", (n, cid, h // 16, w // 16), "16"),
        ]
    rows.append(("reid_raw", (n, cid, h // 16, w // 16), "16"))
    if with_pose_branch:
        rows.append(("mask", (n, cid, h // 16, w // 16), "16"))
    rows.append(("reid_masked", (n, cid, h // 16, w // 16), "16"))
    rows += [
        ("stripe_feats_reid", (n, p, fc), "-"),
        ("logits_reid", (n, p, nid), "-"),
    ]
    if with_pose_branch:
        rows += [
            ("stripe_feats_pose", (n, p, fc), "-"),
            ("logits_pose", (n, p, nid), "-"),
        ]
    if with_teacher:
        rows += [
            ("teacher_feat", (n, fc), "-"),
            ("teacher_logits", (n, nid), "-"),
        ]
    return rows


def format_shape_table(rows: list[tuple[str, tuple[int, ...], str]]) -> str:
    name_w = max(len(r[0]) for r in rows)
    shape_strs = ["x".join(str(d) for d in r[1]) for r in rows]
    shape_w = max(len(s) for s in shape_strs)
    lines = [f"{'name':<{name_w}}  {'shape':<{shape_w}}  stride"]
    for (name, _, stride), s in zip(rows, shape_strs):
        lines.append(f"{name:<{name_w}}  {s:<{shape_w}}  {stride}")
    return "\n".join(lines)
