"""Training loop, learning-rate schedule, checkpoint persistence, and the
cumulative ablation grid."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import ScaleConfig, TrainConfig, scale_config
from .data import Dataset, MiniBatch, prefetch, sample_minibatch, synth_generate
from .evaluation import RankingResult, RetrievalProtocol, run_protocol
from .losses import total_objective
from .network import CrossModalReIDNet, init_params
from .substrate import SGD

log = logging.getLogger(__name__)

METRICS_HEADER = "epoch,iter,l_id,l_hctri,l_pose,l_kd,total,lr"
CHECKPOINT_FORMAT = "cmpreid-checkpoint-1"


class NonFiniteLossError(RuntimeError):
    """A loss term became NaN/inf during training."""


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step schedule: lr * decay_factor ** floor(epoch / decay_every)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr * cfg.decay_factor ** (epoch // cfg.decay_every)


def iterations_per_epoch(num_images: int, cfg: TrainConfig) -> int:
    return max(1, math.ceil(num_images / cfg.batch_size))


def _is_pose_param(name: str) -> bool:
    return name.startswith("pose.")


def _is_trunk_param(name: str) -> bool:
    return name.startswith(("rgb_stem.", "ir_stem.", "shared_stage."))


def _is_head_param(name: str) -> bool:
    return not (_is_pose_param(name) or _is_trunk_param(name))


def _bn_param_names(model: nn.Module) -> list[str]:
    names = []
    for name, module in model.named_modules():
        if isinstance(module, nn.BatchNorm2d):
            names += [f"{name}.weight", f"{name}.bias"]
    return names


def build_train_model(train_cfg: TrainConfig, scale_cfg: ScaleConfig, init_seed) -> CrossModalReIDNet:
    model = CrossModalReIDNet(
        scale_cfg,
        with_pose_branch=train_cfg.enable_pose_branch,
        with_teacher=train_cfg.enable_hfc,
        pose_trunk_grad_scale=train_cfg.pose_trunk_grad_scale,
    )
    init_params(model, np.random.default_rng(init_seed))
    return model


@dataclass
class TrainResult:
    model: CrossModalReIDNet
    scale_cfg: ScaleConfig
    train_cfg: TrainConfig
    label_map: dict[int, int]
    metrics_path: Path
    checkpoint_dir: Path
    epoch_loss_medians: list[float]
    epoch_pose_means: list[float]


def train(
    train_cfg: TrainConfig,
    dataset: Dataset,
    out_dir: str | Path,
    num_workers: int | None = None,
) -> TrainResult:
    """Run the full schedule on ``dataset`` and leave metrics.csv plus
    rolling/final checkpoints in ``out_dir``.

    Fully deterministic for a given config and seed when num_workers
    resolves to 0 (env CMPR_NUM_WORKERS, default 0); prefetch workers keep
    the same batch sequence either way.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if num_workers is None:
        num_workers = int(os.environ.get("CMPR_NUM_WORKERS", "0"))

    ids = dataset.identities()
    label_map = {ident: i for i, ident in enumerate(ids)}
    scale_cfg = scale_config(train_cfg.preset, num_identities=len(ids))
    init_seq, data_seq = np.random.SeedSequence(train_cfg.seed).spawn(2)
    model = build_train_model(train_cfg, scale_cfg, init_seq)
    optimizer = SGD(
        model.named_parameters(),
        momentum=train_cfg.momentum,
        weight_decay=train_cfg.weight_decay,
        no_decay=() if train_cfg.decay_bn_params else _bn_param_names(model),
        lr_scale_fn=lambda n: train_cfg.pose_lr_scale if n.startswith("pose.") else 1.0,
    )

    data_rng = np.random.default_rng(data_seq)
    iters = iterations_per_epoch(len(dataset), train_cfg)
    rows = [METRICS_HEADER]
    epoch_loss_medians: list[float] = []
    epoch_pose_means: list[float] = []
    started = time.time()
    for epoch in range(train_cfg.epochs):
        lr = lr_at(epoch, train_cfg)
        model.train()

        def batches():
            for _ in range(iters):
                yield sample_minibatch(
                    dataset, train_cfg.ids_per_batch, train_cfg.imgs_per_id,
                    data_rng, cfg=scale_cfg, label_map=label_map, train_mode=True,
                )

        totals, poses = [], []
        for it, batch in enumerate(prefetch(batches(), num_workers)):
            bundle = model.full_forward(batch, mode="train")
            breakdown = total_objective(bundle, batch, train_cfg)
            terms = {
                "l_id": breakdown.l_id.item(), "l_hctri": breakdown.l_hctri.item(),
                "l_pose": breakdown.l_pose.item(), "l_kd": breakdown.l_kd.item(),
                "total": breakdown.total.item(),
            }
            for name, value in terms.items():
                if not math.isfinite(value):
                    raise NonFiniteLossError(
                        f"{name} is non-finite ({value}) at epoch {epoch} iter {it}"
                    )
            optimizer.zero_grad()
            breakdown.total.backward()
            if train_cfg.grad_clip > 0:
                # Heatmap-regression gradients dwarf the metric-learning ones
                # at this scale, both inside the pose branch and where they
                # flow into the shared trunk; clipping per subsystem keeps
                # them from starving the identity pathway of the norm budget.
                for group in (_is_pose_param, _is_trunk_param, _is_head_param):
                    optimizer.clip_grad_norm(train_cfg.grad_clip, group)
            optimizer.step(lr)
            rows.append(
                f"{epoch},{it},{terms['l_id']!r},{terms['l_hctri']!r},"
                f"{terms['l_pose']!r},{terms['l_kd']!r},{terms['total']!r},{lr!r}"
            )
            totals.append(terms["total"])
            poses.append(terms["l_pose"])
        epoch_loss_medians.append(float(np.median(totals)))
        epoch_pose_means.append(float(np.mean(poses)))
        save_checkpoint(
            model, train_cfg, scale_cfg, out_dir / "checkpoints" / "last",
            epoch=epoch, data_rng=data_rng, last_total=totals[-1],
        )
        log.info("epoch %d/%d total %.4f lr %.5f (%.1fs)",
                 epoch + 1, train_cfg.epochs, totals[-1], lr, time.time() - started)

    final_dir = out_dir / "checkpoints" / "final"
    save_checkpoint(
        model, train_cfg, scale_cfg, final_dir,
        epoch=train_cfg.epochs - 1, data_rng=data_rng, last_total=epoch_loss_medians[-1],
    )
    metrics_path = out_dir / "metrics.csv"
    metrics_path.write_text("\n".join(rows) + "\n")
    return TrainResult(
        model=model, scale_cfg=scale_cfg, train_cfg=train_cfg, label_map=label_map,
        metrics_path=metrics_path, checkpoint_dir=final_dir,
        epoch_loss_medians=epoch_loss_medians, epoch_pose_means=epoch_pose_means,
    )


# ---------------------------------------------------------------------------
# Checkpoints: manifest.txt + one little-endian float32 raw file per array
# ---------------------------------------------------------------------------

def save_checkpoint(
    model: CrossModalReIDNet,
    train_cfg: TrainConfig,
    scale_cfg: ScaleConfig,
    ckpt_dir: str | Path,
    epoch: int,
    data_rng: np.random.Generator | None = None,
    last_total: float | None = None,
) -> None:
    ckpt_dir = Path(ckpt_dir)
    arrays = ckpt_dir / "arrays"
    arrays.mkdir(parents=True, exist_ok=True)
    lines = [f"format = {CHECKPOINT_FORMAT}", f"epoch = {epoch}"]
    for f in fields(train_cfg):
        lines.append(f"train.{f.name} = {getattr(train_cfg, f.name)}")
    lines.append(f"scale.num_identities = {scale_cfg.num_identities}")
    lines.append(f"scale.stripe_count = {scale_cfg.stripe_count}")
    if data_rng is not None:
        lines.append("rng.data = " + json.dumps(data_rng.bit_generator.state))
    if last_total is not None:
        lines.append(f"metric.last_total = {last_total!r}")
    for name, tensor in model.state_dict().items():
        if name.endswith("num_batches_tracked"):
            continue
        arr = tensor.detach().numpy().astype("<f4")
        arr.tofile(arrays / f"{name}.f32")
        shape = "x".join(str(d) for d in tensor.shape) if tensor.ndim else "scalar"
        lines.append(f"param = {name} {shape}")
    (ckpt_dir / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_checkpoint(ckpt_dir: str | Path) -> tuple[CrossModalReIDNet, ScaleConfig, TrainConfig, dict]:
    ckpt_dir = Path(ckpt_dir)
    manifest_path = ckpt_dir / "manifest.txt"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"not a checkpoint directory: {ckpt_dir}")
    train_vals: dict = {}
    scale_vals: dict = {}
    params: list[tuple[str, tuple[int, ...]]] = []
    meta: dict = {}
    for line in manifest_path.read_text().splitlines():
        key, _, value = line.partition(" = ")
        if key.startswith("train."):
            field_name = key[len("train."):]
            ftype = {f.name: f.type for f in fields(TrainConfig)}[field_name]
            if ftype == "int":
                train_vals[field_name] = int(value)
            elif ftype == "float":
                train_vals[field_name] = float(value)
            elif ftype == "bool":
                train_vals[field_name] = value == "True"
            else:
                train_vals[field_name] = value
        elif key.startswith("scale."):
            scale_vals[key[len("scale."):]] = int(value)
        elif key == "param":
            name, shape = value.rsplit(" ", 1)
            dims = () if shape == "scalar" else tuple(int(d) for d in shape.split("x"))
            params.append((name, dims))
        else:
            meta[key] = value
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {meta.get('format')!r}")
    train_cfg = TrainConfig(**train_vals)
    scale_cfg = scale_config(
        train_cfg.preset,
        num_identities=scale_vals["num_identities"],
        stripe_count=scale_vals.get("stripe_count"),
    )
    model = CrossModalReIDNet(
        scale_cfg,
        with_pose_branch=train_cfg.enable_pose_branch,
        with_teacher=train_cfg.enable_hfc,
    )
    state = {}
    for name, dims in params:
        arr = np.fromfile(ckpt_dir / "arrays" / f"{name}.f32", dtype="<f4").reshape(dims)
        state[name] = torch.from_numpy(arr.copy())
    missing, unexpected = model.load_state_dict(state, strict=False)
    bad_missing = [m for m in missing if not m.endswith("num_batches_tracked")]
    if bad_missing or unexpected:
        raise ValueError(f"checkpoint mismatch: missing={bad_missing} unexpected={unexpected}")
    model.eval()
    return model, scale_cfg, train_cfg, meta


# ---------------------------------------------------------------------------
# Ablation grid
# ---------------------------------------------------------------------------

ABLATION_GRID: list[tuple[str, dict]] = [
    ("baseline", dict(enable_pose_branch=False, enable_pose_loss=False, enable_hfc=False)),
    ("+pose_branch", dict(enable_pose_branch=True, enable_pose_loss=False, enable_hfc=False)),
    ("+pose_branch+pose_loss", dict(enable_pose_branch=True, enable_pose_loss=True, enable_hfc=False)),
    ("full", dict(enable_pose_branch=True, enable_pose_loss=True, enable_hfc=True)),
]

ABLATION_HEADER = "config,rank1_f_ID,map_f_ID,rank1_f_ALL,map_f_ALL"


@dataclass
class AblationRow:
    label: str
    reid: RankingResult
    both: RankingResult | None

    def csv(self) -> str:
        r1_id, map_id = float(self.reid.cmc[0]), self.reid.mean_ap
        if self.both is None:
            return f"{self.label},{r1_id!r},{map_id!r},n/a,n/a"
        return f"{self.label},{r1_id!r},{map_id!r},{float(self.both.cmc[0])!r},{self.both.mean_ap!r}"


def ablate(
    base_cfg: TrainConfig,
    train_ds: Dataset,
    eval_ds: Dataset,
    out_dir: str | Path,
    protocol: RetrievalProtocol | None = None,
) -> list[AblationRow]:
    """Train the four cumulative configurations with a shared seed and
    evaluate f_ID (and f_ALL where the pose branch exists) on ``eval_ds``."""
    out_dir = Path(out_dir)
    protocol = protocol or RetrievalProtocol("synthetic", repetitions=1)
    rows: list[AblationRow] = []
    for label, flags in ABLATION_GRID:
        cfg = replace(base_cfg, **flags)
        result = train(cfg, train_ds, out_dir / label.replace("+", "_"))
        reid = run_protocol(result.model, eval_ds, protocol, cfg.seed, result.scale_cfg, "f_ID")
        both = None
        if cfg.enable_pose_branch:
            both = run_protocol(result.model, eval_ds, protocol, cfg.seed, result.scale_cfg, "f_ALL")
        rows.append(AblationRow(label, reid, both))
        log.info("ablation %s: f_ID rank1 %.3f map %.3f", label, reid.cmc[0], reid.mean_ap)
    (out_dir / "ablation.csv").write_text(
        "\n".join([ABLATION_HEADER] + [r.csv() for r in rows]) + "\n"
    )
    return rows


def synthetic_benchmark(
    preset: str = "tiny",
    num_train_ids: int = 20,
    num_eval_ids: int = 10,
    imgs_per_modality: int = 10,
    seed: int = 77,
) -> tuple[Dataset, Dataset]:
    """Fixed train/held-out synthetic pair; the held-out split standardizes
    with the training split's constants."""
    cfg = scale_config(preset)
    full = synth_generate(num_train_ids + num_eval_ids, imgs_per_modality, cfg, seed)
    ids = full.identities()
    train_ds = full.subset(ids[:num_train_ids], recompute_stats=True)
    eval_ds = full.subset(ids[num_train_ids:])
    eval_ds.stats = train_ds.stats
    return train_ds, eval_ds
