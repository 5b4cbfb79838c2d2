"""Scale presets, training configuration, and the flat key=value config file."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


# Canonical keypoint ordering: midline joints first, then left/right pairs,
# so any prefix is a usable reduced skeleton and flip pairs stay adjacent.
KEYPOINT_NAMES = (
    "head_top", "neck", "thorax", "pelvis",
    "r_shoulder", "l_shoulder", "r_elbow", "l_elbow", "r_wrist", "l_wrist",
    "r_hip", "l_hip", "r_knee", "l_knee", "r_ankle", "l_ankle",
)


def default_flip_pairs(keypoint_count: int) -> tuple[tuple[int, int], ...]:
    return tuple((i, i + 1) for i in range(4, keypoint_count - 1, 2))


@dataclass(frozen=True)
class ScaleConfig:
    """Channel widths, strides and head sizes for one model scale."""

    name: str
    input_hw: tuple[int, int]
    stem_channels: tuple[int, int, int]   # modality conv block, first res stage, shared res stage
    reid_channels: tuple[int, int]        # the two re-id res stages
    pose_channels: int                    # pose branch working width
    fuse_width: int                       # internal 3x3 width of the channel-alignment block
    stripe_count: int
    fc_dim: int
    keypoint_count: int
    num_identities: int
    heatmap_sigma: float
    flip_pairs: tuple[tuple[int, int], ...] = ()

    def __post_init__(self) -> None:
        h, w = self.input_hw
        if h % 16 != 0 or w % 16 != 0:
            raise ConfigError(f"input {h}x{w} must be divisible by 16")
        if h // 16 < self.stripe_count:
            raise ConfigError(f"stripe count {self.stripe_count} exceeds final map height {h // 16}")
        if self.heatmap_sigma <= 0:
            raise ConfigError("heatmap_sigma must be positive")
        if self.keypoint_count < 1 or self.keypoint_count > len(KEYPOINT_NAMES):
            raise ConfigError(f"keypoint_count must be in [1, {len(KEYPOINT_NAMES)}]")
        if not self.flip_pairs:
            object.__setattr__(self, "flip_pairs", default_flip_pairs(self.keypoint_count))
        for a, b in self.flip_pairs:
            if not (0 <= a < self.keypoint_count and 0 <= b < self.keypoint_count):
                raise ConfigError(f"flip pair ({a},{b}) outside keypoint range")

    @property
    def heatmap_hw(self) -> tuple[int, int]:
        return (self.input_hw[0] // 4, self.input_hw[1] // 4)

    @property
    def final_hw(self) -> tuple[int, int]:
        return (self.input_hw[0] // 16, self.input_hw[1] // 16)

    @property
    def final_channels(self) -> int:
        return self.reid_channels[1]


def scale_config(preset: str, num_identities: int = 0, stripe_count: int | None = None) -> ScaleConfig:
    """Build the 'paper' or 'tiny' preset, optionally overriding id/stripe counts."""
    if preset == "paper":
        cfg = dict(
            name="paper", input_hw=(288, 144), stem_channels=(64, 256, 512),
            reid_channels=(1024, 2048), pose_channels=128, fuse_width=512,
            stripe_count=6, fc_dim=512, keypoint_count=16, heatmap_sigma=2.0,
        )
    elif preset == "tiny":
        cfg = dict(
            name="tiny", input_hw=(96, 48), stem_channels=(8, 32, 64),
            reid_channels=(128, 256), pose_channels=16, fuse_width=64,
            stripe_count=3, fc_dim=64, keypoint_count=8, heatmap_sigma=1.0,
        )
    else:
        raise ConfigError(f"unknown preset {preset!r} (expected 'paper' or 'tiny')")
    if stripe_count is not None:
        cfg["stripe_count"] = stripe_count
    return ScaleConfig(num_identities=num_identities, **cfg)


@dataclass
class TrainConfig:
    """Training hyperparameters. Defaults follow the reference setup."""

    preset: str = "paper"
    ids_per_batch: int = 8        # D distinct identities per batch
    imgs_per_id: int = 4          # K images per identity per modality
    epochs: int = 100
    lr: float = 0.01
    decay_factor: float = 0.5
    decay_every: int = 20
    weight_decay: float = 0.0005
    momentum: float = 0.9
    decay_bn_params: bool = True
    hctri_weight: float = 0.1     # center-triplet term
    pose_weight: float = 5.0      # heatmap regression term
    kd_weight: float = 1.0        # global-to-local distillation term
    margin: float = 0.3
    grad_clip: float = 10.0            # per-group grad-norm cap; 0 disables
    pose_lr_scale: float = 1.0         # lr multiplier for the pose branch
    pose_trunk_grad_scale: float = 0.1  # damping of pose gradients into the trunk
    enable_pose_branch: bool = True
    enable_pose_loss: bool = True
    enable_hfc: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.ids_per_batch < 1 or self.imgs_per_id < 1:
            raise ConfigError("ids_per_batch and imgs_per_id must be >= 1")
        for name in ("hctri_weight", "pose_weight", "kd_weight", "margin", "weight_decay",
                     "momentum", "grad_clip", "pose_lr_scale", "pose_trunk_grad_scale"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.enable_pose_loss and not self.enable_pose_branch:
            raise ConfigError("enable_pose_loss requires enable_pose_branch")
        if self.enable_hfc and not self.enable_pose_branch:
            raise ConfigError("enable_hfc requires enable_pose_branch")

    @property
    def batch_size(self) -> int:
        return 2 * self.ids_per_batch * self.imgs_per_id


_BOOL_FIELDS = {"decay_bn_params", "enable_pose_branch", "enable_pose_loss", "enable_hfc"}


def _parse_value(name: str, raw: str):
    raw = raw.strip()
    if name in _BOOL_FIELDS:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name} expects a boolean, got {raw!r}")
    ftype = {f.name: f.type for f in dataclasses.fields(TrainConfig)}[name]
    if ftype == "int":
        return int(raw)
    if ftype == "float":
        return float(raw)
    return raw


def read_train_config(path: str | Path, overrides: dict | None = None) -> TrainConfig:
    """Read a flat ``key = value`` file; ``overrides`` (e.g. CLI flags) win."""
    values: dict = {}
    text = Path(path).read_text()
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#") or line.startswith(";"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in known:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def write_train_config(cfg: TrainConfig, path: str | Path) -> None:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in dataclasses.fields(TrainConfig)]
    Path(path).write_text("\n".join(lines) + "\n")
