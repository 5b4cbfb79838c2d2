"""Datasets: procedural RGB/IR stick-figure generation, directory ingestion,
augmentation, ground-truth heatmap rendering, and the identity-balanced
cross-modality batch sampler.
"""

from __future__ import annotations

import colorsys
import logging
import math
import queue
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw

from .config import KEYPOINT_NAMES, ScaleConfig

log = logging.getLogger(__name__)

RGB, IR = "RGB", "IR"
SYSU_IR_CAMERAS = {3, 6}
SYSU_INDOOR_RGB_CAMERAS = {1, 2}


class IngestionError(RuntimeError):
    """A dataset directory does not match its documented layout."""


class InsufficientDataError(RuntimeError):
    """Not enough identities/images to honor the sampling contract."""


@dataclass
class Sample:
    image: np.ndarray            # float32, (3, H, W); IR stored replicated
    identity: int
    modality: str                # "RGB" | "IR"
    camera: int
    keypoints: np.ndarray | None = None   # (N_kp, 3): x, y, visible

    def equals(self, other: "Sample") -> bool:
        kp_equal = (
            (self.keypoints is None and other.keypoints is None)
            or (self.keypoints is not None and other.keypoints is not None
                and np.array_equal(self.keypoints, other.keypoints))
        )
        return (
            self.identity == other.identity
            and self.modality == other.modality
            and self.camera == other.camera
            and np.array_equal(self.image, other.image)
            and kp_equal
        )


@dataclass
class ModalityStats:
    mean: np.ndarray   # per-channel, raw [0,1] scale
    std: np.ndarray


def compute_stats(samples: Sequence[Sample]) -> dict[str, ModalityStats]:
    stats = {}
    for modality in (RGB, IR):
        imgs = [s.image for s in samples if s.modality == modality]
        if not imgs:
            continue
        stacked = np.stack(imgs)
        mean = stacked.mean(axis=(0, 2, 3)).astype(np.float64)
        std = np.maximum(stacked.std(axis=(0, 2, 3)).astype(np.float64), 1e-3)
        stats[modality] = ModalityStats(mean, std)
    return stats


class Dataset:
    """Immutable collection of samples plus per-modality standardization
    constants (always the owning train split's constants)."""

    def __init__(
        self,
        samples: list[Sample],
        keypoint_count: int,
        stats: dict[str, ModalityStats] | None = None,
        trial_splits: list[set[int]] | None = None,
    ) -> None:
        self.samples = samples
        self.keypoint_count = keypoint_count
        self.stats = stats if stats is not None else compute_stats(samples)
        self.trial_splits = trial_splits

    def __len__(self) -> int:
        return len(self.samples)

    def identities(self) -> list[int]:
        return sorted({s.identity for s in self.samples})

    def ids_with_both_modalities(self) -> list[int]:
        per_modality = {RGB: set(), IR: set()}
        for s in self.samples:
            per_modality[s.modality].add(s.identity)
        return sorted(per_modality[RGB] & per_modality[IR])

    def by_identity_modality(self) -> dict[tuple[int, str], list[int]]:
        index: dict[tuple[int, str], list[int]] = {}
        for i, s in enumerate(self.samples):
            index.setdefault((s.identity, s.modality), []).append(i)
        return index

    def counts(self) -> dict[tuple[str, int], int]:
        out: dict[tuple[str, int], int] = {}
        for s in self.samples:
            key = (s.modality, s.camera)
            out[key] = out.get(key, 0) + 1
        return out

    def subset(self, identities: Iterable[int], recompute_stats: bool = False) -> "Dataset":
        keep = set(identities)
        samples = [s for s in self.samples if s.identity in keep]
        stats = compute_stats(samples) if recompute_stats else self.stats
        return Dataset(samples, self.keypoint_count, stats, self.trial_splits)


# ---------------------------------------------------------------------------
# Synthetic stick-figure generation
# ---------------------------------------------------------------------------

_IR_WEIGHTS = np.array([0.60, 0.25, 0.15])
_RGB_NOISE = 4.0
_IR_NOISE = 7.0
_RGB_GAIN = (1.0, 1.0)   # per-image exposure jitter, disabled by default
_IR_GAIN = (1.0, 1.0)


def _hsv255(h: float, s: float, v: float) -> tuple[int, int, int]:
    r, g, b = colorsys.hsv_to_rgb(h % 1.0, s, v)
    return (int(r * 255), int(g * 255), int(b * 255))


def _ir_level(color: tuple[int, int, int]) -> int:
    return int(np.clip(25 + 0.85 * float(np.dot(_IR_WEIGHTS, color)), 0, 255))


@dataclass
class _FigureSpec:
    head_r: float
    torso: float
    upper_arm: float
    fore_arm: float
    thigh: float
    shin: float
    shoulder_half: float
    hip_half: float
    torso_w: float
    limb_w: float
    colors: dict[str, tuple[int, int, int]]


def _sample_figure(rng: np.random.Generator, base_hue: float) -> _FigureSpec:
    colors = {
        "torso": _hsv255(base_hue + rng.uniform(-0.03, 0.03), rng.uniform(0.6, 0.95), rng.uniform(0.55, 0.95)),
        "arms": _hsv255(base_hue + rng.uniform(0.25, 0.45), rng.uniform(0.5, 0.9), rng.uniform(0.5, 0.9)),
        "legs": _hsv255(base_hue + rng.uniform(0.5, 0.7), rng.uniform(0.5, 0.9), rng.uniform(0.45, 0.9)),
        "head": _hsv255(base_hue + rng.uniform(0.1, 0.2), rng.uniform(0.3, 0.7), rng.uniform(0.6, 0.95)),
    }
    # wide geometry ranges: body shape carries identity across modalities
    return _FigureSpec(
        head_r=rng.uniform(0.042, 0.075),
        torso=rng.uniform(0.21, 0.33),
        upper_arm=rng.uniform(0.11, 0.19),
        fore_arm=rng.uniform(0.10, 0.18),
        thigh=rng.uniform(0.13, 0.21),
        shin=rng.uniform(0.12, 0.20),
        shoulder_half=rng.uniform(0.055, 0.115),
        hip_half=rng.uniform(0.035, 0.080),
        torso_w=rng.uniform(0.045, 0.095),
        limb_w=rng.uniform(0.022, 0.050),
        colors=colors,
    )


def _pose_joints(spec: _FigureSpec, rng: np.random.Generator, hw: tuple[int, int]) -> dict[str, np.ndarray]:
    h, w = hw
    pelvis = np.array([w * (0.5 + rng.uniform(-0.05, 0.05)), h * (0.52 + rng.uniform(-0.02, 0.02))])
    tilt = rng.uniform(-0.06, 0.06)
    up = np.array([math.sin(tilt), -math.cos(tilt)])
    side = np.array([math.cos(tilt), math.sin(tilt)])
    neck = pelvis + spec.torso * h * up
    joints = {
        "pelvis": pelvis,
        "neck": neck,
        "thorax": pelvis + 0.7 * (neck - pelvis),
        "head_top": neck + 2.0 * spec.head_r * h * up,
        "r_shoulder": neck - spec.shoulder_half * h * side,
        "l_shoulder": neck + spec.shoulder_half * h * side,
        "r_hip": pelvis - spec.hip_half * h * side,
        "l_hip": pelvis + spec.hip_half * h * side,
    }
    for prefix in ("r", "l"):
        swing = rng.uniform(-0.45, 0.45)
        bend = rng.uniform(-0.5, 0.5)
        sh = joints[f"{prefix}_shoulder"]
        elbow = sh + spec.upper_arm * h * np.array([math.sin(swing), math.cos(swing)])
        wrist = elbow + spec.fore_arm * h * np.array([math.sin(swing + bend), math.cos(swing + bend)])
        joints[f"{prefix}_elbow"] = elbow
        joints[f"{prefix}_wrist"] = wrist
    for prefix in ("r", "l"):
        swing = rng.uniform(-0.3, 0.3)
        bend = rng.uniform(-0.25, 0.25)
        hip = joints[f"{prefix}_hip"]
        knee = hip + spec.thigh * h * np.array([math.sin(swing), math.cos(swing)])
        ankle = knee + spec.shin * h * np.array([math.sin(swing + bend), math.cos(swing + bend)])
        joints[f"{prefix}_knee"] = knee
        joints[f"{prefix}_ankle"] = ankle
    return joints


def _draw_figure(spec: _FigureSpec, joints: dict[str, np.ndarray], hw: tuple[int, int],
                 modality: str, rng: np.random.Generator) -> np.ndarray:
    h, w = hw
    limb_w = max(1, round(spec.limb_w * h))
    torso_w = max(2, round(spec.torso_w * h))

    def color_of(part: str):
        c = spec.colors[part]
        return c if modality == RGB else _ir_level(c)

    if modality == RGB:
        bg = tuple(int(v) for v in rng.integers(25, 61, size=3))
        img = Image.new("RGB", (w, h), bg)
        noise_sigma = _RGB_NOISE
        gain = rng.uniform(*_RGB_GAIN)
    else:
        bg = int(rng.integers(12, 36))
        img = Image.new("L", (w, h), bg)
        noise_sigma = _IR_NOISE
        gain = rng.uniform(*_IR_GAIN)
    draw = ImageDraw.Draw(img)

    def seg(a: str, b: str, part: str, width: int) -> None:
        pa, pb = joints[a], joints[b]
        draw.line([tuple(pa), tuple(pb)], fill=color_of(part), width=width)

    for p in ("r", "l"):
        seg(f"{p}_hip", f"{p}_knee", "legs", limb_w)
        seg(f"{p}_knee", f"{p}_ankle", "legs", limb_w)
    for p in ("r", "l"):
        seg(f"{p}_shoulder", f"{p}_elbow", "arms", limb_w)
        seg(f"{p}_elbow", f"{p}_wrist", "arms", limb_w)
    seg("r_shoulder", "l_shoulder", "torso", limb_w)
    seg("r_hip", "l_hip", "torso", limb_w)
    seg("pelvis", "neck", "torso", torso_w)
    head_c = joints["neck"] + 0.5 * (joints["head_top"] - joints["neck"])
    r = spec.head_r * h
    draw.ellipse(
        [head_c[0] - r, head_c[1] - r, head_c[0] + r, head_c[1] + r],
        fill=color_of("head"),
    )

    arr = np.asarray(img, dtype=np.float64)
    arr = arr * gain + rng.normal(0.0, noise_sigma, size=arr.shape)
    arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    if modality == RGB:
        chw = arr.transpose(2, 0, 1)
    else:
        chw = np.repeat(arr[None, :, :], 3, axis=0)
    return (chw.astype(np.float32)) / 255.0


def quantize_keypoints(kps: np.ndarray) -> np.ndarray:
    """Snap coordinates to multiples of 1/256 px. With coordinates on this
    binary grid, mirror reflection (W-1-x) is exact in float64, which makes
    the flip an exact involution."""
    out = kps.copy()
    out[:, :2] = np.round(out[:, :2] * 256.0) / 256.0
    return out


def _keypoint_array(joints: dict[str, np.ndarray], count: int, hw: tuple[int, int]) -> np.ndarray:
    h, w = hw
    kps = np.zeros((count, 3), dtype=np.float64)
    for k, name in enumerate(KEYPOINT_NAMES[:count]):
        x, y = joints[name]
        visible = 1.0 if (0.0 <= x <= w - 1 and 0.0 <= y <= h - 1) else 0.0
        kps[k] = (x, y, visible)
    return quantize_keypoints(kps)


def synth_generate(num_ids: int, imgs_per_modality: int, cfg: ScaleConfig, seed: int) -> Dataset:
    """Procedural paired RGB/IR dataset: one persistent figure per identity,
    joint angles resampled per image, both modalities rendered from the same
    pose so their keypoints coincide."""
    if num_ids < 2:
        raise ValueError("need at least 2 identities")
    hw = cfg.input_hw
    id_seqs = np.random.SeedSequence(seed).spawn(num_ids)
    samples: list[Sample] = []
    for ident, id_seq in enumerate(id_seqs):
        geom_seq, img_seq = id_seq.spawn(2)
        spec = _sample_figure(np.random.default_rng(geom_seq), base_hue=(ident * 0.6180339887) % 1.0)
        img_seqs = img_seq.spawn(imgs_per_modality)
        for idx, seq in enumerate(img_seqs):
            rng = np.random.default_rng(seq)
            joints = _pose_joints(spec, rng, hw)
            kps = _keypoint_array(joints, cfg.keypoint_count, hw)
            rgb = _draw_figure(spec, joints, hw, RGB, rng)
            ir = _draw_figure(spec, joints, hw, IR, rng)
            samples.append(Sample(rgb, ident, RGB, camera=idx % 2, keypoints=kps))
            samples.append(Sample(ir, ident, IR, camera=2 + idx % 2, keypoints=kps.copy()))
    return Dataset(samples, cfg.keypoint_count)


# ---------------------------------------------------------------------------
# Heatmaps and augmentation
# ---------------------------------------------------------------------------

def make_heatmaps(
    keypoints: np.ndarray | None,
    out_hw: tuple[int, int],
    sigma: float,
    scale: float = 0.25,
) -> np.ndarray:
    """Gaussian target maps (peak 1) at ``scale`` times the keypoint
    coordinates; invisible keypoints give all-zero channels."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    h, w = out_hw
    if keypoints is None:
        return np.zeros((0, h, w), dtype=np.float32)
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    maps = np.zeros((len(keypoints), h, w), dtype=np.float32)
    for k, (x, y, visible) in enumerate(keypoints):
        if visible <= 0:
            continue
        d2 = (xs - x * scale) ** 2 + (ys - y * scale) ** 2
        maps[k] = np.exp(-d2 / (2.0 * sigma * sigma)).astype(np.float32)
    return maps


def resize_image(image: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    if image.shape[1:] == out_hw:
        return image
    t = torch.from_numpy(image).unsqueeze(0)
    out = F.interpolate(t, size=out_hw, mode="bilinear", align_corners=False)
    return out.squeeze(0).numpy()


def hflip(image: np.ndarray, keypoints: np.ndarray | None,
          flip_pairs: Sequence[tuple[int, int]]) -> tuple[np.ndarray, np.ndarray | None]:
    """Mirror the image; keypoint x -> W-1-x and left/right rows swap.
    Applying twice restores the input exactly."""
    flipped = image[:, :, ::-1].copy()
    if keypoints is None:
        return flipped, None
    kps = keypoints.copy()
    kps[:, 0] = image.shape[2] - 1 - kps[:, 0]
    for a, b in flip_pairs:
        kps[[a, b]] = kps[[b, a]]
    return flipped, kps


def _pad_crop(image: np.ndarray, keypoints: np.ndarray | None, pad: int,
              rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray | None]:
    _, h, w = image.shape
    padded = np.zeros((3, h + 2 * pad, w + 2 * pad), dtype=image.dtype)
    padded[:, pad:pad + h, pad:pad + w] = image
    oy, ox = int(rng.integers(0, 2 * pad + 1)), int(rng.integers(0, 2 * pad + 1))
    out = padded[:, oy:oy + h, ox:ox + w].copy()
    if keypoints is None:
        return out, None
    kps = keypoints.copy()
    kps[:, 0] += pad - ox
    kps[:, 1] += pad - oy
    oob = (kps[:, 0] < 0) | (kps[:, 0] > w - 1) | (kps[:, 1] < 0) | (kps[:, 1] > h - 1)
    kps[oob, 2] = 0.0
    return out, kps


def _random_erase(image: np.ndarray, fill: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    _, h, w = image.shape
    out = image.copy()
    for _ in range(10):
        area = rng.uniform(0.02, 0.30) * h * w
        aspect = math.exp(rng.uniform(math.log(0.3), math.log(3.3)))
        eh = int(round(math.sqrt(area * aspect)))
        ew = int(round(math.sqrt(area / aspect)))
        if 0 < eh < h and 0 < ew < w:
            top = int(rng.integers(0, h - eh + 1))
            left = int(rng.integers(0, w - ew + 1))
            out[:, top:top + eh, left:left + ew] = fill[:, None, None].astype(image.dtype)
            break
    return out


def augment(
    sample: Sample,
    cfg: ScaleConfig,
    stats: dict[str, ModalityStats],
    train_mode: bool,
    rng: np.random.Generator,
    pad: int = 10,
) -> Sample:
    """Resize (+ pad/crop, flip, erase in train mode) and standardize.

    Eval mode is fully deterministic: resize and standardize only.
    """
    in_h, in_w = sample.image.shape[1], sample.image.shape[2]
    out_h, out_w = cfg.input_hw
    image = resize_image(sample.image, cfg.input_hw)
    kps = sample.keypoints
    if kps is not None and (in_h, in_w) != (out_h, out_w):
        kps = kps.copy()
        kps[:, 0] *= out_w / in_w
        kps[:, 1] *= out_h / in_h
    mstats = stats[sample.modality]
    if train_mode:
        image, kps = _pad_crop(image, kps, pad, rng)
        if rng.random() < 0.5:
            image, kps = hflip(image, kps, cfg.flip_pairs)
        if rng.random() < 0.5:
            image = _random_erase(image, mstats.mean, rng)
    image = (image - mstats.mean[:, None, None]) / mstats.std[:, None, None]
    return replace(sample, image=image.astype(np.float32), keypoints=kps)


# ---------------------------------------------------------------------------
# Batch sampling
# ---------------------------------------------------------------------------

@dataclass
class MiniBatch:
    """[D*K RGB | D*K IR] images with labels, modality tags and target heatmaps."""

    images: torch.Tensor         # (2DK, 3, H, W)
    labels: torch.Tensor         # (2DK,) long
    modality_tags: np.ndarray    # (2DK,) of "RGB"/"IR"
    heatmaps: torch.Tensor       # (2DK, N_kp, H/4, W/4)
    ids_per_batch: int
    imgs_per_id: int


def sample_minibatch(
    dataset: Dataset,
    ids_per_batch: int,
    imgs_per_id: int,
    rng: np.random.Generator,
    *,
    cfg: ScaleConfig,
    label_map: dict[int, int] | None = None,
    train_mode: bool = True,
) -> MiniBatch:
    """Identity-balanced cross-modality batch: D identities drawn without
    replacement, K images per identity per modality (with replacement only
    when an identity is short of K). Deterministic given ``rng``."""
    eligible = dataset.ids_with_both_modalities()
    if len(eligible) < ids_per_batch:
        raise InsufficientDataError(
            f"{len(eligible)} identities have both modalities, need {ids_per_batch}"
        )
    if label_map is None:
        label_map = {ident: i for i, ident in enumerate(dataset.identities())}
    index = dataset.by_identity_modality()
    chosen = [eligible[i] for i in rng.choice(len(eligible), size=ids_per_batch, replace=False)]
    picks: dict[str, list[int]] = {RGB: [], IR: []}
    for modality in (RGB, IR):
        for ident in chosen:
            pool = index[(ident, modality)]
            short = len(pool) < imgs_per_id
            sel = rng.choice(len(pool), size=imgs_per_id, replace=short)
            picks[modality].extend(pool[j] for j in sel)

    images, labels, tags, heatmaps = [], [], [], []
    for modality in (RGB, IR):
        for i in picks[modality]:
            s = augment(dataset.samples[i], cfg, dataset.stats, train_mode, rng)
            images.append(torch.from_numpy(s.image))
            labels.append(label_map[s.identity])
            tags.append(s.modality)
            hm = make_heatmaps(s.keypoints, cfg.heatmap_hw, cfg.heatmap_sigma)
            if hm.shape[0] == 0:
                hm = np.zeros((cfg.keypoint_count, *cfg.heatmap_hw), dtype=np.float32)
            heatmaps.append(torch.from_numpy(hm))
    return MiniBatch(
        images=torch.stack(images),
        labels=torch.tensor(labels, dtype=torch.long),
        modality_tags=np.array(tags),
        heatmaps=torch.stack(heatmaps),
        ids_per_batch=ids_per_batch,
        imgs_per_id=imgs_per_id,
    )


def prefetch(batches: Iterable[MiniBatch], workers: int) -> Iterator[MiniBatch]:
    """Background prefetching that preserves the single-threaded batch
    sequence exactly (one producer thread, in-order queue)."""
    if workers <= 0:
        yield from batches
        return
    q: queue.Queue = queue.Queue(maxsize=workers)
    done = object()

    def producer() -> None:
        try:
            for b in batches:
                q.put(b)
        finally:
            q.put(done)

    t = threading.Thread(target=producer, daemon=True)
    t.start()
    while True:
        item = q.get()
        if item is done:
            break
        yield item
    t.join()


# ---------------------------------------------------------------------------
# On-disk layouts
# ---------------------------------------------------------------------------

def export_dataset(dataset: Dataset, root: str | Path) -> None:
    """Write the synthetic layout: manifest.tsv (+ stats comments),
    keypoints.tsv, and PNG images (IR saved single-channel)."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    manifest_lines = []
    for modality in (RGB, IR):
        st = dataset.stats.get(modality)
        if st is not None:
            manifest_lines.append(f"# stat {modality} mean " + " ".join(repr(float(v)) for v in st.mean))
            manifest_lines.append(f"# stat {modality} std " + " ".join(repr(float(v)) for v in st.std))
    manifest_lines.append("path\tid\tmodality\tcamera")
    kp_lines = []
    seq: dict[tuple[int, str], int] = {}
    for s in dataset.samples:
        n = seq.get((s.identity, s.modality), 0)
        seq[(s.identity, s.modality)] = n + 1
        rel = f"images/{s.identity:04d}_{s.modality}_{n:03d}.png"
        arr = np.clip(np.rint(s.image * 255.0), 0, 255).astype(np.uint8)
        if s.modality == RGB:
            Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(root / rel)
        else:
            Image.fromarray(arr[0], mode="L").save(root / rel)
        manifest_lines.append(f"{rel}\t{s.identity}\t{s.modality}\t{s.camera}")
        if s.keypoints is not None:
            flat = " ".join(repr(float(v)) for v in s.keypoints.reshape(-1))
            kp_lines.append(f"{rel}\t{flat}")
    (root / "manifest.tsv").write_text("\n".join(manifest_lines) + "\n")
    if kp_lines:
        (root / "keypoints.tsv").write_text("\n".join(kp_lines) + "\n")


def _load_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode == "L":
            arr = np.asarray(im, dtype=np.uint8)
            chw = np.repeat(arr[None, :, :], 3, axis=0)
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
            chw = arr.transpose(2, 0, 1)
    return chw.astype(np.float32) / 255.0


def _read_keypoint_file(path: Path) -> dict[str, np.ndarray]:
    table = {}
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        rel, _, rest = line.partition("\t")
        vals = np.array([float(v) for v in rest.split()], dtype=np.float64)
        table[rel] = quantize_keypoints(vals.reshape(-1, 3))
    return table


def _load_synthetic(root: Path) -> Dataset:
    manifest = root / "manifest.tsv"
    if not manifest.is_file():
        raise IngestionError(f"missing manifest: {manifest}")
    stats: dict[str, ModalityStats] = {}
    stat_rows: dict[tuple[str, str], np.ndarray] = {}
    samples: list[Sample] = []
    kp_path = root / "keypoints.tsv"
    kp_table = _read_keypoint_file(kp_path) if kp_path.is_file() else {}
    header_seen = False
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        if line.startswith("# stat "):
            _, _, modality, kind, *vals = line.split()
            stat_rows[(modality, kind)] = np.array([float(v) for v in vals], dtype=np.float64)
            continue
        if not header_seen:
            if line.split("\t") != ["path", "id", "modality", "camera"]:
                raise IngestionError(f"bad manifest header in {manifest}: {line!r}")
            header_seen = True
            continue
        rel, ident, modality, camera = line.split("\t")
        img_path = root / rel
        if not img_path.is_file():
            raise IngestionError(f"missing image: {img_path}")
        samples.append(Sample(
            _load_png(img_path), int(ident), modality, int(camera),
            keypoints=kp_table.get(rel),
        ))
    for modality in (RGB, IR):
        if (modality, "mean") in stat_rows and (modality, "std") in stat_rows:
            stats[modality] = ModalityStats(stat_rows[(modality, "mean")], stat_rows[(modality, "std")])
    n_kp = next((len(k) for k in kp_table.values()), 0)
    return Dataset(samples, n_kp, stats or None)


def _load_sysu_like(root: Path) -> Dataset:
    samples: list[Sample] = []
    kp_path = root / "keypoints.tsv"
    kp_table = _read_keypoint_file(kp_path) if kp_path.is_file() else {}
    for cam in range(1, 7):
        cam_dir = root / f"cam{cam}"
        if not cam_dir.is_dir():
            raise IngestionError(f"missing camera directory: {cam_dir}")
        modality = IR if cam in SYSU_IR_CAMERAS else RGB
        for person_dir in sorted(cam_dir.iterdir()):
            if not person_dir.is_dir():
                continue
            ident = int(person_dir.name)
            for frame in sorted(person_dir.glob("*.png")):
                rel = str(frame.relative_to(root))
                samples.append(Sample(_load_png(frame), ident, modality, cam, keypoints=kp_table.get(rel)))
    if not samples:
        raise IngestionError(f"no images under {root}")
    n_kp = next((len(k) for k in kp_table.values()), 0)
    return Dataset(samples, n_kp)


def _load_regdb_like(root: Path) -> Dataset:
    samples: list[Sample] = []
    kp_path = root / "keypoints.tsv"
    kp_table = _read_keypoint_file(kp_path) if kp_path.is_file() else {}
    for sub, modality, camera in (("visible", RGB, 0), ("thermal", IR, 1)):
        sub_dir = root / sub
        if not sub_dir.is_dir():
            raise IngestionError(f"missing modality directory: {sub_dir}")
        for person_dir in sorted(sub_dir.iterdir()):
            if not person_dir.is_dir():
                continue
            ident = int(person_dir.name)
            for frame in sorted(person_dir.glob("*.png")):
                rel = str(frame.relative_to(root))
                samples.append(Sample(_load_png(frame), ident, modality, camera, keypoints=kp_table.get(rel)))
    if not samples:
        raise IngestionError(f"no images under {root}")
    splits_dir = root / "splits"
    trials = None
    if splits_dir.is_dir():
        trials = []
        for t in range(10):
            split_file = splits_dir / f"trial_{t}.txt"
            if not split_file.is_file():
                raise IngestionError(f"missing split file: {split_file}")
            trials.append({int(line) for line in split_file.read_text().split()})
    n_kp = next((len(k) for k in kp_table.values()), 0)
    return Dataset(samples, n_kp, trial_splits=trials)


def load_dataset(root: str | Path, layout: str) -> Dataset:
    """Ingest a dataset directory; logs per-(modality, camera) counts."""
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root does not exist: {root}")
    if layout == "synthetic":
        ds = _load_synthetic(root)
    elif layout == "sysu-like":
        ds = _load_sysu_like(root)
    elif layout == "regdb-like":
        ds = _load_regdb_like(root)
    else:
        raise ValueError(f"unknown layout {layout!r}")
    for (modality, camera), count in sorted(ds.counts().items()):
        log.info("loaded %s cam%s: %d images", modality, camera, count)
    return ds
