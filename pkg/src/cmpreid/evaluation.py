"""Cross-modality retrieval evaluation: feature extraction, cosine distance,
CMC/mAP metrics, and the dataset-style protocols."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .config import ConfigError, ScaleConfig
from .data import IR, RGB, SYSU_INDOOR_RGB_CAMERAS, SYSU_IR_CAMERAS, Dataset, augment
from .network import CrossModalReIDNet
from .substrate import ShapeError

FEATURE_SETS = ("f_ID", "f_P", "f_ALL")
PROTOCOL_NAMES = ("sysu-all", "sysu-indoor", "regdb-v2t", "regdb-t2v", "synthetic")


class ProtocolError(RuntimeError):
    """Protocol cannot run on this dataset (or excluded every query)."""


@dataclass(frozen=True)
class RetrievalProtocol:
    name: str
    gallery_shots: int = 1
    repetitions: int = 10
    camera_exclusions: tuple[tuple[int, int], ...] = ()   # (query cam, gallery cam) pairs to drop
    max_rank: int = 20

    def __post_init__(self) -> None:
        if self.name not in PROTOCOL_NAMES:
            raise ConfigError(f"unknown protocol {self.name!r}")
        if self.repetitions < 1 or self.gallery_shots < 1:
            raise ConfigError("repetitions and gallery_shots must be >= 1")


@dataclass
class RankingResult:
    cmc: np.ndarray              # rates at ranks 1..max_rank
    mean_ap: float
    per_query_ap: np.ndarray
    num_queries_evaluated: int


def extract_features(
    model: CrossModalReIDNet,
    dataset: Dataset,
    indices: Sequence[int],
    cfg: ScaleConfig,
    which: str = "f_ALL",
    batch_size: int = 64,
) -> np.ndarray:
    """Concatenated stripe features per image, L2-normalized rows.

    ``which``: f_ID (re-id bank), f_P (pose bank), f_ALL (both). Rows follow
    the order of ``indices``.
    """
    if which not in FEATURE_SETS:
        raise ConfigError(f"unknown feature set {which!r}")
    if which in ("f_P", "f_ALL") and model.pose_heads is None:
        raise ConfigError(f"feature set {which} needs the pose branch, which this model lacks")
    model.eval()
    dim = cfg.stripe_count * cfg.fc_dim * (2 if which == "f_ALL" else 1)
    out = np.zeros((len(indices), dim), dtype=np.float32)
    for modality in (RGB, IR):
        rows = [r for r, i in enumerate(indices) if dataset.samples[i].modality == modality]
        for start in range(0, len(rows), batch_size):
            chunk = rows[start:start + batch_size]
            imgs = torch.stack([
                torch.from_numpy(
                    augment(dataset.samples[indices[r]], cfg, dataset.stats,
                            train_mode=False, rng=np.random.default_rng(0)).image
                )
                for r in chunk
            ])
            with torch.no_grad():
                bundle = model.forward_maps(model.encode_single(imgs, modality))
            parts = []
            if which in ("f_ID", "f_ALL"):
                parts.append(bundle.stripe_feats_reid.flatten(1))
            if which in ("f_P", "f_ALL"):
                parts.append(bundle.stripe_feats_pose.flatten(1))
            feats = torch.cat(parts, dim=1)
            feats = feats / feats.norm(dim=1, keepdim=True).clamp_min(1e-12)
            out[chunk] = feats.numpy()
    return out


def distance_matrix(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Cosine distance 1 - <q, g> on L2-normalized rows.

    Computed one query row at a time (fixed reduction order), so the result
    is bit-identical no matter how callers tile or parallelize over queries.
    """
    if query.shape[1] != gallery.shape[1]:
        raise ShapeError(f"feature dims differ: {query.shape[1]} vs {gallery.shape[1]}")
    out = np.empty((query.shape[0], gallery.shape[0]), dtype=np.result_type(query, gallery))
    for i in range(query.shape[0]):
        out[i] = 1.0 - gallery @ query[i]
    return out


def cmc_map(
    dist: np.ndarray,
    query_ids: np.ndarray,
    query_cams: np.ndarray,
    gallery_ids: np.ndarray,
    gallery_cams: np.ndarray,
    camera_exclusions: Sequence[tuple[int, int]] = (),
    max_rank: int = 20,
) -> RankingResult:
    """Rank the gallery per query (ascending distance, stable ties on gallery
    index), drop same-identity-same-camera items plus any configured
    (query cam, gallery cam) pairs, and accumulate CMC and AP. Queries left
    with no relevant gallery item are excluded from both averages."""
    num_q = dist.shape[0]
    cmc_counts = np.zeros(max_rank, dtype=np.float64)
    aps = []
    for qi in range(num_q):
        order = np.argsort(dist[qi], kind="stable")
        keep = ~((gallery_ids[order] == query_ids[qi]) & (gallery_cams[order] == query_cams[qi]))
        for qc, gc in camera_exclusions:
            if query_cams[qi] == qc:
                keep &= gallery_cams[order] != gc
        ranked = gallery_ids[order[keep]]
        matches = ranked == query_ids[qi]
        if not matches.any():
            continue
        first = int(np.argmax(matches))
        if first < max_rank:
            cmc_counts[first:] += 1.0
        precision = np.cumsum(matches) / (np.arange(matches.size) + 1.0)
        aps.append(float((precision * matches).sum() / matches.sum()))
    if not aps:
        raise ProtocolError("every query was excluded; no relevant gallery items")
    per_query_ap = np.array(aps)
    return RankingResult(
        cmc=cmc_counts / len(aps),
        mean_ap=float(per_query_ap.mean()),
        per_query_ap=per_query_ap,
        num_queries_evaluated=len(aps),
    )


def _meta(dataset: Dataset, indices: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    ids = np.array([dataset.samples[i].identity for i in indices])
    cams = np.array([dataset.samples[i].camera for i in indices])
    return ids, cams


def _single_pass(
    feats: np.ndarray, dataset: Dataset,
    q_idx: Sequence[int], g_idx: Sequence[int],
    pos: dict[int, int], protocol: RetrievalProtocol,
) -> RankingResult:
    q_ids, q_cams = _meta(dataset, q_idx)
    g_ids, g_cams = _meta(dataset, g_idx)
    dist = distance_matrix(feats[[pos[i] for i in q_idx]], feats[[pos[i] for i in g_idx]])
    return cmc_map(dist, q_ids, q_cams, g_ids, g_cams,
                   protocol.camera_exclusions, protocol.max_rank)


def run_protocol(
    model: CrossModalReIDNet,
    dataset: Dataset,
    protocol: RetrievalProtocol,
    seed: int,
    cfg: ScaleConfig,
    features: str = "f_ALL",
) -> RankingResult:
    """Evaluate one protocol.

    sysu-style: query = all IR images, gallery = ``gallery_shots`` random RGB
    images per (identity, camera) — indoor mode restricts gallery cameras —
    repeated and averaged. regdb-style: all of one modality vs all of the
    other, averaged over the 10 trial splits. synthetic: single full
    cross-modality split.
    """
    samples = dataset.samples
    rgb_idx = [i for i, s in enumerate(samples) if s.modality == RGB]
    ir_idx = [i for i, s in enumerate(samples) if s.modality == IR]
    if not rgb_idx or not ir_idx:
        raise ProtocolError("protocol needs images in both modalities")

    if protocol.name == "synthetic":
        involved = ir_idx + rgb_idx
        feats = extract_features(model, dataset, involved, cfg, features)
        pos = {idx: row for row, idx in enumerate(involved)}
        return _single_pass(feats, dataset, ir_idx, rgb_idx, pos, protocol)

    if protocol.name in ("sysu-all", "sysu-indoor"):
        gallery_cams = SYSU_INDOOR_RGB_CAMERAS if protocol.name == "sysu-indoor" else None
        groups: dict[tuple[int, int], list[int]] = {}
        for i in rgb_idx:
            s = samples[i]
            if gallery_cams is None or s.camera in gallery_cams:
                groups.setdefault((s.identity, s.camera), []).append(i)
        if not groups:
            raise ProtocolError("no gallery images for this protocol")
        involved = ir_idx + sorted(j for g in groups.values() for j in g)
        feats = extract_features(model, dataset, involved, cfg, features)
        pos = {idx: row for row, idx in enumerate(involved)}
        rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(protocol.repetitions)]
        rep_results = []
        for rng in rngs:
            g_idx: list[int] = []
            for key in sorted(groups):
                pool = groups[key]
                take = min(protocol.gallery_shots, len(pool))
                g_idx.extend(pool[j] for j in rng.choice(len(pool), size=take, replace=False))
            rep_results.append(_single_pass(feats, dataset, ir_idx, g_idx, pos, protocol))
        counts = {r.num_queries_evaluated for r in rep_results}
        if len(counts) != 1:
            raise ProtocolError("query exclusion varied across repetitions")
        per_query = np.mean([r.per_query_ap for r in rep_results], axis=0)
        return RankingResult(
            cmc=np.mean([r.cmc for r in rep_results], axis=0),
            mean_ap=float(per_query.mean()),
            per_query_ap=per_query,
            num_queries_evaluated=rep_results[0].num_queries_evaluated,
        )

    # regdb-style
    if dataset.trial_splits is None:
        raise ProtocolError("regdb-style protocols need trial split files")
    q_pool, g_pool = (rgb_idx, ir_idx) if protocol.name == "regdb-v2t" else (ir_idx, rgb_idx)
    trial_results = []
    for train_ids in dataset.trial_splits:
        test_ids = {s.identity for s in samples} - set(train_ids)
        q_idx = [i for i in q_pool if samples[i].identity in test_ids]
        g_idx = [i for i in g_pool if samples[i].identity in test_ids]
        if not q_idx or not g_idx:
            raise ProtocolError("a trial split left the test set empty")
        involved = q_idx + g_idx
        feats = extract_features(model, dataset, involved, cfg, features)
        pos = {idx: row for row, idx in enumerate(involved)}
        trial_results.append(_single_pass(feats, dataset, q_idx, g_idx, pos, protocol))
    return RankingResult(
        cmc=np.mean([r.cmc for r in trial_results], axis=0),
        mean_ap=float(np.mean([r.mean_ap for r in trial_results])),
        per_query_ap=np.concatenate([r.per_query_ap for r in trial_results]),
        num_queries_evaluated=sum(r.num_queries_evaluated for r in trial_results),
    )


def results_csv_lines(
    rows: Sequence[tuple[str, str, RankingResult, int, int]],
) -> list[str]:
    """CSV lines for (protocol, feature_set, result, repetitions, seed) rows."""
    lines = ["protocol,feature_set,rank1,rank10,rank20,map,repetitions,seed"]
    for protocol, feature_set, r, repetitions, seed in rows:
        def rank(k: int) -> float:
            return float(r.cmc[min(k, len(r.cmc)) - 1])
        lines.append(
            f"{protocol},{feature_set},{rank(1)!r},{rank(10)!r},{rank(20)!r},"
            f"{r.mean_ap!r},{repetitions},{seed}"
        )
    return lines
