"""Cosine-distance retrieval evaluation: CMC, mAP, repeated random splits."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .datakit import DataError, Split, Tracklet, split_protocol
from .model import RQEN

DEFAULT_RANKS = (1, 5, 10, 20)


@dataclass
class Entry:
    tracklet_id: str
    identity: str
    camera: str
    feature: np.ndarray


def cosine_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine distance is undefined for a zero vector")
    return float(min(max(1.0 - (a @ b) / (na * nb), 0.0), 2.0))


def cosine_distance_matrix(probe: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    probe = np.asarray(probe, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    pn = np.linalg.norm(probe, axis=1, keepdims=True)
    gn = np.linalg.norm(gallery, axis=1, keepdims=True)
    if np.any(pn == 0) or np.any(gn == 0):
        raise ValueError("cosine distance is undefined for a zero vector")
    return np.clip(1.0 - (probe / pn) @ (gallery / gn).T, 0.0, 2.0)


@dataclass
class CMCResult:
    ranks: tuple[int, ...]
    cmc: dict[int, float]  # mean over trials
    mAP: float
    trials: int = 1
    per_trial: list[dict[str, float]] = field(default_factory=list)
    cmc_std: dict[int, float] = field(default_factory=dict)
    mAP_std: float = 0.0
    n_probes: int = 0
    n_skipped: int = 0

    def rank1(self) -> float:
        return self.cmc[1]

    def rows(self) -> list[tuple[str, float, float]]:
        out = [(str(k), self.cmc[k], self.cmc_std.get(k, 0.0)) for k in self.ranks]
        out.append(("mAP", self.mAP, self.mAP_std))
        return out


def _validate_ranks(ranks: Sequence[int]) -> tuple[int, ...]:
    ranks = tuple(int(k) for k in ranks)
    if not ranks or min(ranks) < 1:
        raise ValueError("ranks must be positive integers")
    return tuple(sorted(set(ranks)))


def rank_matches(dist: np.ndarray, probe_ids: Sequence, gallery_ids: Sequence) -> tuple[np.ndarray, list[np.ndarray]]:
    """1-based rank of the first correct match per probe and the positions of all matches.

    Gallery entries are ordered by ascending distance with ties kept in gallery order.
    A probe without any correct entry gets rank 0.
    """
    gallery_ids = np.asarray(gallery_ids)
    first = np.zeros(len(probe_ids), dtype=int)
    hits = []
    for i, pid in enumerate(probe_ids):
        order = np.argsort(dist[i], kind="stable")
        pos = np.flatnonzero(gallery_ids[order] == pid) + 1
        hits.append(pos)
        if pos.size:
            first[i] = pos[0]
    return first, hits


def _ap_exact(positions: np.ndarray) -> Fraction:
    if len(positions) == 0:
        return Fraction(0)
    return sum((Fraction(k + 1, int(p)) for k, p in enumerate(positions)), Fraction(0)) / len(positions)


def average_precision(positions: np.ndarray) -> float:
    """AP given 1-based sorted positions of all correct gallery entries."""
    return float(_ap_exact(positions))


def cmc_from_distances(
    dist: np.ndarray,
    probe_ids: Sequence,
    gallery_ids: Sequence,
    ranks: Sequence[int] = DEFAULT_RANKS,
    allow_missing: bool = False,
) -> CMCResult:
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 2 or dist.shape[0] == 0 or dist.shape[1] == 0:
        raise ValueError("probe and gallery must both be non-empty")
    if dist.shape != (len(probe_ids), len(gallery_ids)):
        raise ValueError(f"distance matrix {dist.shape} does not match {len(probe_ids)} probes x {len(gallery_ids)} gallery")
    ranks = _validate_ranks(ranks)
    first, hits = rank_matches(dist, probe_ids, gallery_ids)
    keep = first > 0
    if not keep.all() and not allow_missing:
        missing = sorted({str(probe_ids[i]) for i in np.flatnonzero(~keep)})
        raise ValueError(f"probe identities absent from the gallery: {missing[:5]}")
    if not keep.any():
        raise ValueError("no probe has a correct match in the gallery")
    first = first[keep]
    n = len(first)
    cmc = {k: int(np.count_nonzero(first <= k)) / n for k in ranks}
    # exact rational arithmetic, rounded once
    mAP = float(sum((_ap_exact(h) for h, ok in zip(hits, keep) if ok), Fraction(0)) / n)
    trial = {f"cmc{k}": v for k, v in cmc.items()} | {"mAP": mAP}
    return CMCResult(ranks, cmc, mAP, 1, [trial], {k: 0.0 for k in ranks}, 0.0, n, int((~keep).sum()))


def cmc(probe: Sequence[Entry], gallery: Sequence[Entry], ranks: Sequence[int] = DEFAULT_RANKS, allow_missing: bool = False) -> CMCResult:
    if not probe or not gallery:
        raise ValueError("probe and gallery must both be non-empty")
    dist = cosine_distance_matrix(np.stack([p.feature for p in probe]), np.stack([g.feature for g in gallery]))
    return cmc_from_distances(dist, [p.identity for p in probe], [g.identity for g in gallery], ranks, allow_missing)


def combine_trials(results: Sequence[CMCResult]) -> CMCResult:
    """Mean and population standard deviation across single-trial results."""
    if not results:
        raise ValueError("no trials to combine")
    ranks = results[0].ranks
    per_trial = [r.per_trial[0] for r in results]
    mean = {k: float(np.mean([t[f"cmc{k}"] for t in per_trial])) for k in ranks}
    std = {k: float(np.std([t[f"cmc{k}"] for t in per_trial])) for k in ranks}
    maps = [t["mAP"] for t in per_trial]
    return CMCResult(
        ranks,
        mean,
        float(np.mean(maps)),
        len(results),
        per_trial,
        std,
        float(np.std(maps)),
        sum(r.n_probes for r in results),
        sum(r.n_skipped for r in results),
    )


def encode(model: RQEN, tracklets: Sequence[Tracklet], quality_fixed: bool | None = None) -> list[Entry]:
    """Video descriptors normalized over every frame of each tracklet."""
    return [Entry(t.tracklet_id, t.identity, t.camera, model.encode(t.frames, quality_fixed)) for t in tracklets]


Trainer = Callable[[Sequence[Tracklet], int], RQEN]


def repeated_trials(
    tracklets: Sequence[Tracklet],
    model: RQEN | None,
    protocol: str = "fifty-fifty-cross-camera",
    trials: int = 10,
    seed: int = 0,
    ranks: Sequence[int] = DEFAULT_RANKS,
    trainer: Trainer | None = None,
    quality_fixed: bool | None = None,
    probe_camera: str | None = None,
) -> CMCResult:
    """Evaluate over ``trials`` seeded identity splits and report mean and std.

    With a ``trainer`` the model is refit on each trial's training half.
    Otherwise the given model scores every trial's test half, and identities
    it was trained on are removed first so no trial tests on them.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    if model is None and trainer is None:
        raise ValueError("need a model or a trainer")
    if trainer is None and model.classes:
        seen = set(model.classes)
        tracklets = [t for t in tracklets if t.identity not in seen]
        if len({t.identity for t in tracklets}) < 2:
            raise DataError("fewer than two identities left after removing the model's training identities")
    seeds = np.random.SeedSequence(seed).generate_state(trials)
    cache: dict[str, Entry] = {}
    results = []
    for s in seeds:
        split = split_protocol(tracklets, protocol, int(s), probe_camera)
        if trainer is not None:
            m = trainer(split.train, int(s))
            probe, gallery = encode(m, split.probe, quality_fixed), encode(m, split.gallery, quality_fixed)
        else:
            for t in split.probe + split.gallery:
                if t.tracklet_id not in cache:
                    cache[t.tracklet_id] = encode(model, [t], quality_fixed)[0]
            probe = [cache[t.tracklet_id] for t in split.probe]
            gallery = [cache[t.tracklet_id] for t in split.gallery]
        results.append(cmc(probe, gallery, ranks))
    return combine_trials(results)


def evaluate_split(model: RQEN, split: Split, ranks: Sequence[int] = DEFAULT_RANKS, quality_fixed: bool | None = None) -> CMCResult:
    return cmc(encode(model, split.probe, quality_fixed), encode(model, split.gallery, quality_fixed), ranks)


@dataclass
class AggregatorComparison:
    quality: CMCResult
    uniform: CMCResult

    def format(self) -> str:
        lines = [f"{'rank':>6} {'quality':>16} {'uniform':>16}"]
        for (k, qm, qs), (_, um, us) in zip(self.quality.rows(), self.uniform.rows()):
            lines.append(f"{k:>6} {qm:8.4f}±{qs:<7.4f} {um:8.4f}±{us:.4f}")
        return "\n".join(lines)


def compare_aggregators(
    tracklets: Sequence[Tracklet],
    model: RQEN,
    protocol: str = "fifty-fifty-cross-camera",
    trials: int = 10,
    seed: int = 0,
    ranks: Sequence[int] = DEFAULT_RANKS,
) -> AggregatorComparison:
    """Same features and splits, aggregated with learned quality scores vs uniform weights."""
    q = repeated_trials(tracklets, model, protocol, trials, seed, ranks, quality_fixed=False)
    u = repeated_trials(tracklets, model, protocol, trials, seed, ranks, quality_fixed=True)
    return AggregatorComparison(q, u)


# ---------------------------------------------------------------------------
# reports


def write_report_csv(path: str | Path, result: CMCResult) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("rank", "mean", "std"))
        for k, m, s in result.rows():
            w.writerow((k, f"{m:.6f}", f"{s:.6f}"))


def write_comparison_csv(path: str | Path, comp: AggregatorComparison) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("rank", "quality_mean", "quality_std", "uniform_mean", "uniform_std"))
        for (k, qm, qs), (_, um, us) in zip(comp.quality.rows(), comp.uniform.rows()):
            w.writerow((k, f"{qm:.6f}", f"{qs:.6f}", f"{um:.6f}", f"{us:.6f}"))


def summary(result: CMCResult, title: str = "CMC") -> str:
    lines = [f"{title}: {result.trials} trial(s), {result.n_probes} probe evaluations"]
    for k, m, s in result.rows():
        label = f"rank-{k}" if k != "mAP" else "mAP"
        lines.append(f"  {label:<8} {100 * m:6.2f}% ± {100 * s:.2f}")
    return "\n".join(lines)


def cmc_svg(curves: dict[str, CMCResult], width: int = 480, height: int = 320) -> str:
    """Line plot of rank-k accuracy for one or more results."""
    colors = ("#d62728", "#1f77b4", "#2ca02c", "#9467bd")
    left, right, top, bottom = 50, 20, 20, 40
    pw, ph = width - left - right, height - top - bottom
    kmax = max(max(r.ranks) for r in curves.values())

    def xy(k, v):
        x = left + (pw * (k - 1) / max(kmax - 1, 1))
        return x, top + ph * (1.0 - v)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#000"/>',
    ]
    for v in (0.0, 0.5, 1.0):
        _, y = xy(1, v)
        parts.append(f'<text x="{left - 6}" y="{y + 4:.1f}" font-size="11" text-anchor="end">{v:.1f}</text>')
    for k in sorted({k for r in curves.values() for k in r.ranks}):
        x, _ = xy(k, 0)
        parts.append(f'<text x="{x:.1f}" y="{top + ph + 16}" font-size="11" text-anchor="middle">{k}</text>')
    for i, (name, res) in enumerate(curves.items()):
        pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in (xy(k, res.cmc[k]) for k in res.ranks))
        c = colors[i % len(colors)]
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{c}" stroke-width="2"/>')
        parts.append(f'<text x="{left + 8}" y="{top + 16 + 14 * i}" font-size="12" fill="{c}">{name}</text>')
    parts.append(f'<text x="{left + pw / 2:.1f}" y="{height - 6}" font-size="12" text-anchor="middle">rank</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
