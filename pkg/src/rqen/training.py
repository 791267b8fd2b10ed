"""Joint frame-level softmax and video-level triplet training."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .datakit import Tracklet
from .model import ALL_REGIONS, RQEN, BackboneConfig, forward_batch, init_params
from .regions import DEFAULT_LAYOUT, RegionLayout

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "loss_total", "loss_softmax", "loss_triplet", "mean_mu_u", "mean_mu_m", "mean_mu_l")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.3
    frames_per_sample: int = 8
    batch_size: int = 8
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 30
    steps_per_epoch: int | None = None
    seed: int = 0
    regions: tuple[str, ...] = ALL_REGIONS
    quality_fixed: bool = False

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("triplet margin must be non-negative")
        if self.frames_per_sample < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("frames_per_sample and batch_size must be >= 1, epochs >= 0")
        regions = tuple(r for r in ALL_REGIONS if r in set(self.regions))
        if not regions or len(regions) != len(set(self.regions)):
            raise ValueError(f"region mask must be a non-empty subset of {ALL_REGIONS}")
        object.__setattr__(self, "regions", regions)


@dataclass
class TripletBatch:
    frames: np.ndarray  # (3B, n_s, H, W, C): anchors, then positives, then negatives
    labels: np.ndarray  # (3B,) class index per sampled tracklet
    anchor_ids: list[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.frames.shape[0] // 3

    def frame_labels(self) -> np.ndarray:
        return np.repeat(self.labels, self.frames.shape[1])


def _sample_frames(t: Tracklet, n: int, rng: np.random.Generator) -> np.ndarray:
    replace = len(t) < n
    idx = np.sort(rng.choice(len(t), size=n, replace=replace))
    return t.frames[idx]


class TripletSampler:
    """Uniform anchor identities, same-identity positives (other camera when possible), random negatives."""

    def __init__(self, tracklets: Sequence[Tracklet], classes: Sequence[str] | None = None):
        self.tracklets = list(tracklets)
        self.by_id: dict[str, list[int]] = {}
        for i, t in enumerate(self.tracklets):
            self.by_id.setdefault(t.identity, []).append(i)
        if len(self.by_id) < 2:
            raise ValueError("triplet sampling needs at least two identities")
        self.classes = tuple(classes) if classes is not None else tuple(sorted(self.by_id))
        self.class_index = {c: i for i, c in enumerate(self.classes)}
        self.anchor_ids = sorted(i for i, idx in self.by_id.items() if len(idx) >= 2)
        if not self.anchor_ids:
            raise ValueError("no identity has two tracklets to form an anchor/positive pair")
        self.identities = sorted(self.by_id)

    def sample(self, config: TrainConfig, rng: np.random.Generator) -> TripletBatch:
        picks: list[tuple[int, int, int]] = []
        anchors = []
        for _ in range(config.batch_size):
            ident = self.anchor_ids[rng.integers(len(self.anchor_ids))]
            members = self.by_id[ident]
            a = members[rng.integers(len(members))]
            others = [i for i in members if i != a]
            cross = [i for i in others if self.tracklets[i].camera != self.tracklets[a].camera]
            pool = cross or others
            p = pool[rng.integers(len(pool))]
            neg_ids = [i for i in self.identities if i != ident]
            neg_members = self.by_id[neg_ids[rng.integers(len(neg_ids))]]
            n = neg_members[rng.integers(len(neg_members))]
            picks.append((a, p, n))
            anchors.append(ident)
        order = [trip[k] for k in range(3) for trip in picks]
        frames = np.stack([_sample_frames(self.tracklets[i], config.frames_per_sample, rng) for i in order])
        labels = np.array([self.class_index[self.tracklets[i].identity] for i in order])
        return TripletBatch(frames, labels, anchors)


def sample_triplets(tracklets: Sequence[Tracklet], config: TrainConfig, rng: np.random.Generator) -> TripletBatch:
    return TripletSampler(tracklets).sample(config, rng)


def softmax_loss(features, labels, params: Mapping[str, Tensor]) -> Tensor:
    logits = ad.add_bias(ad.matmul(features, params["classifier.w"]), params["classifier.b"])
    return ad.softmax_cross_entropy(logits, labels)


def triplet_loss(anchor, positive, negative, margin: float) -> Tensor:
    """Mean over rows of [d(a, p) + margin - d(a, n)]_+ with Euclidean d."""
    anchor, positive, negative = ad.as_tensor(anchor), ad.as_tensor(positive), ad.as_tensor(negative)
    gap = ad.add(ad.l2_distance(anchor, positive), margin) - ad.l2_distance(anchor, negative)
    return ad.mean(ad.hinge(gap))


@dataclass
class LossTerms:
    total: Tensor
    softmax: float
    triplet: float
    mean_scores: dict[str, float]


def total_loss(
    batch: TripletBatch,
    params: Mapping[str, Tensor],
    config: TrainConfig,
    backbone: BackboneConfig,
    layout: RegionLayout = DEFAULT_LAYOUT,
) -> LossTerms:
    out = forward_batch(batch.frames, params, layout, backbone, config.regions, config.quality_fixed)
    l_soft = softmax_loss(out.frame_descriptor(), batch.frame_labels(), params)
    desc = out.video.descriptor
    b = batch.size
    d = desc.shape[1]
    anchor = ad.slice_axis(desc, 0, 0, b)
    positive = ad.slice_axis(desc, 0, b, 2 * b)
    negative = ad.slice_axis(desc, 0, 2 * b, 3 * b)
    assert anchor.shape == (b, d)
    l_trip = triplet_loss(anchor, positive, negative, config.margin)
    means = {r: float(out.raw_scores[r].value.mean()) if r in out.raw_scores else math.nan for r in ALL_REGIONS}
    return LossTerms(ad.add(l_soft, l_trip), float(l_soft.value), float(l_trip.value), means)


class SGD:
    """Momentum SGD: v <- m v + g (+ wd p); p <- p - lr v."""

    def __init__(self, store: ParamStore, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.store = store
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(v) for k, v in store.items()}

    def step(self) -> None:
        for name, p in self.store.items():
            g = self.store.grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * p
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p -= self.lr * v


@dataclass
class TrainResult:
    model: RQEN
    metrics: list[dict[str, float]]


def train(
    tracklets: Sequence[Tracklet],
    config: TrainConfig = TrainConfig(),
    backbone: BackboneConfig = BackboneConfig(),
    layout: RegionLayout = DEFAULT_LAYOUT,
    on_step: Callable[[dict[str, float]], None] | None = None,
) -> TrainResult:
    """Train from scratch; every random draw comes from one generator seeded by ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    sampler = TripletSampler(tracklets)
    store = init_params(backbone, len(sampler.classes), rng, config.regions)
    opt = SGD(store, config.learning_rate, config.momentum, config.weight_decay)
    steps_per_epoch = config.steps_per_epoch or math.ceil(
        sum(len(sampler.by_id[i]) for i in sampler.anchor_ids) / config.batch_size
    )
    metrics = []
    for step in range(config.epochs * steps_per_epoch):
        batch = sampler.sample(config, rng)
        store.zero_grad()
        try:
            terms = total_loss(batch, store, config, backbone, layout)
        except ZeroDivisionError as exc:
            # every unit dead: features collapsed to zero
            raise TrainingDiverged(f"{exc} at step {step} (lr={config.learning_rate})") from None
        loss = float(terms.total.value)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} at step {step} (lr={config.learning_rate})")
        ad.backward(terms.total, store)
        opt.step()
        row = {
            "step": step,
            "loss_total": loss,
            "loss_softmax": terms.softmax,
            "loss_triplet": terms.triplet,
            **{f"mean_mu_{r}": terms.mean_scores[r] for r in ALL_REGIONS},
        }
        metrics.append(row)
        if on_step is not None:
            on_step(row)
    for name, p in store.items():
        if not np.all(np.isfinite(p)):
            raise TrainingDiverged(f"parameter {name} is not finite after training")
    model = RQEN(store, backbone, layout, config.regions, config.quality_fixed, sampler.classes)
    return TrainResult(model, metrics)


def write_metrics(path: str | Path, metrics: Sequence[Mapping[str, float]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for row in metrics:
            writer.writerow([row["step"]] + [repr(float(row[c])) for c in METRIC_COLUMNS[1:]])
