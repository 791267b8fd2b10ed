"""Region-based quality weighted aggregation of frame features.

Frames pass through a small convolutional backbone.  The early tap feeds a
per-region quality head whose sigmoid scores are normalized over the frames
of a tracklet; the late tap is average pooled per region and the regional
features are combined with those normalized scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .regions import DEFAULT_LAYOUT, REGION_NAMES, RegionLayout

ALL_REGIONS = REGION_NAMES


@dataclass(frozen=True)
class BackboneConfig:
    height: int = 16
    width: int = 8
    in_channels: int = 3
    widths: tuple[int, ...] = (8, 64)
    pool: tuple[bool, ...] = (True, False)
    early_tap: int = 0
    late_tap: int = 1
    quality_hidden: int = 32
    kernel: int = 3
    l2_normalize: bool = True

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "pool", tuple(bool(p) for p in self.pool))
        n = len(self.widths)
        if n == 0 or len(self.pool) != n:
            raise ValueError("widths and pool must be non-empty and of equal length")
        if not (0 <= self.early_tap < n and 0 <= self.late_tap < n):
            raise ValueError(f"taps must be stage indices in [0, {n})")
        if self.feature_dim < 2:
            raise ValueError("regional feature dimension must be at least 2")
        if self.kernel % 2 == 0 or self.quality_hidden < 1:
            raise ValueError("kernel must be odd and quality_hidden positive")
        for stage in range(n):
            h, _ = self.map_size(stage)
            if stage in (self.early_tap, self.late_tap) and h < 3:
                raise ValueError(f"stage {stage} map has {h} rows; need at least 3 for region splitting")

    @property
    def feature_dim(self) -> int:
        return self.widths[self.late_tap]

    @property
    def mid_channels(self) -> int:
        return self.widths[self.early_tap]

    def map_size(self, stage: int) -> tuple[int, int]:
        h, w = self.height, self.width
        for s in range(stage + 1):
            if self.pool[s]:
                if h % 2 or w % 2:
                    raise ValueError(f"stage {s} pools a {h}x{w} map; extents must be even")
                h, w = h // 2, w // 2
        return h, w


def _check_regions(regions: Sequence[str]) -> tuple[str, ...]:
    regions = tuple(r for r in ALL_REGIONS if r in set(regions))
    if not regions:
        raise ValueError("region mask must select at least one of u, m, l")
    return regions


def init_params(
    config: BackboneConfig,
    n_classes: int,
    rng: np.random.Generator,
    regions: Sequence[str] = ALL_REGIONS,
) -> ParamStore:
    """He-initialized backbone, quality branches for every region, classifier for the masked regions."""
    regions = _check_regions(regions)
    store = ParamStore()
    k = config.kernel
    cin = config.in_channels
    for s, cout in enumerate(config.widths):
        fan_in = cin * k * k
        store.add(f"conv{s}.w", rng.normal(0.0, np.sqrt(2.0 / fan_in), (cout, cin, k, k)))
        store.add(f"conv{s}.b", np.zeros(cout))
        cin = cout
    c, hid = config.mid_channels, config.quality_hidden
    for r in ALL_REGIONS:
        store.add(f"quality.{r}.w1", rng.normal(0.0, np.sqrt(2.0 / c), (c, hid)))
        store.add(f"quality.{r}.b1", np.zeros(hid))
        store.add(f"quality.{r}.w2", rng.normal(0.0, 0.1 / np.sqrt(hid), (hid, 1)))
        store.add(f"quality.{r}.b2", np.zeros(1))
    dim = len(regions) * config.feature_dim
    store.add("classifier.w", rng.normal(0.0, 0.1 / np.sqrt(dim), (dim, n_classes)))
    store.add("classifier.b", np.zeros(n_classes))
    return store


def _as_nchw(frames, config: BackboneConfig) -> Tensor:
    arr = frames.value if isinstance(frames, Tensor) else np.asarray(frames, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    expected = (config.height, config.width, config.in_channels)
    if arr.ndim != 4 or arr.shape[1:] != expected:
        raise ad.ShapeError(f"frames must be (N, {expected[0]}, {expected[1]}, {expected[2]}), got {arr.shape}")
    return Tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def featurize(frames, params: Mapping[str, Tensor], config: BackboneConfig) -> tuple[Tensor, Tensor]:
    """Run frames of shape (N, H, W, C) through the backbone; returns (mid, late) NCHW maps."""
    x = _as_nchw(frames, config)
    taps = []
    for s in range(len(config.widths)):
        x = ad.relu(ad.conv2d(x, params[f"conv{s}.w"], params[f"conv{s}.b"]))
        if config.pool[s]:
            x = ad.avg_pool2d(x, 2)
        taps.append(x)
    return taps[config.early_tap], taps[config.late_tap]


def featurize_frame(frame, params, config: BackboneConfig) -> tuple[Tensor, Tensor]:
    return featurize(np.asarray(frame)[None], params, config)


def _region_means(fmap: Tensor, layout: RegionLayout) -> list[Tensor]:
    """Per-region spatial mean of an (N, C, H, W) map -> three (N, C) tensors."""
    if fmap.value.ndim != 4:
        raise ad.ShapeError(f"expected an (N, C, H, W) map, got {fmap.shape}")
    return [ad.mean(ad.slice_axis(fmap, 2, a, b), axis=(2, 3)) for a, b in layout.rows(fmap.shape[2])]


def regional_features(late, layout: RegionLayout = DEFAULT_LAYOUT) -> list[Tensor]:
    return _region_means(ad.as_tensor(late), layout)


def raw_quality_scores(
    mid,
    layout: RegionLayout,
    params: Mapping[str, Tensor],
    regions: Sequence[str] = ALL_REGIONS,
) -> dict[str, Tensor]:
    """Sigmoid quality score per frame for each requested region; each (N,)."""
    pooled = dict(zip(ALL_REGIONS, _region_means(ad.as_tensor(mid), layout)))
    scores = {}
    for r in regions:
        h = ad.relu(ad.add_bias(ad.matmul(pooled[r], params[f"quality.{r}.w1"]), params[f"quality.{r}.b1"]))
        z = ad.add_bias(ad.matmul(h, params[f"quality.{r}.w2"]), params[f"quality.{r}.b2"])
        scores[r] = ad.reshape(ad.sigmoid(z), (z.shape[0],))
    return scores


def normalize_scores(raw) -> Tensor:
    """Divide each score by the sum over its tracklet (the last axis)."""
    raw = ad.as_tensor(raw)
    if raw.value.ndim == 0 or raw.shape[-1] == 0:
        raise ValueError("cannot normalize scores of an empty tracklet")
    if np.any(raw.value <= 0):
        raise ValueError("raw quality scores must be positive")
    return ad.divide(raw, ad.sum_(raw, axis=-1, keepdims=True))


@dataclass
class VideoFeature:
    parts: dict[str, Tensor]  # region -> (T, D) or (D,)

    @property
    def descriptor(self) -> Tensor:
        return ad.concat([self.parts[r] for r in ALL_REGIONS if r in self.parts], axis=-1)

    def numpy(self) -> np.ndarray:
        return self.descriptor.value.copy()


def aggregate_part(features, scores) -> Tensor:
    """Score-weighted sum over frames: features (..., n, D), scores (..., n) -> (..., D)."""
    features, scores = ad.as_tensor(features), ad.as_tensor(scores)
    if features.shape[:-1] != scores.shape:
        raise ValueError(f"feature/score count mismatch: {features.shape} vs {scores.shape}")
    weighted = ad.mul(features, ad.reshape(scores, scores.shape + (1,)))
    return ad.sum_(weighted, axis=-2)


def aggregate_set(
    features: Mapping[str, object],
    scores: Mapping[str, object],
    l2_normalize: bool = True,
) -> VideoFeature:
    parts = {}
    for r in ALL_REGIONS:
        if r not in features:
            continue
        f = aggregate_part(features[r], scores[r])
        parts[r] = ad.l2_normalize(f, axis=-1) if l2_normalize else f
    return VideoFeature(parts)


@dataclass
class BatchOutputs:
    video: VideoFeature  # parts (T, D)
    frame_features: dict[str, Tensor]  # region -> (T*n, D)
    raw_scores: dict[str, Tensor]  # region -> (T, n)
    scores: dict[str, Tensor]  # normalized, region -> (T, n)
    n_frames: int = 0
    regions: tuple[str, ...] = field(default=ALL_REGIONS)

    def frame_descriptor(self) -> Tensor:
        return ad.concat([self.frame_features[r] for r in self.regions], axis=-1)


def forward_batch(
    frames,
    params: Mapping[str, Tensor],
    layout: RegionLayout,
    config: BackboneConfig,
    regions: Sequence[str] = ALL_REGIONS,
    quality_fixed: bool = False,
) -> BatchOutputs:
    """Forward T equal-length tracklets given as an array (T, n, H, W, C)."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 5 or frames.shape[1] == 0 or frames.shape[0] == 0:
        raise ValueError(f"expected a non-empty (T, n, H, W, C) batch, got shape {frames.shape}")
    regions = _check_regions(regions)
    t, n = frames.shape[:2]
    mid, late = featurize(frames.reshape((t * n,) + frames.shape[2:]), params, config)
    feats = dict(zip(ALL_REGIONS, regional_features(late, layout)))
    feats = {r: feats[r] for r in regions}
    if quality_fixed:
        raw = {r: Tensor(np.ones((t, n))) for r in regions}
    else:
        scored = raw_quality_scores(mid, layout, params, regions)
        raw = {r: ad.reshape(scored[r], (t, n)) for r in regions}
    norm = {r: normalize_scores(raw[r]) for r in regions}
    d = config.feature_dim
    per_tracklet = {r: ad.reshape(feats[r], (t, n, d)) for r in regions}
    video = aggregate_set(per_tracklet, norm, config.l2_normalize)
    return BatchOutputs(video, feats, raw, norm, n, regions)


def forward_tracklet(
    frames,
    params: Mapping[str, Tensor],
    layout: RegionLayout,
    config: BackboneConfig,
    regions: Sequence[str] = ALL_REGIONS,
    quality_fixed: bool = False,
) -> BatchOutputs:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4 or frames.shape[0] == 0:
        raise ValueError("a tracklet needs at least one (H, W, C) frame")
    return forward_batch(frames[None], params, layout, config, regions, quality_fixed)


@dataclass
class RQEN:
    """Trained parameters together with everything needed to run inference."""

    params: ParamStore
    config: BackboneConfig = field(default_factory=BackboneConfig)
    layout: RegionLayout = DEFAULT_LAYOUT
    regions: tuple[str, ...] = ALL_REGIONS
    quality_fixed: bool = False
    classes: tuple[str, ...] = ()

    def frozen(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.params.items()}

    def run(self, frames, quality_fixed: bool | None = None) -> BatchOutputs:
        """Inference on one tracklet, normalizing over all its frames."""
        qf = self.quality_fixed if quality_fixed is None else quality_fixed
        return forward_tracklet(frames, self.frozen(), self.layout, self.config, self.regions, qf)

    def encode(self, frames, quality_fixed: bool | None = None) -> np.ndarray:
        return self.run(frames, quality_fixed).video.numpy()[0]

    def raw_scores(self, frames) -> np.ndarray:
        """Raw sigmoid scores (n, 3) for all three regions, regardless of the mask."""
        mid, _ = featurize(frames, self.frozen(), self.config)
        scored = raw_quality_scores(mid, self.layout, self.frozen())
        return np.stack([scored[r].value for r in ALL_REGIONS], axis=1)
