"""Tiny fixed instance of the full training loss for gradient checking."""

from __future__ import annotations

import numpy as np

from .datakit import SynthConfig, synth_tracklets
from .gradcheck import DEFAULT_STEP, GradCheckReport, gradient_check
from .model import BackboneConfig, init_params
from .training import TrainConfig, TripletBatch, total_loss


def desk_setup(seed: int = 3, feature_dim: int = 8, quality_fixed: bool = False, regions=("u", "m", "l")):
    """2 identities x 2 cameras x 3 frames of 16x8 images, one triplet per identity."""
    backbone = BackboneConfig(height=16, width=8, widths=(4, feature_dim), quality_hidden=8)
    config = TrainConfig(margin=0.5, frames_per_sample=3, batch_size=2, seed=seed, regions=regions, quality_fixed=quality_fixed)
    tracklets, _ = synth_tracklets(
        SynthConfig(identities=2, cameras=2, frames=3, occlude_region="m", occlude_fraction=1 / 3, seed=seed)
    )
    by_key = {(t.identity, t.camera): t for t in tracklets}
    a0, p0 = by_key["id000", "c0"], by_key["id000", "c1"]
    a1, p1 = by_key["id001", "c0"], by_key["id001", "c1"]
    order = [a0, a1, p0, p1, a1, p0]  # anchors, positives, negatives
    batch = TripletBatch(np.stack([t.frames for t in order]), np.array([0, 1, 0, 1, 1, 0]), ["id000", "id001"])
    store = init_params(backbone, 2, np.random.default_rng(seed), regions)
    return store, batch, config, backbone


def desk_gradient_check(
    seed: int = 3,
    tolerance: float = 1e-4,
    step: float = DEFAULT_STEP,
    feature_dim: int = 8,
    quality_fixed: bool = False,
) -> GradCheckReport:
    store, batch, config, backbone = desk_setup(seed, feature_dim, quality_fixed)
    return gradient_check(lambda s: total_loss(batch, s, config, backbone).total, store, step, tolerance)
