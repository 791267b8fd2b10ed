import math
from collections import Counter

import numpy as np
import pytest

from rqen import autodiff as ad
from rqen.datakit import SynthConfig, Tracklet, synth_tracklets
from rqen.desk import desk_setup
from rqen.model import BackboneConfig, featurize, init_params, regional_features
from rqen.regions import DEFAULT_LAYOUT
from rqen.training import (
    METRIC_COLUMNS,
    TrainConfig,
    TrainingDiverged,
    TripletBatch,
    TripletSampler,
    sample_triplets,
    softmax_loss,
    total_loss,
    train,
    triplet_loss,
    write_metrics,
)

TINY = BackboneConfig(widths=(4, 6), quality_hidden=4)


def _loss(a, p, n, tau):
    return float(triplet_loss(np.array([a], float), np.array([p], float), np.array([n], float), tau).value)


def test_triplet_examples():
    o = [0.0, 0.0]
    assert _loss(o, [0.2, 0.0], [0.9, 0.0], 0.3) == 0.0
    assert _loss(o, [0.5, 0.0], [0.4, 0.0], 0.3) == 0.4
    for dn in (0.1, 0.25, 0.7):
        assert _loss(o, o, [0.0, dn], 0.3) == max(0.3 - dn, 0.0)


def test_triplet_zero_iff_separated(rng):
    for _ in range(300):
        a, p, n = rng.normal(size=(3, 1, 5))
        tau = rng.uniform(0, 1)
        dp, dn = np.sqrt(((a - p) ** 2).sum()), np.sqrt(((a - n) ** 2).sum())
        loss = float(triplet_loss(a, p, n, tau).value)
        assert loss >= 0
        assert (loss == 0) == (dp + tau <= dn)


def test_triplet_batch_mean(rng):
    a, p, n = rng.normal(size=(3, 4, 3))
    each = [_loss(a[i], p[i], n[i], 0.5) for i in range(4)]
    assert float(triplet_loss(a, p, n, 0.5).value) == pytest.approx(sum(each) / 4, abs=1e-15)


def _head(logits):
    n, c = logits.shape
    return {"classifier.w": ad.Tensor(np.eye(c)), "classifier.b": ad.Tensor(np.zeros(c))}


def test_softmax_examples():
    uniform = np.zeros((3, 5))
    assert float(softmax_loss(uniform, np.array([0, 2, 4]), _head(uniform)).value) == pytest.approx(math.log(5), abs=1e-15)
    sharp = np.array([[20.0, 0.0]])
    assert float(softmax_loss(sharp, np.array([0]), _head(sharp)).value) < 1e-8
    two = np.array([[1.0, -1.0]])
    assert float(softmax_loss(two, np.array([0]), _head(two)).value) == pytest.approx(math.log1p(math.exp(-2)), abs=1e-15)
    with pytest.raises(ValueError):
        softmax_loss(two, np.array([2]), _head(two))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(margin=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(frames_per_sample=0)
    with pytest.raises(ValueError):
        TrainConfig(regions=())
    with pytest.raises(ValueError):
        TrainConfig(regions=("m", "x"))
    assert TrainConfig(regions=("l", "u")).regions == ("u", "l")


def test_zero_margin_separated_batch_is_softmax_only():
    store, batch, config, backbone = desk_setup(seed=0)
    b = batch.size
    frames = batch.frames.copy()
    frames[b : 2 * b] = frames[:b]  # positives identical to anchors
    same = TripletBatch(frames, batch.labels.copy(), batch.anchor_ids)
    cfg = TrainConfig(margin=0.0, frames_per_sample=3, batch_size=2)
    terms = total_loss(same, store, cfg, backbone)
    assert terms.triplet == 0.0
    assert float(terms.total.value) == terms.softmax


def test_quality_fixed_matches_average_pooling_loss():
    store, batch, config, backbone = desk_setup(seed=0)
    cfg = TrainConfig(margin=0.5, frames_per_sample=3, batch_size=2, quality_fixed=True)
    got = total_loss(batch, store, cfg, backbone)
    # hand-built average-pooling baseline on the same batch
    t, n = batch.frames.shape[:2]
    _, late = featurize(batch.frames.reshape((t * n,) + batch.frames.shape[2:]), store, backbone)
    feats = [f.value for f in regional_features(late, DEFAULT_LAYOUT)]
    video = []
    for f in feats:
        m = f.reshape(t, n, -1).mean(axis=1)
        video.append(m / np.linalg.norm(m, axis=1, keepdims=True))
    desc = np.concatenate(video, axis=1)
    b = batch.size
    dp = np.linalg.norm(desc[:b] - desc[b : 2 * b], axis=1)
    dn = np.linalg.norm(desc[:b] - desc[2 * b :], axis=1)
    trip = np.maximum(dp + 0.5 - dn, 0).mean()
    logits = np.concatenate(feats, axis=1) @ store.params["classifier.w"] + store.params["classifier.b"]
    logits -= logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    soft = -logp[np.arange(t * n), batch.frame_labels()].mean()
    assert got.triplet == pytest.approx(trip, abs=1e-12)
    assert got.softmax == pytest.approx(soft, abs=1e-12)


def _grads(regions=("u", "m", "l"), quality_fixed=False):
    store, batch, _, backbone = desk_setup(seed=0, regions=regions)
    cfg = TrainConfig(margin=0.5, frames_per_sample=3, batch_size=2, regions=regions, quality_fixed=quality_fixed)
    store.zero_grad()
    ad.backward(total_loss(batch, store, cfg, backbone).total, store)
    return store.grads


def test_quality_fixed_gives_zero_quality_gradient():
    grads = _grads(quality_fixed=True)
    for name, g in grads.items():
        if name.startswith("quality."):
            assert not g.any(), name
    assert any(grads[n].any() for n in grads if n.startswith("conv"))


def test_region_mask_zero_gradient_elsewhere():
    grads = _grads(regions=("m",))
    for name, g in grads.items():
        if name.startswith(("quality.u.", "quality.l.")):
            assert not g.any(), name
    assert grads["quality.m.w2"].any()
    assert grads["classifier.w"].shape[0] == 8


def test_full_model_quality_gradients_nonzero():
    grads = _grads()
    for r in "uml":
        assert grads[f"quality.{r}.w2"].any()


# ---------------------------------------------------------------------------
# sampling


def _flat_tracklets(ids, cams=2, frames=3):
    out = []
    for i in range(ids):
        for c in range(cams):
            out.append(Tracklet(f"t{i}_{c}", f"id{i}", f"c{c}", np.full((frames, 16, 8, 3), i / ids)))
    return out


def test_sampler_deterministic_and_valid():
    tracklets, _ = synth_tracklets(SynthConfig(identities=2, cameras=2, frames=3, seed=0))
    cfg = TrainConfig(batch_size=4, frames_per_sample=2)
    a = sample_triplets(tracklets, cfg, np.random.default_rng(5))
    b = sample_triplets(tracklets, cfg, np.random.default_rng(5))
    assert a.frames.tobytes() == b.frames.tobytes()
    assert a.frames.shape == (12, 2, 16, 8, 3)
    lab = a.labels
    assert np.all(lab[:4] == lab[4:8]) and np.all(lab[:4] != lab[8:])


def test_positive_prefers_other_camera():
    # pixel value encodes (identity, camera); identity 0 has two tracklets in c0 and one in c1
    spec = [(0, 0), (0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (2, 1)]
    tracklets = [
        Tracklet(f"t{k}", f"id{i}", f"c{c}", np.full((2, 16, 8, 3), 10 * i + c, dtype=float))
        for k, (i, c) in enumerate(spec)
    ]
    sampler = TripletSampler(tracklets)
    rng = np.random.default_rng(0)
    cfg = TrainConfig(batch_size=4, frames_per_sample=1)
    for _ in range(100):
        batch = sampler.sample(cfg, rng)
        code = batch.frames[:, 0, 0, 0, 0].astype(int)
        a, p, n = code[:4], code[4:8], code[8:]
        assert np.all(a // 10 == p // 10)
        assert np.all(a % 10 != p % 10)
        assert np.all(a // 10 != n // 10)


def test_single_tracklet_identity_never_anchors():
    tracklets = _flat_tracklets(4)
    tracklets.append(Tracklet("lonely", "solo", "c0", np.zeros((3, 16, 8, 3))))
    sampler = TripletSampler(tracklets)
    assert "solo" not in sampler.anchor_ids
    rng = np.random.default_rng(1)
    for _ in range(100):
        batch = sampler.sample(TrainConfig(batch_size=4, frames_per_sample=1), rng)
        assert "solo" not in batch.anchor_ids


def test_sampler_rejects_degenerate_data():
    with pytest.raises(ValueError, match="two identities"):
        TripletSampler(_flat_tracklets(1))
    with pytest.raises(ValueError, match="anchor"):
        TripletSampler(_flat_tracklets(3, cams=1))


def test_anchor_identities_uniform():
    sampler = TripletSampler(_flat_tracklets(10, frames=1))
    rng = np.random.default_rng(2024)
    counts = Counter()
    cfg = TrainConfig(batch_size=100, frames_per_sample=1)
    for _ in range(100):
        counts.update(sampler.sample(cfg, rng).anchor_ids)
    total = sum(counts.values())
    assert total == 10_000
    expected = total / 10
    for ident in sampler.anchor_ids:
        assert abs(counts[ident] - expected) <= 0.1 * expected
    chi2 = sum((counts[i] - expected) ** 2 / expected for i in sampler.anchor_ids)
    assert chi2 < 27.88  # 0.999 quantile, 9 degrees of freedom


def test_short_tracklets_sampled_with_replacement():
    tracklets = _flat_tracklets(2, frames=2)
    batch = sample_triplets(tracklets, TrainConfig(batch_size=1, frames_per_sample=5), np.random.default_rng(0))
    assert batch.frames.shape[1] == 5


# ---------------------------------------------------------------------------
# training loop


@pytest.fixture(scope="module")
def two_ids():
    tracklets, _ = synth_tracklets(SynthConfig(identities=2, cameras=2, frames=4, seed=4))
    return tracklets


def _cfg(**kw):
    base = dict(frames_per_sample=3, batch_size=2, epochs=1, steps_per_epoch=50, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def test_smoke_training_lowers_loss(two_ids):
    metrics = train(two_ids, _cfg(), TINY).metrics
    assert len(metrics) == 50
    assert metrics[-1]["loss_total"] < metrics[0]["loss_total"]


def test_zero_learning_rate_keeps_parameters(two_ids):
    init = train(two_ids, _cfg(epochs=0), TINY).model.params
    after = train(two_ids, _cfg(learning_rate=0.0, steps_per_epoch=5), TINY).model.params
    for name, arr in init.items():
        assert after.params[name].tobytes() == arr.tobytes()


def test_same_seed_same_curve_and_params(two_ids):
    a = train(two_ids, _cfg(steps_per_epoch=10), TINY)
    b = train(two_ids, _cfg(steps_per_epoch=10), TINY)
    assert a.metrics == b.metrics
    for name, arr in a.model.params.items():
        assert b.model.params.params[name].tobytes() == arr.tobytes()
    c = train(two_ids, _cfg(steps_per_epoch=10, seed=4), TINY)
    assert c.metrics != a.metrics


def test_divergence_aborts(two_ids):
    with pytest.raises(TrainingDiverged):
        train(two_ids, _cfg(learning_rate=1e8, steps_per_epoch=30), TINY)


def test_metrics_csv(tmp_path, two_ids):
    result = train(two_ids, _cfg(steps_per_epoch=3), TINY)
    path = tmp_path / "m.csv"
    write_metrics(path, result.metrics)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(METRIC_COLUMNS)
    assert len(lines) == 4
    row = result.metrics[0]
    assert 0 < row["mean_mu_m"] < 1
    assert row["loss_total"] == pytest.approx(row["loss_softmax"] + row["loss_triplet"], abs=1e-12)


def test_default_steps_per_epoch(two_ids):
    result = train(two_ids, TrainConfig(epochs=1, batch_size=3, frames_per_sample=2), TINY)
    assert len(result.metrics) == math.ceil(4 / 3)


def test_masked_training_checkpoint_regions(two_ids):
    model = train(two_ids, _cfg(steps_per_epoch=2, regions=("m",)), TINY).model
    assert model.regions == ("m",)
    assert model.encode(two_ids[0].frames).shape == (6,)
