import csv

import numpy as np
import pytest

from oracles import brute_force_cmc
from rqen.datakit import DataError, SynthConfig, synth_tracklets
from rqen.evalkit import (
    Entry,
    average_precision,
    cmc,
    cmc_from_distances,
    cmc_svg,
    combine_trials,
    compare_aggregators,
    cosine_distance,
    cosine_distance_matrix,
    repeated_trials,
    summary,
    write_comparison_csv,
    write_report_csv,
)
from rqen.model import RQEN, BackboneConfig, init_params


def test_cosine_examples(rng):
    a = rng.normal(size=5)
    assert cosine_distance(a, a) == pytest.approx(0.0, abs=1e-15)
    assert cosine_distance([1, 0], [0, 1]) == 1.0
    assert cosine_distance(a, -a) == 2.0
    with pytest.raises(ValueError, match="zero"):
        cosine_distance([0, 0], [1, 0])
    with pytest.raises(ValueError):
        cosine_distance([1, 0], [1, 0, 0])


def test_cosine_scale_invariant_and_symmetric(rng):
    x = rng.normal(size=(6, 4))
    d = cosine_distance_matrix(x, x)
    np.testing.assert_allclose(d, d.T, atol=1e-15)
    np.testing.assert_allclose(cosine_distance_matrix(3.5 * x, x * 0.2), d, atol=1e-14)
    assert np.all(d >= 0) and np.all(d <= 2)
    assert cosine_distance(x[0], x[1]) == pytest.approx(d[0, 1], abs=1e-15)


def test_two_probes_ranks_one_and_two():
    dist = np.array([[0.1, 0.5], [0.2, 0.3]])
    res = cmc_from_distances(dist, ["a", "b"], ["a", "b"], ranks=(1, 2))
    assert res.cmc == {1: 0.5, 2: 1.0}


def test_gallery_equal_to_probe(rng):
    feats = rng.normal(size=(5, 3))
    entries = [Entry(f"t{i}", f"id{i}", "c0", f) for i, f in enumerate(feats)]
    assert cmc(entries, entries, ranks=(1,)).cmc[1] == 1.0


def test_average_precision_example():
    dist = np.array([[0.1, 0.2, 0.3]])
    res = cmc_from_distances(dist, ["a"], ["a", "b", "a"], ranks=(1,))
    assert res.mAP == pytest.approx(5 / 6, abs=1e-15)
    assert average_precision(np.array([1, 3])) == pytest.approx(5 / 6, abs=1e-15)


def test_ties_broken_by_gallery_order():
    dist = np.array([[0.5, 0.5, 0.5]])
    assert cmc_from_distances(dist, ["x"], ["y", "x", "x"], ranks=(1, 2)).cmc == {1: 0.0, 2: 1.0}


def test_empty_and_missing():
    with pytest.raises(ValueError, match="non-empty"):
        cmc([], [Entry("g", "a", "c1", np.ones(2))])
    dist = np.array([[0.1, 0.2], [0.3, 0.4]])
    with pytest.raises(ValueError, match="absent"):
        cmc_from_distances(dist, ["a", "z"], ["a", "b"])
    res = cmc_from_distances(dist, ["a", "z"], ["a", "b"], ranks=(1,), allow_missing=True)
    assert res.n_probes == 1 and res.n_skipped == 1 and res.cmc[1] == 1.0
    with pytest.raises(ValueError, match="ranks"):
        cmc_from_distances(dist, ["a", "b"], ["a", "b"], ranks=(0,))


def test_matches_brute_force_oracle():
    rng = np.random.default_rng(77)
    for _ in range(50):
        ng = int(rng.integers(1, 12))
        gallery_ids = [f"i{int(v)}" for v in rng.integers(0, 5, ng)]
        probe_ids = [gallery_ids[int(j)] for j in rng.integers(0, ng, int(rng.integers(1, 8)))]
        dist = rng.integers(0, 4, (len(probe_ids), ng)) / 4.0  # many ties
        ranks = tuple(range(1, ng + 1))
        res = cmc_from_distances(dist, probe_ids, gallery_ids, ranks)
        want_cmc, want_map = brute_force_cmc(dist.tolist(), probe_ids, gallery_ids, ranks)
        assert res.cmc == {k: float(v) for k, v in want_cmc.items()}
        assert res.mAP == float(want_map)
        assert res.cmc[ng] == 1.0
        vals = [res.cmc[k] for k in ranks]
        assert vals == sorted(vals)


@pytest.fixture(scope="module")
def data_and_model():
    tracklets, _ = synth_tracklets(SynthConfig(identities=8, cameras=2, frames=3, seed=2))
    cfg = BackboneConfig(widths=(4, 6), quality_hidden=4)
    model = RQEN(init_params(cfg, 2, np.random.default_rng(0)), cfg)
    return tracklets, model


def test_single_trial_equals_single_cmc(data_and_model):
    from rqen.datakit import split_protocol
    from rqen.evalkit import evaluate_split

    tracklets, model = data_and_model
    seed = int(np.random.SeedSequence(5).generate_state(1)[0])
    one = repeated_trials(tracklets, model, trials=1, seed=5, ranks=(1, 2))
    direct = evaluate_split(model, split_protocol(tracklets, seed=seed), ranks=(1, 2))
    assert one.cmc == direct.cmc and one.mAP == direct.mAP


def test_repeated_trials_deterministic_and_std(data_and_model):
    tracklets, model = data_and_model
    a = repeated_trials(tracklets, model, trials=6, seed=1, ranks=(1, 3))
    b = repeated_trials(tracklets, model, trials=6, seed=1, ranks=(1, 3))
    assert a.per_trial == b.per_trial and a.trials == 6
    r1 = [t["cmc1"] for t in a.per_trial]
    assert a.cmc[1] == pytest.approx(sum(r1) / 6, abs=1e-15)
    assert a.cmc_std[1] == pytest.approx(np.sqrt(np.mean((np.array(r1) - np.mean(r1)) ** 2)), abs=1e-15)
    with pytest.raises(ValueError):
        repeated_trials(tracklets, model, trials=0)


def test_trials_exclude_training_identities(data_and_model):
    tracklets, model = data_and_model
    trained = RQEN(model.params, model.config, classes=tuple(f"id{i:03d}" for i in range(4)))
    trainer_free = repeated_trials(tracklets, trained, trials=3, seed=0, ranks=(1,))
    assert trainer_free.trials == 3
    everyone = RQEN(model.params, model.config, classes=tuple(f"id{i:03d}" for i in range(8)))
    with pytest.raises(DataError, match="training identities"):
        repeated_trials(tracklets, everyone, trials=1)


def test_repeated_trials_with_trainer(data_and_model):
    tracklets, model = data_and_model
    calls = []

    def trainer(train_set, seed):
        calls.append((sorted({t.identity for t in train_set}), seed))
        return model

    res = repeated_trials(tracklets, None, trials=3, seed=0, ranks=(1,), trainer=trainer)
    assert len(calls) == 3 and res.trials == 3
    assert len({tuple(c[0]) for c in calls}) > 1


def test_constant_quality_head_columns_identical(data_and_model):
    tracklets, model = data_and_model
    params = model.params.copy()
    for r in "uml":
        params.params[f"quality.{r}.w2"][:] = 0.0
    flat = RQEN(params, model.config)
    comp = compare_aggregators(tracklets, flat, trials=3, ranks=(1, 2))
    assert comp.quality.per_trial == comp.uniform.per_trial
    assert "quality" in comp.format()


def test_reports(tmp_path, data_and_model):
    tracklets, model = data_and_model
    res = repeated_trials(tracklets, model, trials=2, ranks=(1, 5))
    write_report_csv(tmp_path / "r.csv", res)
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["rank", "mean", "std"]
    assert [r[0] for r in rows[1:]] == ["1", "5", "mAP"]
    comp = compare_aggregators(tracklets, model, trials=2, ranks=(1,))
    write_comparison_csv(tmp_path / "c.csv", comp)
    assert open(tmp_path / "c.csv").readline().startswith("rank,quality_mean")
    assert "rank-1" in summary(res)
    svg = cmc_svg({"a": res})
    assert svg.startswith("<svg") and "polyline" in svg


def test_combine_trials_requires_results():
    with pytest.raises(ValueError):
        combine_trials([])
