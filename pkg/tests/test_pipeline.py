import warnings

import numpy as np
import pytest

from latent_ecg.beats import Beat, BeatClass
from latent_ecg.gbdt import GbdtConfig, fit
from latent_ecg.gbdt import predict as gbdt_predict
from latent_ecg.latent_ode import beat_window_times, encode_dist, encode_sample, init_model
from latent_ecg.pipeline import (
    DESK_PRESET,
    ExperimentManifest,
    PipelineConfig,
    beat_seed,
    class_capped_subset,
    encode_beats,
    frequency_factor,
    latent_matrix,
    mode_vote,
    predict_ensemble,
    run_frequency_experiment,
    split_dataset,
)


def _make_beats(counts, records=("100", "101", "102", "103", "104"), rng=None):
    rng = rng or np.random.default_rng(0)
    t = beat_window_times(280)
    beats = []
    i = 0
    for cls, n in counts.items():
        for _ in range(n):
            rec = records[i % len(records)]
            v = np.clip(0.5 + 0.3 * np.sin(2 * np.pi * t * (1 + int(cls))) + 0.02 * rng.standard_normal(t.size), 0, 1)
            beats.append(Beat(t, v, BeatClass(cls), rec, 1000 + 400 * i, 360.0))
            i += 1
    return beats


def _ids(beats):
    return [b.beat_id for b in beats]


def test_split_sizes_for_hundred_beats():
    beats = _make_beats({0: 100})
    tr, va, te = split_dataset(beats, seed=0)
    assert (len(tr), len(va), len(te)) == (70, 15, 15)


def test_split_is_disjoint_covering_and_stratified():
    beats = _make_beats({0: 400, 1: 60, 2: 100, 3: 20, 4: 40})
    parts = split_dataset(beats, seed=5)
    ids = [set(_ids(p)) for p in parts]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert set.union(*ids) == set(_ids(beats))
    for cls, n in {0: 400, 1: 60, 2: 100, 3: 20, 4: 40}.items():
        got = [sum(b.label == cls for b in p) for p in parts]
        assert got[0] == round(0.7 * n)
        assert got[1] == round(0.15 * n)


def test_split_deterministic_and_seed_dependent():
    beats = _make_beats({0: 80, 2: 30})
    a = split_dataset(beats, seed=1)
    b = split_dataset(beats, seed=1)
    c = split_dataset(beats, seed=2)
    assert [_ids(p) for p in a] == [_ids(p) for p in b]
    assert _ids(a[2]) != _ids(c[2])


def test_split_keeps_corpus_order():
    beats = _make_beats({0: 50, 1: 20})
    order = {bid: i for i, bid in enumerate(_ids(beats))}
    for part in split_dataset(beats, seed=0):
        pos = [order[b] for b in _ids(part)]
        assert pos == sorted(pos)


def test_tiny_class_goes_to_training_with_warning():
    beats = _make_beats({0: 30, 3: 2})
    with pytest.warns(UserWarning, match="class F"):
        tr, va, te = split_dataset(beats)
    assert sum(b.label == BeatClass.F for b in tr) == 2


def test_split_by_patient_keeps_records_whole():
    records = tuple(f"r{i}" for i in range(12))
    beats = _make_beats({0: 240, 2: 60}, records=records)
    parts = split_dataset(beats, seed=0, by_patient=True)
    recs = [{b.record_name for b in p} for p in parts]
    assert not (recs[0] & recs[1] or recs[0] & recs[2] or recs[1] & recs[2])
    assert sum(len(p) for p in parts) == 300


def test_bad_ratios_rejected():
    with pytest.raises(ValueError):
        split_dataset(_make_beats({0: 10}), ratios=(0.5, 0.5, 0.5))


def test_class_capped_subset():
    beats = _make_beats({0: 50, 1: 5, 2: 30})
    sub = class_capped_subset(beats, 10, seed=0)
    counts = np.bincount([int(b.label) for b in sub], minlength=5)
    assert counts.tolist() == [10, 5, 10, 0, 0]
    assert _ids(sub) == _ids(class_capped_subset(beats, 10, seed=0))


def test_mode_vote_majority():
    probs = np.full((3, 5), 0.2)
    assert mode_vote([0, 0, 2], probs) == BeatClass.N
    assert mode_vote([2, 0, 2], probs) == BeatClass.V


def test_mode_vote_tie_uses_probability_mass_then_index():
    probs = np.zeros((4, 5))
    probs[:, 1] = [0.6, 0.6, 0.1, 0.1]
    probs[:, 2] = [0.1, 0.1, 0.7, 0.7]
    assert mode_vote([1, 1, 2, 2], probs) == BeatClass.V
    assert mode_vote([3, 1], np.full((2, 5), 0.2)) == BeatClass.S


def test_mode_vote_permutation_invariant(rng):
    for _ in range(50):
        votes = rng.integers(0, 5, 9)
        probs = rng.dirichlet(np.ones(5), 9)
        perm = rng.permutation(9)
        assert mode_vote(votes, probs) == mode_vote(votes[perm], probs[perm])


def test_frequency_factors():
    assert frequency_factor(360) == 1
    assert frequency_factor(90) == 4
    assert frequency_factor(45) == 8
    with pytest.raises(ValueError):
        frequency_factor(100)


def test_beat_seed_stable():
    assert beat_seed(0, "100:5") == beat_seed(0, "100:5")
    assert beat_seed(0, "100:5") != beat_seed(1, "100:5")


@pytest.fixture(scope="module")
def small_setup():
    beats = _make_beats({0: 20, 1: 10, 2: 10, 3: 6, 4: 8})
    model = init_model(latent_dim=3, hidden_dim=4, width=6, depth=2, readout_width=6, seed=0)
    X, y = latent_matrix(encode_beats(model, beats, seed=0))
    gbdt = fit(X, y, GbdtConfig(n_rounds=5, max_depth=3, min_samples_leaf=2))
    return beats, model, gbdt


def test_single_draw_ensemble_equals_gbdt_prediction(small_setup):
    beats, model, gbdt = small_setup
    for beat in beats[:5]:
        pred = predict_ensemble(model, gbdt, beat, n=1, seed_base=10)
        z = encode_sample(model, beat, 11, dist=encode_dist(model, beat)).z0
        assert int(pred.final) == int(gbdt_predict(gbdt, z))


def test_ensemble_is_deterministic(small_setup):
    beats, model, gbdt = small_setup
    a = predict_ensemble(model, gbdt, beats[0], n=9)
    b = predict_ensemble(model, gbdt, beats[0], n=9)
    assert a.votes == b.votes and a.probabilities.tobytes() == b.probabilities.tobytes()
    assert len(a.votes) == 9 and a.probabilities.shape == (9, 5)


def test_frequency_experiment_shapes(small_setup):
    beats, model, gbdt = small_setup
    reports, preds = run_frequency_experiment(model, gbdt, beats[::4], (360, 90, 45), ensemble=3)
    assert [r.frequency for r in reports] == [360, 90, 45]
    assert all(len(p) == len(beats[::4]) for p in preds.values())


def test_manifest_roundtrip(tmp_path):
    out = tmp_path / "a.txt"
    out.write_text("hello")
    cfg = PipelineConfig(seed=3, **DESK_PRESET).to_dict()
    man = ExperimentManifest.build("split", cfg, {}, {"a": out}, tmp_path, extra={"n": 1})
    man.write(tmp_path / "m.json")
    back = ExperimentManifest.read(tmp_path / "m.json")
    assert back == man
    assert back.split_seed == 3 and back.ratios == (0.7, 0.15, 0.15)
    assert back.frequencies == (360, 90, 45) and back.ensemble_size == 9
    assert back.outputs["a"].startswith("a.txt#sha256:2cf24dba")


def test_config_rejects_unknown_and_invalid():
    with pytest.raises(ValueError, match="unknown"):
        PipelineConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        PipelineConfig(frequencies=(360, 100))
    with pytest.raises(ValueError):
        PipelineConfig(ensemble=0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert PipelineConfig.from_dict(PipelineConfig().to_dict()) == PipelineConfig()
