import csv

import numpy as np
import pytest
import wfdb

from latent_ecg.beats import (
    WINDOW_AFTER,
    WINDOW_BEFORE,
    Beat,
    BeatClass,
    beats_to_matrix,
    denoise,
    downsample,
    ingest_corpus,
    map_aami,
    read_beats_csv,
    read_beats_jsonl,
    segment_beats,
    write_beats_jsonl,
)
from latent_ecg.wfdb_io import Annotation

FS = 360.0


def test_aami_mapping_matches_golden_table(data_dir):
    with open(data_dir / "aami_ec57.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 31
    for row in rows:
        expected = BeatClass[row["aami_class"]] if row["aami_class"] else None
        assert map_aami(row["symbol"]) == expected, row


def _ecg_like(n, rng, period=300):
    t = np.arange(n)
    x = np.zeros(n)
    for r in range(150, n - 50, period):
        x += np.exp(-0.5 * ((t - r) / 4.0) ** 2)
    return x + 0.01 * rng.standard_normal(n)


def test_denoise_constant_signal_is_zero():
    np.testing.assert_allclose(denoise(np.full(5000, 3.2), FS), 0.0, atol=1e-12)


def test_denoise_invariant_to_linear_drift(rng):
    x = _ecg_like(6000, rng)
    drift = 0.4 + 1e-4 * np.arange(x.size)
    np.testing.assert_allclose(denoise(x + drift, FS), denoise(x, FS), atol=1e-9)


def test_denoise_idempotent_on_sparse_spike_train():
    x = np.zeros(4000)
    x[100::350] = 1.0
    once = denoise(x, FS)
    np.testing.assert_allclose(denoise(once, FS), once, atol=1e-6)


def test_denoise_suppresses_wander(rng):
    n = 20000
    clean = _ecg_like(n, rng)
    wander = 0.5 * np.sin(2 * np.pi * 0.3 * np.arange(n) / FS)
    out = denoise(clean + wander, FS)
    ref = denoise(clean, FS)
    assert np.std(out - ref) < 0.1 * np.std(wander)


def test_denoise_rejects_non_finite():
    with pytest.raises(ValueError):
        denoise(np.array([0.0, np.nan, 1.0]), FS)


def test_segment_window_and_normalisation(rng):
    sig = _ecg_like(3000, rng)
    anns = [Annotation(50, "N"), Annotation(450, "V"), Annotation(1200, "+"), Annotation(2950, "A"), Annotation(1500, "/")]
    beats, skipped = segment_beats(sig, anns, FS, record_name="r")
    assert skipped == 2  # first and last windows fall off the record
    assert [b.label for b in beats] == [BeatClass.V, BeatClass.Q]
    for b in beats:
        assert len(b) == WINDOW_BEFORE + WINDOW_AFTER + 1 == 280
        assert b.values.min() == 0.0 and b.values.max() == 1.0
        np.testing.assert_allclose(b.millivolts(), sig[b.r_peak_index - 99 : b.r_peak_index + 181], atol=1e-12)
    assert beats[0].beat_id == "r:450"


def test_flat_window_gives_zeros():
    beats, _ = segment_beats(np.ones(1000), [Annotation(500, "N")], FS)
    np.testing.assert_array_equal(beats[0].values, 0.0)


def _beat(n=280):
    t = np.arange(n) / (n - 1)
    return Beat(t, np.sin(3 * t), BeatClass.N, "r", 1000, FS)


@pytest.mark.parametrize("factor, n_obs", [(1, 280), (4, 70), (8, 35)])
def test_downsample_lengths(factor, n_obs):
    b = downsample(_beat(), factor)
    assert len(b) == n_obs
    assert b.effective_frequency == FS / factor
    np.testing.assert_array_equal(b.times, _beat().times[::factor])


def test_downsample_factor_one_is_identity():
    b = _beat()
    assert downsample(b, 1) is b


@pytest.mark.parametrize("factor", [0, 280, 400])
def test_downsample_rejects_bad_factor(factor):
    with pytest.raises(ValueError):
        downsample(_beat(), factor)


def test_beat_validation():
    with pytest.raises(ValueError):
        Beat(np.array([0.0, 0.0]), np.array([1.0, 2.0]), BeatClass.N, "r", 0, FS)
    with pytest.raises(ValueError):
        Beat(np.array([0.0, 1.0]), np.array([1.0, np.inf]), BeatClass.N, "r", 0, FS)


def test_ingest_surrogate_matches_reference_annotations(surrogate_corpus):
    beats, summary = ingest_corpus(surrogate_corpus)
    expected = 0
    for name in summary["records"]:
        ann = wfdb.rdann(str(surrogate_corpus / name), "atr")
        n = wfdb.rdheader(str(surrogate_corpus / name)).sig_len
        expected += sum(1 for s, sym in zip(ann.sample, ann.symbol) if map_aami(sym) is not None and s - 99 >= 0 and s + 181 <= n)
    assert summary["n_beats"] == len(beats) == expected
    assert sum(summary["class_counts"].values()) == expected


def test_beat_files_roundtrip(tmp_path, surrogate_corpus):
    beats, _ = ingest_corpus(surrogate_corpus, records=["s01"])
    write_beats_jsonl(beats[:20], tmp_path / "b.jsonl")
    back = read_beats_jsonl(tmp_path / "b.jsonl")
    for a, b in zip(beats[:20], back):
        np.testing.assert_array_equal(a.values, b.values)
        assert (a.beat_id, a.label, a.amplitude_scale) == (b.beat_id, b.label, b.amplitude_scale)
    times, values, labels = beats_to_matrix(back)
    assert values.shape == (20, 280)


def test_read_beats_csv(tmp_path):
    path = tmp_path / "b.csv"
    path.write_text("record_name,r_peak_index,label,v0,v1,v2\nx,10,V,0.0,0.5,1.0\n")
    (b,) = read_beats_csv(path)
    assert b.label == BeatClass.V and b.beat_id == "x:10"
    np.testing.assert_array_equal(b.times, [0.0, 0.5, 1.0])
