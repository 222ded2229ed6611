import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog

from phonation.audio import AudioClip, MelSpectrogram, mel_spectrogram
from phonation.dataset import (
    LabeledClip,
    ManifestError,
    PhonationMode,
    SegmentParams,
    SegmentSet,
    SynthConfig,
    load_manifest,
    load_segments,
    make_folds,
    save_segments,
    segment_for_test,
    segment_for_training,
    synthesize_dataset,
    training_segment_count,
    write_manifest,
)

HOP = 1792 / 44100


def _spec(n_frames, hop=HOP, bands=4):
    values = np.arange(bands * n_frames, dtype=np.float64).reshape(bands, n_frames)
    return MelSpectrogram(values, hop, "clip")


def _enumerate_windows(n_frames, window, stride, trim):
    """Brute force: every start inside the trimmed span whose window fits."""
    lo, hi = trim, n_frames - trim
    return [s for s in range(lo, hi) if (s - lo) % stride == 0 and s + window <= hi]


# ---- manifest


def test_manifest_row(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("path,mode,pitch,vowel\na.wav,breathy,A3,a\n")
    (clip,) = load_manifest(p)
    assert clip == LabeledClip("a.wav", PhonationMode.BREATHY, "A3", "a")


def test_manifest_unknown_mode(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("path,mode,pitch,vowel\na.wav,falsetto,A3,a\n")
    with pytest.raises(ManifestError, match="falsetto"):
        load_manifest(p)


def test_manifest_header_only(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("path,mode,pitch,vowel\n")
    assert load_manifest(p) == []


def test_manifest_round_trip(tmp_path):
    clips = [LabeledClip(f"{i}.wav", PhonationMode(i % 4), "C4" if i else None, "o") for i in range(6)]
    write_manifest(tmp_path / "m.csv", clips)
    assert load_manifest(tmp_path / "m.csv") == clips


def test_mode_encoding_is_stable():
    assert [m.label for m in PhonationMode] == ["breathy", "neutral", "flow", "pressed"]
    assert [int(m) for m in PhonationMode] == [0, 1, 2, 3]
    assert PhonationMode.parse(" Pressed ") is PhonationMode.PRESSED


# ---- segmentation


def test_default_frames():
    assert SegmentParams().frames(HOP) == (12, 9, 4)


def test_two_second_clip_gives_four_segments():
    assert training_segment_count(48, 12, 9, 4) == 1 + (40 - 12) // 9 == 4
    t = np.arange(88200) / 44100
    spec = mel_spectrogram(AudioClip(0.5 * np.sin(2 * np.pi * 300 * t), 44100))
    segs, skipped = segment_for_training(spec, PhonationMode.FLOW)
    assert skipped == 0 and len(segs) == 4
    assert all(s.values.shape == (128, 12) for s in segs)


def test_trimmed_equals_window_gives_one():
    segs, skipped = segment_for_training(_spec(12 + 8), PhonationMode.NEUTRAL)
    assert (len(segs), skipped) == (1, 0)
    assert segs[0].frame_offset == 4


def test_too_short_is_skipped():
    segs, skipped = segment_for_training(_spec(19), PhonationMode.NEUTRAL)
    assert segs == [] and skipped == 1


def test_segment_contents_follow_offsets():
    spec = _spec(60)
    segs, _ = segment_for_training(spec, PhonationMode.PRESSED)
    for s in segs:
        np.testing.assert_array_equal(s.values, spec.values[:, s.frame_offset:s.frame_offset + 12])


@settings(max_examples=1000, deadline=None)
@given(n=st.integers(0, 400), window=st.integers(1, 40), stride=st.integers(1, 40), trim=st.integers(0, 20))
def test_count_matches_enumeration(n, window, stride, trim):
    assert training_segment_count(n, window, stride, trim) == len(_enumerate_windows(n, window, stride, trim))


@settings(max_examples=300, deadline=None)
@given(duration=st.floats(0.1, 6.0), hop_ms=st.floats(5.0, 60.0))
def test_segment_offsets_match_enumeration(duration, hop_ms):
    hop = hop_ms / 1000
    n = int(duration / hop)
    window, stride, trim = SegmentParams().frames(hop)
    assert window == round(500 / hop_ms) and trim >= 128 / hop_ms - 1e-6
    segs, _ = segment_for_training(_spec(n, hop, bands=1), PhonationMode.BREATHY)
    assert [s.frame_offset for s in segs] == _enumerate_windows(n, window, stride, trim)


def test_test_window_whole_and_offset():
    assert segment_for_test(_spec(12), PhonationMode.FLOW).frame_offset == 0
    assert segment_for_test(_spec(14), PhonationMode.FLOW).frame_offset == 1
    with pytest.raises(ValueError):
        segment_for_test(_spec(11), PhonationMode.FLOW)


def test_three_second_test_window_is_centred():
    spec = mel_spectrogram(AudioClip(np.random.default_rng(0).uniform(-.5, .5, 3 * 44100), 44100))
    seg = segment_for_test(spec, PhonationMode.BREATHY)
    # offsets that leave equal (to within one frame) margins on both sides
    centred = [o for o in range(spec.n_frames - 11) if abs(o - (spec.n_frames - 12 - o)) <= 1 and o <= spec.n_frames - 12 - o]
    assert seg.frame_offset == centred[-1] == (spec.n_frames - 12) // 2
    assert seg.values.shape == (128, 12)


# ---- folds


def test_folds_even_split():
    folds = make_folds([f"c{i}" for i in range(20)], 10, seed=5)
    assert folds.sizes() == [2] * 10


def test_folds_uneven_split():
    folds = make_folds([f"c{i}" for i in range(23)], 10, seed=5)
    sizes = folds.sizes()
    assert sorted(sizes) == [2] * 7 + [3] * 3


def test_folds_deterministic():
    ids = [f"c{i}" for i in range(37)]
    assert make_folds(ids, 10, 3) == make_folds(ids, 10, 3)
    assert make_folds(ids, 10, 3).assignments != make_folds(ids, 10, 4).assignments


@settings(max_examples=50, deadline=None)
@given(n=st.integers(2, 120), k=st.integers(2, 12), seed=st.integers(0, 10**6))
def test_folds_partition(n, k, seed):
    if n < k:
        with pytest.raises(ValueError):
            make_folds([f"c{i}" for i in range(n)], k, seed)
        return
    folds = make_folds([f"c{i}" for i in range(n)], k, seed)
    members = [set(folds.members(f)) for f in range(k)]
    assert set().union(*members) == {f"c{i}" for i in range(n)}
    assert sum(len(m) for m in members) == n
    assert max(folds.sizes()) - min(folds.sizes()) <= 1


def test_no_clip_leaks_across_folds(rng):
    segs = []
    from phonation.dataset import Segment
    for c in range(30):
        for k in range(int(rng.integers(1, 5))):
            segs.append(Segment(rng.normal(size=(4, 3)), PhonationMode(c % 4), f"c{c}", k))
    ss = SegmentSet.from_segments(segs, 4, 3)
    folds = make_folds(ss.unique_clips(), 5, 0)
    for f in range(5):
        val = set(ss.for_clips(folds.members(f)).clip_ids)
        rest = set(ss.for_clips([c for c in ss.unique_clips() if c not in val]).clip_ids)
        assert not val & rest


# ---- persistence


def test_segment_file_round_trip(tmp_path, rng):
    from phonation.dataset import Segment
    segs = [Segment(rng.normal(size=(8, 5)), PhonationMode(i % 4), f"c{i // 2}", 3 * i) for i in range(7)]
    ss = SegmentSet.from_segments(segs, 8, 5)
    save_segments(tmp_path / "a.seg", ss)
    back = load_segments(tmp_path / "a.seg")
    np.testing.assert_array_equal(back.values, ss.values)
    np.testing.assert_array_equal(back.labels, ss.labels)
    np.testing.assert_array_equal(back.frame_offsets, ss.frame_offsets)
    assert back.clip_ids == ss.clip_ids
    raw = (tmp_path / "a.seg").read_bytes()
    (tmp_path / "b.seg").write_bytes(raw[:-3])
    with pytest.raises(ValueError):
        load_segments(tmp_path / "b.seg")


def test_empty_segment_set_round_trip(tmp_path):
    ss = SegmentSet.from_segments([], 128, 12)
    save_segments(tmp_path / "e.seg", ss)
    assert load_segments(tmp_path / "e.seg").values.shape == (0, 128, 12)


# ---- synthesizer


@pytest.fixture(scope="module")
def synth_items():
    return synthesize_dataset(SynthConfig(n_clips=120, seed=11))


def test_synth_deterministic():
    a = synthesize_dataset(SynthConfig(n_clips=4, seed=2, duration_range_s=(0.3, 0.4)))
    b = synthesize_dataset(SynthConfig(n_clips=4, seed=2, duration_range_s=(0.3, 0.4)))
    for (ca, la), (cb, lb) in zip(a, b):
        assert la == lb
        assert ca.samples.tobytes() == cb.samples.tobytes()


def test_synth_balance():
    items = synthesize_dataset(SynthConfig(n_clips=100, duration_range_s=(0.05, 0.06)))
    counts = np.bincount([int(l.mode) for _, l in items], minlength=4)
    assert counts.tolist() == [25, 25, 25, 25]


def test_synth_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(f0_range_hz=(300.0, 200.0))
    voices = SynthConfig().voices
    with pytest.raises(ValueError):
        SynthConfig(voices={**voices, PhonationMode.FLOW: voices[PhonationMode.NEUTRAL]})


def _hf_fraction(clip: AudioClip, cutoff=5000.0):
    power = np.abs(np.fft.rfft(clip.samples)) ** 2
    freqs = np.fft.rfftfreq(clip.samples.size, 1 / clip.sample_rate)
    return power[freqs > cutoff].sum() / power.sum()


def test_breathy_has_more_high_band_energy(synth_items):
    frac = {m: [] for m in PhonationMode}
    for clip, label in synth_items:
        frac[label.mode].append(_hf_fraction(clip))
    assert min(frac[PhonationMode.BREATHY]) > max(frac[PhonationMode.PRESSED])


def _separable(x, y, n_classes=4):
    """LP feasibility of a multiclass linear separator with unit margin."""
    n, d = x.shape
    xb = np.hstack([x, np.ones((n, 1))])
    rows = []
    for i in range(n):
        for k in range(n_classes):
            if k == y[i]:
                continue
            row = np.zeros((n_classes, d + 1))
            row[y[i]] -= xb[i]
            row[k] += xb[i]
            rows.append(row.ravel())
    a = np.array(rows)
    res = linprog(np.zeros(a.shape[1]), A_ub=a, b_ub=-np.ones(len(rows)), bounds=(None, None), method="highs")
    return res.status == 0


def test_classes_linearly_separable_in_mean_band_energy(synth_items):
    feats, labels = [], []
    for clip, label in synth_items:
        spec = mel_spectrogram(clip)
        # 16 coarse bands keep the feature space well below the sample count
        feats.append(spec.values.mean(axis=1).reshape(16, 8).mean(axis=1))
        labels.append(int(label.mode))
    x, y = np.array(feats), np.array(labels)
    assert len(x) > 4 * (x.shape[1] + 1)
    assert _separable(x, y)
    # control: the same features with shuffled labels are not separable
    assert not _separable(x, np.random.default_rng(0).permutation(y))
