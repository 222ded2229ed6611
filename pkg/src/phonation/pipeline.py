"""Glue from raw audio to model-ready segment sets."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .audio import (
    AudioClip,
    AudioError,
    MelFilterbank,
    MelSpectrogram,
    StftConfig,
    TARGET_SAMPLE_RATE,
    build_mel_filterbank,
    mel_spectrogram,
    resample,
    trim_silence,
)
from .dataset import LabeledClip, Segment, SegmentParams, SegmentSet, segment_for_test, segment_for_training

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PreprocessConfig:
    sample_rate: int = TARGET_SAMPLE_RATE
    window_size: int = 2048
    overlap_fraction: float = 0.125
    n_bands: int = 128
    f_min: float = 0.0
    f_max: float | None = None
    log_compress: bool = True
    silence_db: float = -60.0
    window_ms: float = 500.0
    overlap_ms: float = 128.0
    trim_ms: float = 128.0

    @property
    def stft(self) -> StftConfig:
        return StftConfig(self.window_size, self.overlap_fraction)

    @property
    def segments(self) -> SegmentParams:
        return SegmentParams(self.window_ms, self.overlap_ms, self.trim_ms)

    @property
    def frames_per_segment(self) -> int:
        return self.segments.frames(self.stft.hop / self.sample_rate)[0]

    def filterbank(self) -> MelFilterbank:
        return _bank(self.window_size, self.sample_rate, self.n_bands, self.f_min, self.f_max)


_BANKS: dict = {}


def _bank(window_size, sample_rate, n_bands, f_min, f_max) -> MelFilterbank:
    key = (window_size, sample_rate, n_bands, f_min, f_max)
    if key not in _BANKS:
        _BANKS[key] = build_mel_filterbank(window_size, sample_rate, n_bands, f_min, f_max)
    return _BANKS[key]


def spectrogram_for(clip: AudioClip, config: PreprocessConfig = PreprocessConfig(),
                    source_id: str = "") -> MelSpectrogram:
    """Resample, trim silence and compute the log-mel spectrogram."""
    clip = resample(clip, config.sample_rate)
    clip = trim_silence(clip, config.silence_db)
    return mel_spectrogram(clip, config.stft, config.filterbank(), config.log_compress, source_id)


@dataclass
class PreprocessSummary:
    train_clips: int = 0
    train_segments: int = 0
    test_clips: int = 0
    test_segments: int = 0
    skipped: list[str] = field(default_factory=list)

    def format(self) -> str:
        return (f"training: {self.train_clips} original -> {self.train_segments} augmented; "
                f"test: {self.test_clips} original -> {self.test_segments} segments; "
                f"skipped {len(self.skipped)}")


def build_segment_sets(items, test_ids: set[str], config: PreprocessConfig = PreprocessConfig()):
    """Segment ``(AudioClip, LabeledClip)`` pairs into train and test sets.

    Training clips are windowed with overlap; test clips contribute their
    middle window only.  Clips that are silent or too short are skipped
    and listed in the summary.
    """
    train_segs: list[Segment] = []
    test_segs: list[Segment] = []
    summary = PreprocessSummary()
    for clip, label in items:
        try:
            spec = spectrogram_for(clip, config, label.source)
            if label.source in test_ids:
                test_segs.append(segment_for_test(spec, label.mode, config.segments))
                summary.test_clips += 1
                summary.test_segments += 1
            else:
                segs, skipped = segment_for_training(spec, label.mode, config.segments)
                if skipped:
                    raise ValueError("too short for one training window")
                train_segs.extend(segs)
                summary.train_clips += 1
                summary.train_segments += len(segs)
        except (AudioError, ValueError) as exc:
            log.warning("skipping %s: %s", label.source, exc)
            summary.skipped.append(label.source)
    frames = config.frames_per_segment
    return (SegmentSet.from_segments(train_segs, config.n_bands, frames),
            SegmentSet.from_segments(test_segs, config.n_bands, frames), summary)


def stratified_test_split(clips: list[LabeledClip], ratio: float, seed: int) -> set[str]:
    """Pick ``round(ratio * n)`` clips of every mode for the held-out test set."""
    if not 0 <= ratio < 1:
        raise ValueError("test split ratio must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    chosen: set[str] = set()
    by_mode: dict = {}
    for c in clips:
        by_mode.setdefault(int(c.mode), []).append(c.source)
    for mode in sorted(by_mode):
        ids = by_mode[mode]
        k = int(round(ratio * len(ids)))
        chosen.update(ids[i] for i in rng.permutation(len(ids))[:k])
    return chosen
