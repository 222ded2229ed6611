"""Labelled clips, spectrogram segmentation, fold splits and synthetic data."""

from __future__ import annotations

import csv
import enum
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft

from .audio import AudioClip, MelSpectrogram, TARGET_SAMPLE_RATE


class ManifestError(ValueError):
    pass


class PhonationMode(enum.IntEnum):
    BREATHY = 0
    NEUTRAL = 1
    FLOW = 2
    PRESSED = 3

    @classmethod
    def parse(cls, name: str) -> "PhonationMode":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ManifestError(
                f"unknown phonation mode {name!r}; expected one of "
                + ", ".join(m.name.lower() for m in cls)
            ) from None

    @property
    def label(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class LabeledClip:
    source: str
    mode: PhonationMode
    pitch: str | None = None
    vowel: str | None = None


@dataclass(frozen=True)
class Segment:
    values: np.ndarray
    mode: PhonationMode
    clip_id: str
    frame_offset: int


# --------------------------------------------------------------------------
# Manifest

MANIFEST_HEADER = ["path", "mode", "pitch", "vowel"]


def load_manifest(path) -> list[LabeledClip]:
    """Parse a ``path,mode,pitch,vowel`` CSV into labelled clips."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != MANIFEST_HEADER:
            raise ManifestError(f"{path}: header must be {','.join(MANIFEST_HEADER)}")
        clips = []
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            row = row + [""] * (4 - len(row))
            source, mode, pitch, vowel = (cell.strip() for cell in row[:4])
            if not source:
                raise ManifestError(f"{path}:{lineno}: missing file path")
            if source in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate path {source!r}")
            seen.add(source)
            clips.append(LabeledClip(source, PhonationMode.parse(mode), pitch or None, vowel or None))
    return clips


def write_manifest(path, clips) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for c in clips:
            writer.writerow([c.source, c.mode.label, c.pitch or "", c.vowel or ""])


# --------------------------------------------------------------------------
# Segmentation


@dataclass(frozen=True)
class SegmentParams:
    """Durations driving the windowing, converted to frames per hop size."""

    window_ms: float = 500.0
    overlap_ms: float = 128.0
    trim_ms: float = 128.0

    def frames(self, hop_seconds: float) -> tuple[int, int, int]:
        """Return ``(window, stride, trim)`` in frames."""
        hop_ms = hop_seconds * 1e3
        window = int(round(self.window_ms / hop_ms))
        overlap = int(round(self.overlap_ms / hop_ms))
        # ceil guarantees at least trim_ms is removed; the epsilon absorbs float noise
        trim = int(math.ceil(self.trim_ms / hop_ms - 1e-9))
        stride = window - overlap
        if window < 1 or stride < 1:
            raise ValueError(f"degenerate segmentation for hop {hop_ms:.2f} ms")
        return window, stride, trim


def training_segment_count(n_frames: int, window: int, stride: int, trim: int) -> int:
    usable = n_frames - 2 * trim
    if usable < window:
        return 0
    return 1 + (usable - window) // stride


def segment_for_training(spec: MelSpectrogram, mode: PhonationMode,
                         params: SegmentParams = SegmentParams()) -> tuple[list[Segment], int]:
    """Trim both ends of the spectrogram and slide overlapping windows over it.

    Returns the segments and a skip count (1 when the trimmed spectrogram
    cannot hold a single window, else 0).
    """
    window, stride, trim = params.frames(spec.frame_hop_seconds)
    count = training_segment_count(spec.n_frames, window, stride, trim)
    if count == 0:
        return [], 1
    segments = []
    for k in range(count):
        start = trim + k * stride
        segments.append(Segment(spec.values[:, start:start + window].copy(), mode,
                                spec.source_id, start))
    return segments, 0


def segment_for_test(spec: MelSpectrogram, mode: PhonationMode,
                     params: SegmentParams = SegmentParams()) -> Segment:
    """The single window centred on the spectrogram."""
    window, _, _ = params.frames(spec.frame_hop_seconds)
    if spec.n_frames < window:
        raise ValueError(
            f"spectrogram has {spec.n_frames} frames, test window needs {window}"
        )
    offset = (spec.n_frames - window) // 2
    return Segment(spec.values[:, offset:offset + window].copy(), mode, spec.source_id, offset)


# --------------------------------------------------------------------------
# Folds


@dataclass(frozen=True)
class FoldSplit:
    assignments: dict[str, int]
    n_folds: int
    seed: int

    def members(self, fold: int) -> list[str]:
        return [cid for cid, f in self.assignments.items() if f == fold]

    def sizes(self) -> list[int]:
        counts = [0] * self.n_folds
        for f in self.assignments.values():
            counts[f] += 1
        return counts


def make_folds(clip_ids, n_folds: int = 10, seed: int = 0) -> FoldSplit:
    """Shuffle clip ids deterministically and deal them round-robin into folds.

    Accepts clip id strings or :class:`LabeledClip` records.  Splitting is
    per clip so every segment of a clip stays in one fold.
    """
    ids = [c.source if isinstance(c, LabeledClip) else str(c) for c in clip_ids]
    if len(set(ids)) != len(ids):
        raise ValueError("clip ids must be unique")
    if n_folds < 2:
        raise ValueError("need at least two folds")
    if len(ids) < n_folds:
        raise ValueError(f"{len(ids)} clips cannot fill {n_folds} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    assignments = {ids[j]: pos % n_folds for pos, j in enumerate(order)}
    return FoldSplit(assignments, n_folds, seed)


# --------------------------------------------------------------------------
# Segment sets and their on-disk form


@dataclass
class SegmentSet:
    """Stacked segments of one split: ``values`` has shape (N, bands, frames)."""

    values: np.ndarray
    labels: np.ndarray
    clip_ids: list[str]
    frame_offsets: np.ndarray

    @classmethod
    def from_segments(cls, segments, bands: int = 128, frames: int = 12) -> "SegmentSet":
        segments = list(segments)
        if not segments:
            return cls(np.zeros((0, bands, frames)), np.zeros(0, dtype=np.int64), [],
                       np.zeros(0, dtype=np.int64))
        shapes = {s.values.shape for s in segments}
        if len(shapes) != 1:
            raise ValueError(f"segments have inconsistent shapes {sorted(shapes)}")
        return cls(np.stack([s.values for s in segments]).astype(np.float64),
                   np.array([int(s.mode) for s in segments], dtype=np.int64),
                   [s.clip_id for s in segments],
                   np.array([s.frame_offset for s in segments], dtype=np.int64))

    def __len__(self) -> int:
        return self.values.shape[0]

    def subset(self, mask) -> "SegmentSet":
        idx = np.flatnonzero(mask)
        return SegmentSet(self.values[idx], self.labels[idx],
                          [self.clip_ids[i] for i in idx], self.frame_offsets[idx])

    def for_clips(self, clip_ids) -> "SegmentSet":
        wanted = set(clip_ids)
        return self.subset([c in wanted for c in self.clip_ids])

    def unique_clips(self) -> list[str]:
        return list(dict.fromkeys(self.clip_ids))


_SEGMENT_MAGIC = b"PHSEG\x00"
SEGMENT_FORMAT_VERSION = 1


def save_segments(path, segs: SegmentSet) -> None:
    """Write a split as header line + packed float64 values + label bytes.

    Layout: magic, little-endian u32 header length, UTF-8 JSON header
    (count, shape, clip id table), then ``count*bands*frames`` ``<f8``
    values, ``count`` u8 labels, ``count`` ``<u4`` clip indices and
    ``count`` ``<u4`` frame offsets.
    """
    clips = segs.unique_clips()
    index = {c: i for i, c in enumerate(clips)}
    n, bands, frames = segs.values.shape
    header = json.dumps({
        "version": SEGMENT_FORMAT_VERSION, "count": n, "bands": bands,
        "frames": frames, "clips": clips,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_SEGMENT_MAGIC + struct.pack("<I", len(header)) + header)
        fh.write(np.ascontiguousarray(segs.values, dtype="<f8").tobytes())
        fh.write(segs.labels.astype("u1").tobytes())
        fh.write(np.array([index[c] for c in segs.clip_ids], dtype="<u4").tobytes())
        fh.write(segs.frame_offsets.astype("<u4").tobytes())


def load_segments(path) -> SegmentSet:
    raw = Path(path).read_bytes()
    if not raw.startswith(_SEGMENT_MAGIC) or len(raw) < len(_SEGMENT_MAGIC) + 4:
        raise ValueError(f"{path}: not a segment file")
    pos = len(_SEGMENT_MAGIC)
    (hlen,) = struct.unpack("<I", raw[pos:pos + 4])
    pos += 4
    header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    if header.get("version") != SEGMENT_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported segment format {header.get('version')}")
    n, bands, frames = header["count"], header["bands"], header["frames"]
    expected = pos + n * bands * frames * 8 + n * 9
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    buf = io.BytesIO(raw[pos:])
    values = np.frombuffer(buf.read(n * bands * frames * 8), dtype="<f8").reshape(n, bands, frames)
    labels = np.frombuffer(buf.read(n), dtype="u1").astype(np.int64)
    clip_idx = np.frombuffer(buf.read(4 * n), dtype="<u4")
    offsets = np.frombuffer(buf.read(4 * n), dtype="<u4").astype(np.int64)
    clips = header["clips"]
    return SegmentSet(values.astype(np.float64), labels, [clips[i] for i in clip_idx], offsets)


# --------------------------------------------------------------------------
# Synthetic sustained vowels


@dataclass(frozen=True)
class ModeVoice:
    """Generator controls for one phonation mode.

    ``noise_ratio`` is the turbulent-noise energy as a fraction of the
    harmonic energy; ``noise_highpass_hz`` shapes where that noise lives.
    ``formant_boost_db`` raises harmonics inside ``formant_band_hz``.
    """

    harmonics: int
    noise_ratio: float
    tilt_db_per_octave: float
    am_depth: float
    am_rate_hz: float
    noise_highpass_hz: float = 0.0
    formant_band_hz: tuple[float, float] = (0.0, 0.0)
    formant_boost_db: float = 0.0
    vibrato_cents: float = 0.0


def _default_voices() -> dict[PhonationMode, ModeVoice]:
    return {
        PhonationMode.BREATHY: ModeVoice(harmonics=12, noise_ratio=0.35, tilt_db_per_octave=-12.0,
                                         am_depth=0.05, am_rate_hz=2.0, noise_highpass_hz=4000.0),
        PhonationMode.NEUTRAL: ModeVoice(harmonics=30, noise_ratio=0.04, tilt_db_per_octave=-6.0,
                                         am_depth=0.05, am_rate_hz=2.0, noise_highpass_hz=2000.0),
        PhonationMode.FLOW: ModeVoice(harmonics=30, noise_ratio=0.03, tilt_db_per_octave=-5.0,
                                      am_depth=0.45, am_rate_hz=5.5, noise_highpass_hz=2000.0,
                                      vibrato_cents=60.0),
        PhonationMode.PRESSED: ModeVoice(harmonics=40, noise_ratio=0.01, tilt_db_per_octave=-3.0,
                                         am_depth=0.05, am_rate_hz=2.0, noise_highpass_hz=2000.0,
                                         formant_band_hz=(1000.0, 3500.0), formant_boost_db=12.0),
    }


@dataclass(frozen=True)
class SynthConfig:
    n_clips: int = 100
    sample_rate: int = TARGET_SAMPLE_RATE
    f0_range_hz: tuple[float, float] = (196.0, 523.0)
    duration_range_s: tuple[float, float] = (1.0, 2.0)
    voices: dict = field(default_factory=_default_voices)
    peak_amplitude: float = 0.8
    jitter: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.n_clips < 0:
            raise ValueError("n_clips must be non-negative")
        for name in ("f0_range_hz", "duration_range_s"):
            lo, hi = getattr(self, name)
            if not 0 < lo < hi:
                raise ValueError(f"{name} must be an increasing positive range")
        if set(self.voices) != set(PhonationMode):
            raise ValueError("voices must define every phonation mode")
        params = [tuple(sorted(vars(v).items())) for v in self.voices.values()]
        if len(set(params)) != len(params):
            raise ValueError("per-mode voice parameters must be pairwise distinct")


_NOTE_NAMES = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"]
_VOWELS = ["a", "e", "i", "o", "u"]


def note_name(f0: float) -> str:
    midi = int(round(69 + 12 * math.log2(f0 / 440.0)))
    return f"{_NOTE_NAMES[midi % 12]}{midi // 12 - 1}"


def _render_voice(voice: ModeVoice, f0: float, duration: float, sr: int,
                  rng: np.random.Generator, jitter: float) -> np.ndarray:
    # per-clip parameter perturbation keeps the classes from being trivially separable
    def wobble(x):
        return x * (1.0 + jitter * rng.uniform(-1.0, 1.0))

    n = int(round(duration * sr))
    t = np.arange(n) / sr
    tilt = voice.tilt_db_per_octave + jitter * 4.0 * rng.uniform(-1.0, 1.0)
    vib_rate = 5.0 + rng.uniform(-0.5, 0.5)
    vib = 2.0 ** (wobble(voice.vibrato_cents) / 1200.0 * np.sin(2 * np.pi * vib_rate * t)) if voice.vibrato_cents else 1.0
    phase = 2 * np.pi * np.cumsum(f0 * np.broadcast_to(vib, t.shape)) / sr

    harmonic = np.zeros(n)
    lo, hi = voice.formant_band_hz
    offsets = rng.uniform(0, 2 * np.pi, size=voice.harmonics)
    # sin/cos of h*phase by the angle-addition recurrence
    c1, s1 = np.cos(phase), np.sin(phase)
    ch, sh = c1.copy(), s1.copy()
    for h in range(1, voice.harmonics + 1):
        fh = h * f0
        if fh >= 0.45 * sr:
            break
        gain_db = tilt * math.log2(h)
        if lo <= fh <= hi:
            gain_db += voice.formant_boost_db
        amp = 10.0 ** (gain_db / 20.0)
        harmonic += amp * (sh * math.cos(offsets[h - 1]) + ch * math.sin(offsets[h - 1]))
        ch, sh = ch * c1 - sh * s1, sh * c1 + ch * s1
    harmonic /= np.sqrt(np.mean(harmonic ** 2))

    noise = rng.standard_normal(n)
    if voice.noise_highpass_hz > 0:
        n_fft = scipy.fft.next_fast_len(n, real=True)
        spectrum = scipy.fft.rfft(noise, n_fft)
        freqs = np.fft.rfftfreq(n_fft, 1.0 / sr)
        spectrum *= 1.0 / (1.0 + (voice.noise_highpass_hz / np.maximum(freqs, 1.0)) ** 4)
        noise = scipy.fft.irfft(spectrum, n_fft)[:n]
    noise /= np.sqrt(np.mean(noise ** 2))
    signal = harmonic + np.sqrt(max(0.0, wobble(voice.noise_ratio))) * noise

    depth = min(0.95, max(0.0, wobble(voice.am_depth)))
    am_rate = wobble(voice.am_rate_hz)
    signal *= 1.0 + depth * np.sin(2 * np.pi * am_rate * t + rng.uniform(0, 2 * np.pi))

    # 20 ms raised-cosine onset/offset
    ramp = min(n // 2, int(0.02 * sr))
    if ramp > 0:
        fade = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        signal[:ramp] *= fade
        signal[-ramp:] *= fade[::-1]
    return signal


def synthesize_dataset(config: SynthConfig = SynthConfig()) -> list[tuple[AudioClip, LabeledClip]]:
    """Generate labelled sustained-vowel clips, modes dealt round-robin.

    Every clip draws from its own child seed, so the output is a pure
    function of ``config``.
    """
    children = np.random.SeedSequence(config.seed).spawn(config.n_clips)
    modes = list(PhonationMode)
    out = []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        mode = modes[i % len(modes)]
        f0 = float(np.exp(rng.uniform(*np.log(config.f0_range_hz))))
        duration = float(rng.uniform(*config.duration_range_s))
        signal = _render_voice(config.voices[mode], f0, duration, config.sample_rate, rng, config.jitter)
        signal *= config.peak_amplitude / np.max(np.abs(signal))
        vowel = _VOWELS[int(rng.integers(len(_VOWELS)))]
        label = LabeledClip(f"synth_{i:05d}_{mode.label}.wav", mode, note_name(f0), vowel)
        out.append((AudioClip(signal, config.sample_rate), label))
    return out
