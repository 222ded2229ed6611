"""Audio decoding, resampling, silence trimming and mel-spectrogram extraction."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

TARGET_SAMPLE_RATE = 44100
N_MEL_BANDS = 128

_FORMAT_PCM = 0x0001
_FORMAT_FLOAT = 0x0003
_FORMAT_EXTENSIBLE = 0xFFFE


class AudioError(Exception):
    """Base class for audio processing failures."""


class WavFormatError(AudioError):
    """The byte stream is not a well-formed RIFF/WAVE container."""


class UnsupportedCodecError(AudioError):
    """The container is valid but its sample encoding is not supported."""


class EmptyAudioError(AudioError):
    """The container holds no audio frames."""


class SilentClipError(AudioError):
    """Every analysis frame of the clip falls below the silence gate."""


class ClipTooShortError(AudioError):
    """The clip is shorter than one analysis window."""


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"expected mono samples, got shape {samples.shape}")
        if samples.size == 0:
            raise EmptyAudioError("clip has no samples")
        if not np.all(np.isfinite(samples)):
            raise ValueError("clip contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    window_size: int = 2048
    overlap_fraction: float = 0.125
    window_function: str = "hann"

    def __post_init__(self):
        if self.window_size < 2:
            raise ValueError("window_size must be at least 2")
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise ValueError("overlap_fraction must lie in [0, 1)")
        if self.window_function not in _WINDOWS:
            raise ValueError(f"unknown window function {self.window_function!r}")
        if self.hop < 1:
            raise ValueError("derived hop must be at least one sample")

    @property
    def hop(self) -> int:
        return int(round(self.window_size * (1.0 - self.overlap_fraction)))

    def window(self) -> np.ndarray:
        return _WINDOWS[self.window_function](self.window_size)


def _hann(n: int) -> np.ndarray:
    # periodic form, so bin-centred tones land exactly on their bin
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


_WINDOWS = {
    "hann": _hann,
    "rectangular": lambda n: np.ones(n),
}


@dataclass(frozen=True)
class MelFilterbank:
    weights: np.ndarray
    center_freqs: np.ndarray
    f_min: float
    f_max: float
    sample_rate: int
    window_size: int

    @property
    def n_bands(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class MelSpectrogram:
    values: np.ndarray
    frame_hop_seconds: float
    source_id: str = ""
    log_compressed: bool = field(default=True)

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


# --------------------------------------------------------------------------
# WAV container


def decode_wav(data: bytes) -> AudioClip:
    """Decode a RIFF/WAVE byte string into a mono clip.

    PCM 16-bit and IEEE float 32-bit payloads with one or two channels are
    accepted; stereo is averaged down to mono.  PCM samples are scaled by
    1/32768 so that full-scale negative maps to exactly -1.
    """
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError("missing RIFF/WAVE signature")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        (size,) = struct.unpack("<I", data[pos + 4:pos + 8])
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise WavFormatError(
                f"chunk {chunk_id!r} declares {size} bytes but only {len(body)} remain"
            )
        if chunk_id == b"fmt ":
            fmt = body
        elif chunk_id == b"data":
            payload = body
            break
        pos += 8 + size + (size & 1)

    if fmt is None or len(fmt) < 16:
        raise WavFormatError("missing or short fmt chunk")
    if payload is None:
        raise WavFormatError("missing data chunk")

    tag, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", fmt[:16])
    if tag == _FORMAT_EXTENSIBLE:
        if len(fmt) < 26:
            raise WavFormatError("extensible fmt chunk is truncated")
        (tag,) = struct.unpack("<H", fmt[24:26])

    if channels not in (1, 2):
        raise UnsupportedCodecError(f"{channels} channels not supported")
    if tag == _FORMAT_PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif tag == _FORMAT_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise UnsupportedCodecError(f"format tag {tag:#06x} with {bits} bits not supported")
    if rate == 0:
        raise WavFormatError("sample rate of zero")
    if block_align != channels * dtype.itemsize:
        raise WavFormatError(f"block align {block_align} inconsistent with format")

    n_frames = len(payload) // block_align
    if n_frames == 0:
        raise EmptyAudioError("data chunk holds no frames")
    raw = np.frombuffer(payload[:n_frames * block_align], dtype=dtype)
    samples = raw.astype(np.float64).reshape(n_frames, channels).mean(axis=1) * scale
    if not np.all(np.isfinite(samples)):
        raise WavFormatError("float payload contains non-finite samples")
    return AudioClip(np.clip(samples, -1.0, 1.0), rate)


def encode_wav(clip: AudioClip, float32: bool = False) -> bytes:
    """Serialize a clip as a mono WAV (PCM16 by default)."""
    x = np.clip(clip.samples, -1.0, 1.0)
    if float32:
        payload = x.astype("<f4").tobytes()
        tag, bits = _FORMAT_FLOAT, 32
    else:
        payload = np.round(x * 32767.0).astype("<i2").tobytes()
        tag, bits = _FORMAT_PCM, 16
    block_align = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, clip.sample_rate,
                      clip.sample_rate * block_align, block_align, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    return b"RIFF" + struct.pack("<I", len(body)) + body


def read_wav(path) -> AudioClip:
    with open(path, "rb") as fh:
        return decode_wav(fh.read())


def write_wav(path, clip: AudioClip) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_wav(clip))


# --------------------------------------------------------------------------
# Resampling


def resample(clip: AudioClip, target_rate: int, taps: int = 32,
             kaiser_beta: float = 8.6) -> AudioClip:
    """Band-limited resampling with a Kaiser-windowed sinc kernel.

    Each output sample is interpolated from the ``taps`` input samples
    nearest to its position on the input time axis.  When downsampling the
    sinc cutoff is lowered to the output Nyquist frequency.
    """
    target_rate = int(target_rate)
    if target_rate <= 0:
        raise ValueError("target rate must be positive")
    if target_rate == clip.sample_rate:
        return clip

    x = clip.samples
    ratio = target_rate / clip.sample_rate
    n_out = max(1, int(round(x.size * ratio)))
    cutoff = min(1.0, ratio)
    half = taps // 2

    t = np.arange(n_out) / ratio
    base = np.floor(t).astype(np.int64)
    offsets = np.arange(-half + 1, half + 1)
    idx = base[:, None] + offsets[None, :]
    dist = t[:, None] - idx
    kernel = cutoff * np.sinc(cutoff * dist) * _kaiser_at(dist, half, kaiser_beta)

    valid = (idx >= 0) & (idx < x.size)
    gathered = np.where(valid, x[np.clip(idx, 0, x.size - 1)], 0.0)
    y = np.sum(gathered * kernel, axis=1)
    return AudioClip(np.clip(y, -1.0, 1.0), target_rate)


def _kaiser_at(dist: np.ndarray, half: int, beta: float) -> np.ndarray:
    r = np.clip(dist / half, -1.0, 1.0)
    return np.i0(beta * np.sqrt(1.0 - r * r)) / np.i0(beta)


# --------------------------------------------------------------------------
# Silence trimming


def trim_silence(clip: AudioClip, threshold_db: float = -60.0,
                 frame_ms: float = 20.0, hop_ms: float = 10.0) -> AudioClip:
    """Remove leading and trailing frames whose RMS sits below the gate.

    The gate is ``threshold_db`` relative to the loudest frame's RMS.
    Interior samples are never touched.
    """
    if threshold_db >= 0:
        raise ValueError("threshold_db must be negative")
    x = clip.samples
    frame = max(1, int(round(frame_ms * 1e-3 * clip.sample_rate)))
    hop = max(1, int(round(hop_ms * 1e-3 * clip.sample_rate)))

    n_frames = 1 + int(np.ceil(max(0, x.size - frame) / hop))
    starts = np.arange(n_frames) * hop
    rms = np.array([np.sqrt(np.mean(x[s:s + frame] ** 2)) for s in starts])
    peak = rms.max()
    if peak == 0.0:
        raise SilentClipError("clip is entirely silent")
    active = np.flatnonzero(rms >= peak * 10.0 ** (threshold_db / 20.0))
    begin = int(starts[active[0]])
    end = min(x.size, int(starts[active[-1]]) + frame)
    if begin == 0 and end == x.size:
        return clip
    return AudioClip(x[begin:end], clip.sample_rate)


# --------------------------------------------------------------------------
# Spectral analysis


def frame_count(length: int, window_size: int, hop: int) -> int:
    if length < window_size:
        return 0
    return 1 + (length - window_size) // hop


def stft_magnitude(clip: AudioClip, config: StftConfig = StftConfig()) -> np.ndarray:
    """Magnitude of the windowed DFT, shape ``(window_size // 2 + 1, frames)``."""
    n = config.window_size
    if clip.samples.size < n:
        raise ClipTooShortError(
            f"clip has {clip.samples.size} samples, one window needs {n}"
        )
    frames = np.lib.stride_tricks.sliding_window_view(clip.samples, n)[::config.hop]
    spectrum = np.fft.rfft(frames * config.window(), axis=1)
    return np.abs(spectrum).T


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def build_mel_filterbank(window_size: int = 2048, sample_rate: int = TARGET_SAMPLE_RATE,
                         n_bands: int = N_MEL_BANDS, f_min: float = 0.0,
                         f_max: float | None = None) -> MelFilterbank:
    """Triangular filters with centres equally spaced on the HTK mel scale.

    Band ``i`` rises linearly from edge ``i`` to its centre (weight 1) and
    falls back to zero at edge ``i + 2``.
    """
    if f_max is None:
        f_max = sample_rate / 2.0
    if not (0.0 <= f_min < f_max <= sample_rate / 2.0):
        raise ValueError(f"invalid band limits f_min={f_min}, f_max={f_max}")
    if n_bands < 1:
        raise ValueError("n_bands must be positive")

    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_bands + 2))
    bins = np.arange(window_size // 2 + 1) * sample_rate / window_size
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins[None, :] - lower) / (center - lower)
    falling = (upper - bins[None, :]) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    return MelFilterbank(weights, edges[1:-1].copy(), float(f_min), float(f_max),
                         int(sample_rate), int(window_size))


def mel_spectrogram(clip: AudioClip, config: StftConfig = StftConfig(),
                    bank: MelFilterbank | None = None, log_compress: bool = True,
                    source_id: str = "") -> MelSpectrogram:
    if bank is None:
        bank = build_mel_filterbank(config.window_size, clip.sample_rate)
    if clip.sample_rate != bank.sample_rate:
        raise ValueError(
            f"clip rate {clip.sample_rate} Hz does not match filterbank rate {bank.sample_rate} Hz"
        )
    if bank.window_size != config.window_size:
        raise ValueError("filterbank and STFT window sizes differ")
    mel = bank.weights @ stft_magnitude(clip, config)
    values = np.log1p(mel) if log_compress else mel
    return MelSpectrogram(values, config.hop / clip.sample_rate, source_id, log_compress)
