import struct

import numpy as np
import pytest

from phonation.audio import AudioClip


def wav_bytes(samples, rate=44100, channels=1, bits=16, fmt=1, data_size=None):
    """Hand-assembled RIFF/WAVE file, independent of the package encoder."""
    samples = np.asarray(samples)
    if fmt == 1:
        payload = np.asarray(samples, dtype="<i2").tobytes()
    else:
        payload = np.asarray(samples, dtype="<f4").tobytes()
    block = channels * bits // 8
    fmt_chunk = struct.pack("<HHIIHH", fmt, channels, rate, rate * block, block, bits)
    size = len(payload) if data_size is None else data_size
    body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt_chunk + b"data" + struct.pack("<I", size) + payload
    return b"RIFF" + struct.pack("<I", 4 + len(body) - 4) + body


def tone(freq, seconds=1.0, rate=44100, amp=0.5):
    t = np.arange(int(round(seconds * rate))) / rate
    return AudioClip(amp * np.sin(2 * np.pi * freq * t), rate)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance results, reported once at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {detail}")
