"""Audio I/O and the log-Mel filterbank front end."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ArgumentError, EmptyInputError, FormatError, UnsupportedError

SAMPLE_RATE = 16000
FEATURE_KINDS = ("log-mel", "z1-mean", "z1-mean+logvar")

_WAVE_FORMAT_PCM = 0x0001
_WAVE_FORMAT_IEEE_FLOAT = 0x0003
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 1:
            raise ArgumentError("audio must be mono", shape=list(self.samples.shape))
        if self.sample_rate <= 0:
            raise ArgumentError("sample_rate must be positive", sample_rate=self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise ArgumentError("audio contains non-finite samples", id=self.id)

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureMatrix:
    frames: np.ndarray
    frame_shift: float = 0.01
    feature_kind: str = "log-mel"
    source_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ArgumentError("feature matrix must be T x F with T >= 1",
                                shape=list(self.frames.shape))
        if self.feature_kind not in FEATURE_KINDS:
            raise ArgumentError(f"unknown feature kind {self.feature_kind!r}")
        if self.feature_kind == "log-mel" and self.frames.shape[1] != 80:
            raise ArgumentError("log-mel features must have 80 dimensions",
                                dims=self.frames.shape[1])
        if not np.all(np.isfinite(self.frames)):
            raise ArgumentError("features contain non-finite values", id=self.source_id)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


# ---------------------------------------------------------------- WAV I/O

def _iter_chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise FormatError("truncated chunk", chunk=cid.decode("latin-1"))
        yield cid, body
        pos += 8 + size + (size & 1)


def read_wav(path, clip_id: str | None = None) -> AudioClip:
    """Read a PCM16 or float32 RIFF/WAVE file; multi-channel input keeps channel 0."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise FormatError("not a RIFF/WAVE file", path=str(path))
    fmt = None
    payload = None
    for cid, body in _iter_chunks(data):
        if cid == b"fmt ":
            if len(body) < 16:
                raise FormatError("fmt chunk too short", path=str(path))
            fmt = struct.unpack_from("<HHIIHH", body, 0)
            if fmt[0] == _WAVE_FORMAT_EXTENSIBLE:
                if len(body) < 26:
                    raise FormatError("extensible fmt chunk too short", path=str(path))
                (sub_tag,) = struct.unpack_from("<H", body, 24)
                fmt = (sub_tag,) + fmt[1:]
        elif cid == b"data":
            payload = body
    if fmt is None or payload is None:
        raise FormatError("missing fmt or data chunk", path=str(path))
    tag, channels, rate, _, block_align, bits = fmt
    if channels < 1 or rate <= 0:
        raise FormatError("invalid channel count or sample rate", path=str(path))
    if tag == _WAVE_FORMAT_PCM and bits == 16:
        raw = np.frombuffer(payload[: len(payload) - len(payload) % (2 * channels)], dtype="<i2")
        samples = raw.reshape(-1, channels)[:, 0].astype(np.float32) / np.float32(32768.0)
    elif tag == _WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        raw = np.frombuffer(payload[: len(payload) - len(payload) % (4 * channels)], dtype="<f4")
        samples = raw.reshape(-1, channels)[:, 0].astype(np.float32)
    else:
        raise UnsupportedError(f"unsupported codec (format tag {tag}, {bits} bits)", path=str(path))
    return AudioClip(samples, int(rate), clip_id if clip_id is not None else path.stem)


def write_wav(clip: AudioClip, path, pcm16: bool = False) -> None:
    """Write mono float32 (default) or PCM16 WAVE."""
    path = Path(path)
    if pcm16:
        ints = np.clip(np.round(np.asarray(clip.samples, dtype=np.float64) * 32768.0), -32768, 32767)
        payload = ints.astype("<i2").tobytes()
        tag, bits = _WAVE_FORMAT_PCM, 16
    else:
        payload = np.asarray(clip.samples, dtype="<f4").tobytes()
        tag, bits = _WAVE_FORMAT_IEEE_FLOAT, 32
    block = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, clip.sample_rate, clip.sample_rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\x00"
    path.write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


# ---------------------------------------------------------------- log-Mel

@dataclass(frozen=True)
class LogMelConfig:
    sample_rate: int = SAMPLE_RATE
    window: int = 400
    hop: int = 160
    n_fft: int = 512
    n_mels: int = 80
    f_min: float = 20.0
    f_max: float = 8000.0
    floor: float = 1e-10


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(config: LogMelConfig = LogMelConfig()) -> np.ndarray:
    """Corner frequencies (n_mels + 2 points) of the triangular filters, in Hz."""
    mels = np.linspace(hz_to_mel(config.f_min), hz_to_mel(config.f_max), config.n_mels + 2)
    return mel_to_hz(mels)


@lru_cache(maxsize=8)
def _filterbank(config: LogMelConfig) -> np.ndarray:
    corners = mel_center_frequencies(config)
    freqs = np.arange(config.n_fft // 2 + 1) * config.sample_rate / config.n_fft
    lo, ctr, hi = corners[:-2, None], corners[1:-1, None], corners[2:, None]
    up = (freqs[None, :] - lo) / (ctr - lo)
    down = (hi - freqs[None, :]) / (hi - ctr)
    fb = np.maximum(0.0, np.minimum(up, down))
    empty = np.flatnonzero(fb.sum(axis=1) <= 0)
    if empty.size:
        raise ArgumentError("mel filters with no FFT bins; increase n_fft", filters=empty.tolist())
    fb.setflags(write=False)
    return fb


def mel_filterbank(config: LogMelConfig = LogMelConfig()) -> np.ndarray:
    """(n_mels, n_fft // 2 + 1) matrix of triangular filter weights."""
    return _filterbank(config).copy()


def num_frames(n_samples: int, window: int = 400, hop: int = 160) -> int:
    if n_samples < window:
        return 0
    return 1 + (n_samples - window) // hop


def power_spectrogram(samples: np.ndarray, config: LogMelConfig = LogMelConfig()) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    if len(x) < config.window:
        raise EmptyInputError("clip shorter than one analysis window",
                              samples=len(x), window=config.window)
    frames = np.lib.stride_tricks.sliding_window_view(x, config.window)[:: config.hop]
    spec = np.fft.rfft(frames * np.hamming(config.window), n=config.n_fft, axis=1)
    return spec.real ** 2 + spec.imag ** 2


def logmel(clip: AudioClip, config: LogMelConfig = LogMelConfig()) -> FeatureMatrix:
    """80-dim log-Mel energies, ln(max(energy, floor)) per frame and filter."""
    if clip.sample_rate != config.sample_rate:
        raise ArgumentError("sample rate mismatch", expected=config.sample_rate,
                            got=clip.sample_rate)
    power = power_spectrogram(clip.samples, config)
    energies = power @ _filterbank(config).T
    frames = np.log(np.maximum(energies, config.floor))
    return FeatureMatrix(frames, config.hop / config.sample_rate, "log-mel", clip.id)


# ---------------------------------------------------------------- FEAT1

FEAT_MAGIC = b"FEAT"
FEAT_VERSION = 1


def write_feat(features, path) -> None:
    frames = features.frames if isinstance(features, FeatureMatrix) else np.asarray(features)
    t, f = frames.shape
    header = FEAT_MAGIC + struct.pack("<BII", FEAT_VERSION, t, f)
    Path(path).write_bytes(header + np.ascontiguousarray(frames, dtype="<f4").tobytes())


def read_feat(path, feature_kind: str = "log-mel", source_id: str | None = None,
              frame_shift: float = 0.01) -> FeatureMatrix:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 13 or data[:4] != FEAT_MAGIC:
        raise FormatError("not a FEAT1 file", path=str(path))
    version, t, f = struct.unpack_from("<BII", data, 4)
    if version != FEAT_VERSION:
        raise UnsupportedError(f"unsupported FEAT version {version}", path=str(path))
    payload = data[13:]
    if len(payload) != 4 * t * f:
        raise FormatError("FEAT payload size does not match header", path=str(path))
    frames = np.frombuffer(payload, dtype="<f4").reshape(t, f).astype(np.float32)
    return FeatureMatrix(frames, frame_shift, feature_kind,
                         source_id if source_id is not None else path.stem)
