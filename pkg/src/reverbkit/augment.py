"""Corrupted copies of a corpus: random-RIR reverberation, gain and noise."""

from __future__ import annotations

import shutil
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ArgumentError, DataError, ReverbkitError
from .manifest import Manifest, write_manifest
from .roomsim import Rir
from .sigproc import AudioClip, read_wav, write_wav

DIRECT_MAX_TAPS = 64


@dataclass
class CorruptionSpec:
    rir_pool: list = field(default_factory=list)
    snr_db: float | None = None
    gain_db: float = 0.0
    seed: int = 0
    keep_gain: bool = False
    reverb: bool = True

    def __post_init__(self):
        if self.snr_db is not None and not np.isfinite(self.snr_db):
            raise ArgumentError("SNR must be finite", snr_db=self.snr_db)
        if not np.isfinite(self.gain_db):
            raise ArgumentError("gain must be finite", gain_db=self.gain_db)

    @property
    def is_identity(self) -> bool:
        return not (self.reverb and self.rir_pool) and self.snr_db is None and self.gain_db == 0.0


def fft_convolve(x: np.ndarray, h: np.ndarray, block: int | None = None) -> np.ndarray:
    """Full linear convolution by FFT overlap-add."""
    x = np.asarray(x, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    n, m = len(x), len(h)
    if n == 0 or m == 0:
        return np.zeros(max(n + m - 1, 0))
    if block is None:
        block = max(m, 1024)
    nfft = 1 << int(np.ceil(np.log2(block + m - 1)))
    spec_h = np.fft.rfft(h, nfft)
    out = np.zeros(n + m - 1 + nfft)
    for start in range(0, n, block):
        seg = x[start:start + block]
        y = np.fft.irfft(np.fft.rfft(seg, nfft) * spec_h, nfft)
        out[start:start + nfft] += y
    return out[: n + m - 1]


def convolve_full(x: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Linear convolution over the nonzero support of h; short kernels go direct."""
    h = np.asarray(h, dtype=np.float64)
    nz = np.flatnonzero(h)
    full = np.zeros(len(x) + len(h) - 1)
    if nz.size == 0:
        return full
    first, last = nz[0], nz[-1]
    core = h[first:last + 1]
    if len(core) <= DIRECT_MAX_TAPS:
        y = np.convolve(np.asarray(x, dtype=np.float64), core)
    else:
        y = fft_convolve(x, core)
    full[first:first + len(y)] = y
    return full


def convolve(clip: AudioClip, rir: Rir) -> AudioClip:
    """Reverberate ``clip``; output is advanced by the direct-path delay and cut to input length."""
    if clip.sample_rate != rir.sample_rate:
        raise ArgumentError("sample-rate mismatch", clip=clip.sample_rate, rir=rir.sample_rate)
    full = convolve_full(clip.samples, rir.taps)
    d = int(rir.direct_index or 0)
    out = full[d:d + len(clip)]
    return AudioClip(out, clip.sample_rate, clip.id)


def utterance_rng(seed: int, utt_id: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(utt_id.encode("utf-8"))])


def corrupt(clip: AudioClip, spec: CorruptionSpec) -> tuple[AudioClip, int | None]:
    """Apply reverb (optional), peak renormalisation, gain and white noise.

    Returns the corrupted clip and the index of the RIR drawn from the pool.
    """
    rng = utterance_rng(spec.seed, clip.id)
    samples = np.asarray(clip.samples, dtype=np.float64)
    choice = None
    if spec.reverb and spec.rir_pool:
        choice = int(rng.integers(len(spec.rir_pool)))
        samples = convolve(clip, spec.rir_pool[choice]).samples
        if not spec.keep_gain:
            peak_in, peak_out = np.max(np.abs(clip.samples)), np.max(np.abs(samples))
            if peak_out > 0:
                samples = samples * (peak_in / peak_out)
    if spec.gain_db:
        samples = samples * 10.0 ** (spec.gain_db / 20.0)
    if spec.snr_db is not None:
        power = np.mean(samples ** 2)
        noise = rng.standard_normal(len(samples))
        samples = samples + noise * np.sqrt(power / 10.0 ** (spec.snr_db / 10.0))
    return AudioClip(samples.astype(np.float32), clip.sample_rate, clip.id), choice


def generate(manifest: Manifest, spec: CorruptionSpec, out_dir, domain: str = "IHM-r") -> Manifest:
    """Write one corrupted clip per utterance under ``out_dir``.

    Labels keep pointing at the clean stream. Any per-utterance failure
    removes the partial output and re-raises.
    """
    out_dir = Path(out_dir)
    staging = out_dir.parent / (out_dir.name + ".partial")
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir(parents=True)
    entries = []
    try:
        for entry in manifest:
            try:
                clip = read_wav(entry.audio, entry.id)
                if spec.is_identity:
                    out = clip
                else:
                    out, _ = corrupt(clip, spec)
                name = f"{entry.id}.wav"
                write_wav(out, staging / name)
            except ReverbkitError as exc:
                raise DataError(f"corruption failed for {entry.id}: {exc}", id=entry.id) from exc
            except OSError as exc:
                raise DataError(f"I/O failure for {entry.id}: {exc}", id=entry.id) from exc
            entries.append(replace(entry, audio=str(out_dir / name), domain=domain, features=None))
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    out_dir.mkdir(parents=True, exist_ok=True)
    for f in staging.iterdir():
        f.replace(out_dir / f.name)
    staging.rmdir()
    result = Manifest(entries, manifest.role)
    write_manifest(result, out_dir / "manifest.jsonl", relative_to=out_dir)
    return result
