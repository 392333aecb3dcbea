"""Synthetic close-talking corpus and its simulated distant-microphone copy.

Each utterance is a chain of "phone units". A unit of class k is band-pass
noise around a class-specific centre frequency plus a class-specific tone;
frame labels are the class of the unit under the centre of each analysis
window.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import butter, sosfilt

from ..augment import CorruptionSpec, generate
from ..errors import ArgumentError
from ..manifest import Entry, Manifest, write_labels, write_manifest
from ..sigproc import SAMPLE_RATE, AudioClip, LogMelConfig, write_wav

HOP = LogMelConfig().hop
WINDOW = LogMelConfig().window


@dataclass
class CorpusParams:
    n_train: int = 40
    n_dev: int = 10
    n_test: int = 10
    frames_per_utt: int = 500
    n_label_classes: int = 8
    unit_frames: tuple = (10, 40)
    f_low: float = 400.0
    f_high: float = 6000.0
    bandwidth: float = 0.5
    centre_jitter: float = 0.15
    filter_order: int = 1
    tone_level: float = 1.0
    tone_jitter: float = 0.05
    level_jitter_db: float = 6.0
    # broadband background of the close-talking channel, relative to speech RMS
    floor_db: float = -40.0
    peak: float = 0.5

    def __post_init__(self):
        self.unit_frames = tuple(self.unit_frames)
        if self.n_label_classes < 2:
            raise ArgumentError("need at least two label classes",
                                n_label_classes=self.n_label_classes)
        if min(self.n_train, self.n_dev, self.n_test) < 1:
            raise ArgumentError("every split needs at least one utterance")
        if not 1 <= self.unit_frames[0] <= self.unit_frames[1]:
            raise ArgumentError("bad unit length range", unit_frames=self.unit_frames)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["unit_frames"] = list(self.unit_frames)
        return d


@dataclass
class UnitClass:
    centre: float
    tone: float


@dataclass
class SynthCorpus:
    root: Path
    manifests: dict
    classes: list = field(default_factory=list)

    def __getitem__(self, role: str) -> Manifest:
        return self.manifests[role]


def unit_classes(params: CorpusParams, rng: np.random.Generator) -> list[UnitClass]:
    k = params.n_label_classes
    centres = np.geomspace(params.f_low, params.f_high, k)
    centres *= np.exp(rng.uniform(-0.05, 0.05, k))
    tones = rng.permutation(np.geomspace(params.f_low, params.f_high, k))
    return [UnitClass(float(c), float(t)) for c, t in zip(centres, tones)]


def render_unit(cls: UnitClass, n: int, params: CorpusParams, rng) -> np.ndarray:
    centre = cls.centre * np.exp(rng.uniform(-params.centre_jitter, params.centre_jitter))
    lo = centre * (1.0 - params.bandwidth)
    hi = min(centre * (1.0 + params.bandwidth), SAMPLE_RATE / 2 - 100.0)
    sos = butter(params.filter_order, [lo, hi], btype="band", fs=SAMPLE_RATE, output="sos")
    noise = sosfilt(sos, rng.standard_normal(n + 256))[256:]
    noise /= np.sqrt(np.mean(noise ** 2)) + 1e-12
    t = np.arange(n) / SAMPLE_RATE
    f_tone = cls.tone * np.exp(rng.uniform(-params.tone_jitter, params.tone_jitter))
    tone = np.sqrt(2.0) * np.sin(2 * np.pi * f_tone * t + rng.uniform(0, 2 * np.pi))
    unit = noise + params.tone_level * tone
    ramp = min(80, n // 4)
    env = np.ones(n)
    env[:ramp] = np.linspace(0.0, 1.0, ramp)
    env[n - ramp:] = np.linspace(1.0, 0.0, ramp)
    gain = 10.0 ** (rng.uniform(-params.level_jitter_db, params.level_jitter_db) / 20.0)
    return unit * env * gain


def render_utterance(classes, params: CorpusParams, rng):
    """Waveform and per-frame labels of one utterance."""
    n_samples = (params.frames_per_utt - 1) * HOP + WINDOW
    pieces, sample_labels = [], []
    total = 0
    while total < n_samples:
        k = int(rng.integers(len(classes)))
        n = int(rng.integers(params.unit_frames[0], params.unit_frames[1] + 1)) * HOP
        pieces.append(render_unit(classes[k], n, params, rng))
        sample_labels.append(np.full(n, k))
        total += n
    audio = np.concatenate(pieces)[:n_samples]
    lab = np.concatenate(sample_labels)[:n_samples]
    rms = np.sqrt(np.mean(audio ** 2))
    audio = audio + rng.standard_normal(n_samples) * rms * 10.0 ** (params.floor_db / 20.0)
    audio *= params.peak / np.max(np.abs(audio))
    centres = np.arange(params.frames_per_utt) * HOP + WINDOW // 2
    return audio.astype(np.float32), lab[centres]


def synth_corpus(params: CorpusParams, seed: int, out_dir) -> SynthCorpus:
    """Write clean WAVs, label files and one manifest per split under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([seed, 7])
    classes = unit_classes(params, rng)
    manifests = {}
    for role, count in (("train", params.n_train), ("dev", params.n_dev), ("test", params.n_test)):
        entries = []
        for i in range(count):
            uid = f"{role}{i:04d}"
            audio, labels = render_utterance(classes, params, rng)
            wav = out_dir / "audio" / f"{uid}.wav"
            lab = out_dir / "labels" / f"{uid}.lab"
            write_wav(AudioClip(audio, SAMPLE_RATE, uid), wav)
            write_labels(uid, labels, lab)
            entries.append(Entry(uid, str(wav), "IHM", str(lab)))
        manifests[role] = Manifest(entries, role)
        write_manifest(manifests[role], out_dir / f"{role}.jsonl", relative_to=out_dir)
    return SynthCorpus(out_dir, manifests, classes)


@dataclass
class ChannelSpec:
    """Stand-in for the distant microphone: reverb, then gain offset, then white noise."""

    reverb: bool = True
    gain_db: float = -6.0
    snr_db: float | None = 15.0
    keep_gain: bool = False
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def off(cls) -> "ChannelSpec":
        return cls(reverb=False, gain_db=0.0, snr_db=None)


def make_distant(clean: Manifest, rir_pool, channel: ChannelSpec, out_dir,
                 domain: str = "SDM") -> Manifest:
    if channel.reverb and not rir_pool:
        raise ArgumentError("distant channel with reverb needs a nonempty RIR pool")
    spec = CorruptionSpec(rir_pool=list(rir_pool) if channel.reverb else [],
                          snr_db=channel.snr_db, gain_db=channel.gain_db, seed=channel.seed,
                          keep_gain=channel.keep_gain, reverb=channel.reverb)
    return generate(clean, spec, out_dir, domain=domain)
