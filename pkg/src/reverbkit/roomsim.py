"""Image-method room impulse responses and the three room-size sets used for
reverberation augmentation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError, InsufficientDecayError, SingularityError
from .sigproc import AudioClip, read_wav, write_wav

SPEED_OF_SOUND = 343.0
WALL_MARGIN = 0.1
MAX_ORDER_CAP = 40
RESIDUAL_TOLERANCE = 1e-4

# (Lx range, Ly range, Lz range) in meters
ROOM_SETS = {
    "S1": ((1.0, 10.0), (1.0, 10.0), (2.0, 5.0)),
    "S2": ((10.0, 30.0), (10.0, 30.0), (2.0, 5.0)),
    "S3": ((30.0, 50.0), (30.0, 50.0), (2.0, 5.0)),
}
REFLECTION_RANGE = (0.2, 0.8)


@dataclass(frozen=True)
class RoomSpec:
    dims: tuple
    source: tuple
    mic: tuple
    reflection: float
    speed_of_sound: float = SPEED_OF_SOUND
    sample_rate: int = 16000
    seed: int | None = None
    room_set: str | None = None
    room_index: int | None = None

    def __post_init__(self):
        dims = np.asarray(self.dims, dtype=float)
        src = np.asarray(self.source, dtype=float)
        mic = np.asarray(self.mic, dtype=float)
        if dims.shape != (3,) or src.shape != (3,) or mic.shape != (3,):
            raise ArgumentError("dims, source and mic must be 3-vectors")
        if np.any(dims <= 0):
            raise ArgumentError("room dimensions must be positive", dims=list(self.dims))
        for name, pos in (("source", src), ("mic", mic)):
            if np.any(pos <= 0) or np.any(pos >= dims):
                raise ArgumentError(f"{name} outside the room", position=list(pos))
        if not 0.0 <= self.reflection < 1.0:
            raise ArgumentError("reflection coefficient must be in [0, 1)",
                                reflection=self.reflection)
        if np.array_equal(src, mic):
            raise SingularityError("source and microphone coincide")

    @property
    def direct_distance(self) -> float:
        return float(np.linalg.norm(np.subtract(self.source, self.mic)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"], d["source"], d["mic"] = list(self.dims), list(self.source), list(self.mic)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RoomSpec":
        d = dict(d)
        for key in ("dims", "source", "mic"):
            d[key] = tuple(float(v) for v in d[key])
        return cls(**d)


@dataclass
class Rir:
    taps: np.ndarray
    sample_rate: int
    spec: RoomSpec | None = None
    max_order: int | None = None
    direct_index: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.taps = np.asarray(self.taps, dtype=np.float64)
        if not np.all(np.isfinite(self.taps)):
            raise ArgumentError("RIR taps must be finite")
        if not np.any(self.taps):
            raise ArgumentError("RIR must have at least one nonzero tap")
        if self.direct_index is None:
            self.direct_index = int(np.argmax(np.abs(self.taps)))

    def __len__(self):
        return len(self.taps)


def sample_rooms(set_id: str, n_rooms: int, n_rirs_per_room: int, seed: int) -> list[RoomSpec]:
    """Room geometries and source/mic placements for one of S1, S2, S3.

    One reflection coefficient per room; source and microphone are redrawn for
    every RIR, at least WALL_MARGIN from every wall.
    """
    if set_id not in ROOM_SETS:
        raise ArgumentError(f"unknown room set {set_id!r}", choices=sorted(ROOM_SETS))
    if n_rooms < 1 or n_rirs_per_room < 1:
        raise ArgumentError("n_rooms and n_rirs_per_room must be >= 1")
    set_offset = sorted(ROOM_SETS).index(set_id)
    rng = np.random.default_rng([seed, set_offset])
    ranges = ROOM_SETS[set_id]
    specs = []
    for room in range(n_rooms):
        dims = np.array([rng.uniform(lo, hi) for lo, hi in ranges])
        beta = float(rng.uniform(*REFLECTION_RANGE))
        for _ in range(n_rirs_per_room):
            while True:
                src = rng.uniform(WALL_MARGIN, dims - WALL_MARGIN)
                mic = rng.uniform(WALL_MARGIN, dims - WALL_MARGIN)
                if not np.array_equal(src, mic):
                    break
            specs.append(RoomSpec(
                dims=tuple(float(v) for v in dims),
                source=tuple(float(v) for v in src),
                mic=tuple(float(v) for v in mic),
                reflection=beta,
                seed=int(rng.integers(2**31)),
                room_set=set_id,
                room_index=room,
            ))
    return specs


def default_max_order(reflection: float) -> int:
    """Smallest order whose dropped images are all below RESIDUAL_TOLERANCE of the direct path.

    An image with |m|_1 = n + 1 bounces at least 2n - 1 times, and it is never
    closer to the microphone than the direct source, so beta**(2n - 1) bounds
    every residual amplitude relative to the direct path.
    """
    if reflection <= 0.0:
        return 0
    n = 0
    while reflection ** (2 * n - 1) >= RESIDUAL_TOLERANCE and n < MAX_ORDER_CAP:
        n += 1
    return n


def _lattice(max_order: int) -> np.ndarray:
    r = np.arange(-max_order, max_order + 1)
    m = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
    return m[np.abs(m).sum(axis=1) <= max_order]


_PARITIES = np.array([[q, j, k] for q in (0, 1) for j in (0, 1) for k in (0, 1)])


def image_sources(spec: RoomSpec, max_order: int):
    """Positions and amplitude exponents of every image with |m|_1 <= max_order.

    Returns (positions (N, 3), reflection counts (N,)).
    """
    dims = np.asarray(spec.dims, dtype=float)
    src = np.asarray(spec.source, dtype=float)
    m = _lattice(max_order)
    p = _PARITIES
    mm = np.repeat(m, len(p), axis=0)
    pp = np.tile(p, (len(m), 1))
    pos = (1 - 2 * pp) * src + 2 * mm * dims
    bounces = (np.abs(mm - pp) + np.abs(mm)).sum(axis=1)
    return pos, bounces


def _sinc_taps(n_taps, delays, amps, half_width=8):
    offsets = np.arange(-half_width, half_width + 1)
    idx = np.round(delays).astype(np.int64)[:, None] + offsets[None, :]
    frac = idx - delays[:, None]
    window = 0.5 * (1.0 + np.cos(np.pi * frac / (half_width + 1)))
    h = amps[:, None] * window * np.sinc(frac)
    keep = (idx >= 0) & (idx < n_taps)
    return np.bincount(idx[keep], weights=h[keep], minlength=n_taps)


def image_method(spec: RoomSpec, duration_s: float = 1.0, max_order: int | None = None,
                 fractional: bool = False) -> Rir:
    """RIR of a shoebox room by the image-source method.

    Each image contributes reflection**bounces / (4 pi d) at delay d / c.
    Delays are rounded to the nearest sample unless ``fractional`` is set, in
    which case a Hann-windowed sinc (+-8 samples) spreads the tap.
    """
    fs = spec.sample_rate
    c = spec.speed_of_sound
    direct = spec.direct_distance
    if direct == 0.0:
        raise SingularityError("source and microphone coincide")
    if duration_s <= direct / c:
        raise ArgumentError("duration shorter than the direct-path delay",
                            duration_s=duration_s, direct_delay_s=direct / c)
    if max_order is None:
        max_order = default_max_order(spec.reflection)
    if max_order < 0:
        raise ArgumentError("max_order must be >= 0", max_order=max_order)
    n_taps = int(math.ceil(duration_s * fs))

    pos, bounces = image_sources(spec, max_order)
    d = np.linalg.norm(pos - np.asarray(spec.mic, dtype=float), axis=1)
    amp = spec.reflection ** bounces / (4.0 * np.pi * d)  # 0.0 ** 0 == 1
    delay = d / c * fs
    keep = (d / c < duration_s) & (amp != 0.0)
    delay, amp = delay[keep], amp[keep]
    if fractional:
        taps = _sinc_taps(n_taps, delay, amp)
    else:
        idx = np.round(delay).astype(np.int64)
        inside = idx < n_taps
        taps = np.bincount(idx[inside], weights=amp[inside], minlength=n_taps)
    return Rir(taps, fs, spec, max_order, int(np.round(direct / c * fs)),
               {"fractional": fractional, "duration_s": duration_s})


def t60(rir: Rir, upper_db: float = -5.0, lower_db: float = -25.0) -> float:
    """Reverberation time from the Schroeder decay curve, fitted on [-25, -5] dB."""
    energy = np.asarray(rir.taps, dtype=np.float64) ** 2
    if not np.any(energy):
        raise ArgumentError("RIR is all zeros")
    edc = np.cumsum(energy[::-1])[::-1]
    with np.errstate(divide="ignore"):
        edc_db = 10.0 * np.log10(edc / edc[0])
    sel = np.flatnonzero((edc_db <= upper_db) & (edc_db >= lower_db))
    if not np.any(edc_db < lower_db) or len(sel) < 2:
        raise InsufficientDecayError("energy decay does not span the fit range",
                                     upper_db=upper_db, lower_db=lower_db)
    sel = np.arange(sel[0], sel[-1] + 1)
    sel = sel[np.isfinite(edc_db[sel])]
    t = sel / rir.sample_rate
    slope, _ = np.polyfit(t, edc_db[sel], 1)
    if slope >= 0:
        raise InsufficientDecayError("non-decaying energy curve")
    return float(-60.0 / slope)


def save_rir(rir: Rir, path) -> None:
    """WAV float32 taps plus a JSON sidecar next to it."""
    path = Path(path)
    write_wav(AudioClip(rir.taps.astype(np.float32), rir.sample_rate, path.stem), path)
    record = {
        "spec": rir.spec.to_dict() if rir.spec is not None else None,
        "max_order": rir.max_order,
        "direct_index": rir.direct_index,
        **rir.meta,
    }
    path.with_suffix(".json").write_text(json.dumps(record, indent=1, sort_keys=True))


def load_rir(path) -> Rir:
    path = Path(path)
    clip = read_wav(path)
    sidecar = path.with_suffix(".json")
    record = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    spec = RoomSpec.from_dict(record["spec"]) if record.get("spec") else None
    meta = {k: v for k, v in record.items() if k not in ("spec", "max_order", "direct_index")}
    return Rir(clip.samples.astype(np.float64), clip.sample_rate, spec,
               record.get("max_order"), record.get("direct_index"), meta)


def load_rir_dir(directory) -> list[Rir]:
    return [load_rir(p) for p in sorted(Path(directory).glob("*.wav"))]
