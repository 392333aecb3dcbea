"""Experiment grid: every arm of the four result tables, over several seeds.

Domains are ``IHM`` (clean), ``SDM`` (simulated distant channel) and
``IHM-r`` (clean convolved with simulated RIRs). Models that several arms
share within a seed (the clean acoustic model above all) are trained once
and cached by what they were trained on, so results do not depend on arm
order.
"""

from __future__ import annotations

import json
import logging
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import fhvae, models, roomsim
from ..augment import CorruptionSpec, generate, utterance_rng
from ..checkpoint import save_checkpoint
from ..errors import ArgumentError, ReverbkitError, StateError
from ..manifest import Manifest, load_labels
from ..sigproc import logmel, read_wav
from .corpus import HOP, ChannelSpec, CorpusParams, make_distant, synth_corpus

log = logging.getLogger(__name__)

DOMAINS = ("IHM", "SDM", "IHM-r")
FEATURE_KINDS = ("log-mel", "z1-mean", "z1-mean+logvar")
MODEL_KINDS = ("am", "enhance", "dereverb")


@dataclass(frozen=True)
class Arm:
    """One experiment arm.

    ``model="am"`` trains a classifier on ``train`` and scores it on every
    target. ``enhance`` and ``dereverb`` train a feature-mapping network on
    SDM or IHM-r pairs and score the clean classifier on mapped targets.
    ``labels="own"`` replaces the clean-stream labels of SDM training data by
    labels aligned to the uncompensated distant signal.
    """

    name: str
    table: int
    train: tuple
    targets: tuple
    feature_kind: str = "log-mel"
    model: str = "am"
    labels: str = "clean"

    def __post_init__(self):
        object.__setattr__(self, "train", tuple(self.train))
        object.__setattr__(self, "targets", tuple(self.targets))
        unknown = [d for d in self.train + self.targets if d not in DOMAINS]
        if unknown:
            raise ArgumentError(f"arm {self.name}: unknown domains {unknown}")
        if self.feature_kind not in FEATURE_KINDS:
            raise ArgumentError(f"arm {self.name}: unknown feature kind {self.feature_kind}")
        if self.model not in MODEL_KINDS:
            raise ArgumentError(f"arm {self.name}: unknown model kind {self.model}")
        if self.labels not in ("clean", "own"):
            raise ArgumentError(f"arm {self.name}: labels must be clean or own")
        if not self.train or not self.targets:
            raise ArgumentError(f"arm {self.name}: needs train and target domains")

    @property
    def train_label(self) -> str:
        name = " + ".join(self.train)
        if self.labels == "own":
            name += " (own labels)"
        if self.model == "am" and self.feature_kind != "log-mel":
            name += _KIND_SUFFIX[self.feature_kind]
        return name

    def target_label(self, target: str) -> str:
        if self.model == "enhance":
            return f"{target}-e"
        if self.model == "dereverb":
            return f"{target}-dr"
        return target + _KIND_SUFFIX.get(self.feature_kind, "")


_KIND_SUFFIX = {"log-mel": "", "z1-mean": "-mu1", "z1-mean+logvar": "-(mu1,logvar1)"}

DEFAULT_ARMS = (
    Arm("clean", 1, ("IHM",), ("IHM", "SDM")),
    Arm("distant-own", 1, ("SDM",), ("IHM", "SDM"), labels="own"),
    Arm("distant", 1, ("SDM",), ("IHM", "SDM")),
    Arm("multi", 1, ("IHM", "SDM"), ("IHM", "SDM")),
    Arm("clean-on-reverb", 2, ("IHM",), ("IHM-r",)),
    Arm("augmented", 2, ("IHM", "IHM-r"), ("IHM", "IHM-r", "SDM")),
    Arm("enhance", 3, ("IHM",), ("IHM", "SDM"), model="enhance"),
    Arm("dereverb", 3, ("IHM",), ("IHM", "IHM-r", "SDM"), model="dereverb"),
    Arm("z1", 4, ("IHM",), ("IHM", "SDM"), feature_kind="z1-mean"),
    Arm("z1-logvar", 4, ("IHM",), ("IHM", "SDM"), feature_kind="z1-mean+logvar"),
)


def _default_fhvae() -> fhvae.FhvaeConfig:
    return fhvae.FhvaeConfig(lstm_units=64, z1_dim=16, z2_dim=16, max_epochs=60)


@dataclass
class ExperimentConfig:
    out_dir: str
    seeds: tuple = (0, 1, 2)
    arms: tuple = DEFAULT_ARMS
    corpus: CorpusParams = field(default_factory=CorpusParams)
    channel: ChannelSpec = field(default_factory=ChannelSpec)
    hidden_units: int = 64
    enhancer_units: int = 256
    epochs: int = 20
    extra_epochs: int = 5
    step_size: float = 0.025
    multi_step_size: float = 0.01
    enhance_step_size: float = 0.025
    distant_room_set: str = "S1"
    distant_rooms: int = 2
    distant_rirs_per_room: int = 3
    aug_room_sets: tuple = ("S1", "S2", "S3")
    aug_rooms_per_set: int = 10
    aug_rirs_per_room: int = 3
    aug_copies: int = 3
    fhvae: fhvae.FhvaeConfig = field(default_factory=_default_fhvae)
    workers: int = 1

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.arms = tuple(a if isinstance(a, Arm) else Arm(**a) for a in self.arms)
        self.aug_room_sets = tuple(self.aug_room_sets)
        if not self.seeds:
            raise ArgumentError("experiment needs at least one seed")
        if not self.arms:
            raise ArgumentError("experiment needs at least one arm")
        names = [a.name for a in self.arms]
        if len(set(names)) != len(names):
            raise ArgumentError("arm names must be unique")
        if self.aug_copies < 1:
            raise ArgumentError("aug_copies must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arms"] = [asdict(a) for a in self.arms]
        d["corpus"] = self.corpus.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "corpus" in d:
            d["corpus"] = CorpusParams(**d["corpus"])
        if "channel" in d:
            d["channel"] = ChannelSpec(**d["channel"])
        if "fhvae" in d:
            d["fhvae"] = fhvae.FhvaeConfig(**d["fhvae"])
        if "arms" in d:
            d["arms"] = tuple(Arm(**a) for a in d["arms"])
        return cls(**d)


# ------------------------------------------------------------ report types

@dataclass
class Cell:
    train: str
    target: str
    fers: dict = field(default_factory=dict)   # seed -> FER (%)
    table: int = 0
    arm: str = ""
    failed: str | None = None

    @property
    def values(self) -> np.ndarray:
        return np.array([self.fers[s] for s in sorted(self.fers)], dtype=float)

    @property
    def seeds(self) -> int:
        return len(self.fers)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values)) if self.fers else float("nan")

    @property
    def min(self) -> float:
        return float(np.min(self.values)) if self.fers else float("nan")

    @property
    def max(self) -> float:
        return float(np.max(self.values)) if self.fers else float("nan")


@dataclass
class MetricsReport:
    cells: list = field(default_factory=list)

    def cell(self, train: str, target: str) -> Cell:
        for c in self.cells:
            if c.train == train and c.target == target:
                return c
        raise KeyError((train, target))

    def fer(self, train: str, target: str) -> np.ndarray:
        """Per-seed FERs of one cell, ordered by seed."""
        return self.cell(train, target).values

    @property
    def failed(self) -> list[Cell]:
        return [c for c in self.cells if c.failed]

    def to_dict(self) -> dict:
        return {"cells": [{**asdict(c), "fers": {str(k): v for k, v in c.fers.items()}}
                          for c in self.cells]}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        cells = [Cell(**{**c, "fers": {int(k): float(v) for k, v in c["fers"].items()}})
                 for c in d["cells"]]
        return cls(cells)


# ------------------------------------------------------------ data preparation

def _sub_seed(seed: int, *key) -> int:
    return int(zlib.crc32(json.dumps([seed, *key], default=str).encode()) & 0x7FFFFFFF)


@dataclass
class SeedData:
    """Per-seed corpus: features, reference labels, RIR pools."""

    seed: int
    root: Path
    manifests: dict            # (domain, role) -> Manifest; IHM-r copies as ("IHM-r", role, j)
    features: dict             # same keys -> list of (id, T x 80)
    labels: dict               # (role) -> {id: labels}; clean stream
    distant_pool: list
    own_shift: dict            # id -> frame delay of the distant channel


def _features(manifest: Manifest) -> list:
    return [(e.id, logmel(read_wav(e.audio, e.id)).frames) for e in manifest]


def prepare_seed(config: ExperimentConfig, seed: int) -> SeedData:
    root = Path(config.out_dir) / "data" / str(seed)
    corpus = synth_corpus(config.corpus, seed, root / "clean")
    distant_pool = [roomsim.image_method(s) for s in roomsim.sample_rooms(
        config.distant_room_set, config.distant_rooms, config.distant_rirs_per_room,
        _sub_seed(seed, "distant-rooms"))]
    aug_pool = [roomsim.image_method(s) for set_id in config.aug_room_sets
                for s in roomsim.sample_rooms(set_id, config.aug_rooms_per_set,
                                              config.aug_rirs_per_room, seed)]
    channel = replace(config.channel, seed=_sub_seed(seed, "channel"))
    manifests, features, labels = {}, {}, {}
    for role in ("train", "dev", "test"):
        clean = corpus[role]
        manifests["IHM", role] = clean
        manifests["SDM", role] = make_distant(clean, distant_pool, channel, root / f"SDM-{role}")
        copies = config.aug_copies if role != "test" else 1
        for j in range(copies):
            spec = CorruptionSpec(aug_pool, seed=_sub_seed(seed, "aug", j))
            key = ("IHM-r", role) if j == 0 else ("IHM-r", role, j)
            manifests[key] = generate(clean, spec, root / f"IHM-r{j}-{role}")
        # test labels are only ever read here, into the evaluation table
        labels[role] = {e.id: load_labels(e) for e in clean}
    for key, man in manifests.items():
        features[key] = _features(man)
    # frame delay an alignment of the raw distant signal would carry
    own_shift = {}
    if channel.reverb:
        for role in ("train", "dev"):
            for e in corpus[role]:
                choice = int(utterance_rng(channel.seed, e.id).integers(len(distant_pool)))
                own_shift[e.id] = int(round(distant_pool[choice].direct_index / HOP))
    return SeedData(seed, root, manifests, features, labels, distant_pool, own_shift)


def shift_labels(labels: np.ndarray, frames: int) -> np.ndarray:
    """Delay a label sequence by ``frames``, repeating the first label."""
    if frames <= 0:
        return labels.copy()
    return np.concatenate([np.full(frames, labels[0]), labels[:-frames]])


# ------------------------------------------------------------ arm execution

class ArmRunner:
    """Trains (with caching) and scores the models of one seed."""

    def __init__(self, config: ExperimentConfig, data: SeedData):
        self.config = config
        self.data = data
        self.cache = {}

    def train_cfg(self, step_size: float, key) -> models.TrainConfig:
        c = self.config
        return models.TrainConfig(epochs=c.epochs, extra_epochs=c.extra_epochs, step_size=step_size,
                                  seed=_sub_seed(self.data.seed, *key))

    def utterances(self, domain: str, role: str, kind: str = "log-mel", labels: str = "clean",
                   with_copies: bool = False):
        if role == "test":
            raise StateError("training code asked for test-role utterances", domain=domain)
        keys = [(domain, role)]
        if with_copies and domain == "IHM-r":
            keys += [k for k in self.data.features if len(k) == 3 and k[:2] == (domain, role)]
        out = []
        for key in keys:
            for uid, feats in self.feature_list(key, kind):
                lab = self.data.labels[role][uid]
                if labels == "own" and domain == "SDM":
                    lab = shift_labels(lab, self.data.own_shift.get(uid, 0))
                out.append(models.Utterance(uid, feats, lab, domain=domain))
        return out

    def feature_list(self, key, kind: str):
        if kind == "log-mel":
            return self.data.features[key]
        if ("z1", kind, key) not in self.cache:
            model = self.fhvae_model(kind)
            self.cache["z1", kind, key] = [
                (uid, fhvae.extract_z1(model, f, kind == "z1-mean+logvar").frames)
                for uid, f in self.data.features[key]]
        return self.cache["z1", kind, key]

    def fhvae_model(self, kind: str) -> fhvae.FhvaeModel:
        if "fhvae" not in self.cache:
            f = self.data.features
            train = [(f"{d}/{u}", x) for d in ("IHM", "SDM") for u, x in f[d, "train"]]
            dev = [(f"{d}/{u}", x) for d in ("IHM", "SDM") for u, x in f[d, "dev"]]
            cfg = replace(self.config.fhvae, seed=_sub_seed(self.data.seed, "fhvae"))
            self.cache["fhvae"] = fhvae.train_fhvae(train, dev, cfg).model
            self.cache["fhvae-train"] = [x for _, x in train]
        model = self.cache["fhvae"]
        key = "z1lv" if kind == "z1-mean+logvar" else "z1"
        if f"{key}_mean" not in model.aux:
            fhvae.fit_normalization(model, self.cache["fhvae-train"], kind == "z1-mean+logvar")
        return model

    def acoustic_model(self, domains: tuple, kind: str = "log-mel", labels: str = "clean"):
        key = ("am", domains, kind, labels)
        if key not in self.cache:
            copies = "IHM-r" in domains
            train = [u for d in domains for u in self.utterances(d, "train", kind, labels, copies)]
            dev = [u for d in domains for u in self.utterances(d, "dev", kind, labels, copies)]
            step = self.config.step_size if len(domains) == 1 else self.config.multi_step_size
            dim = train[0].features.shape[1]
            tdnn = models.TdnnConfig(hidden_units=self.config.hidden_units, input_dim=dim,
                                     n_outputs=self.config.corpus.n_label_classes,
                                     seed=_sub_seed(self.data.seed, "init", *key))
            self.cache[key] = models.train_acoustic_model(train, dev, tdnn,
                                                          self.train_cfg(step, key)).checkpoint
        return self.cache[key]

    def enhancer(self, source: str):
        key = ("enh", source)
        if key not in self.cache:
            def pairs(role):
                clean = {u: x for u, x in self.data.features["IHM", role]}
                return [models.Utterance(u, x, target=clean[u])
                        for u, x in self.data.features[source, role]]

            def identity(role):
                return [models.Utterance(u, x, target=x) for u, x in self.data.features["IHM", role]]

            tdnn = models.TdnnConfig(hidden_units=self.config.enhancer_units, output="linear",
                                     n_outputs=80, seed=_sub_seed(self.data.seed, "init", *key))
            self.cache[key] = models.train_enhancer(
                pairs("train"), identity("train"), pairs("dev") + identity("dev"), tdnn,
                self.train_cfg(self.config.enhance_step_size, key)).checkpoint
        return self.cache[key]

    def score(self, checkpoint, target: str, kind: str = "log-mel", mapper=None) -> float:
        """FER of ``checkpoint`` on the test split of ``target`` (clean-stream labels)."""
        refs = self.data.labels["test"]
        utts = []
        for uid, feats in self.feature_list((target, "test"), kind):
            if mapper is not None:
                feats = models.enhance(feats, mapper).frames
            utts.append(models.Utterance(uid, feats, refs[uid]))
        return models.evaluate_fer(utts, checkpoint)

    def run(self, arm: Arm, out_dir: Path) -> dict:
        """Train what the arm needs, save checkpoints under ``out_dir``, return target -> FER."""
        out_dir.mkdir(parents=True, exist_ok=True)
        if arm.model == "am":
            am = self.acoustic_model(arm.train, arm.feature_kind, arm.labels)
            save_checkpoint(am, out_dir / "am.ckpt")
            result = {t: self.score(am, t, arm.feature_kind) for t in arm.targets}
        else:
            am = self.acoustic_model(arm.train)
            mapper = self.enhancer("SDM" if arm.model == "enhance" else "IHM-r")
            save_checkpoint(mapper, out_dir / "enhancer.ckpt")
            result = {t: self.score(am, t, mapper=mapper) for t in arm.targets}
        if arm.feature_kind != "log-mel":
            save_checkpoint(self.cache["fhvae"].to_checkpoint(), out_dir / "fhvae.ckpt")
        (out_dir / "metrics.json").write_text(json.dumps(
            {"arm": arm.name, "seed": self.data.seed, "fer": result}, indent=2, sort_keys=True))
        return result


def _run_arms(config: ExperimentConfig, data: SeedData, arms) -> dict:
    runner = ArmRunner(config, data)
    results = {}
    for arm in arms:
        out = Path(config.out_dir) / arm.name / str(data.seed)
        try:
            results[arm.name] = runner.run(arm, out)
            log.info("seed %d arm %s: %s", data.seed, arm.name, results[arm.name])
        except (ReverbkitError, ArithmeticError, ValueError, FloatingPointError) as exc:
            log.error("seed %d arm %s failed: %s", data.seed, arm.name, exc)
            results[arm.name] = f"{type(exc).__name__}: {exc}"
    return results


def run_grid(config: ExperimentConfig) -> MetricsReport:
    """Run every arm for every seed; a failing arm is recorded and the grid continues."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, default=list))
    per_seed = {}
    for seed in config.seeds:
        data = prepare_seed(config, seed)
        if config.workers > 1:
            with ProcessPoolExecutor(config.workers) as pool:
                futures = [pool.submit(_run_arms, config, data, [arm]) for arm in config.arms]
                per_seed[seed] = {k: v for f in futures for k, v in f.result().items()}
        else:
            per_seed[seed] = _run_arms(config, data, config.arms)
    cells = []
    for arm in config.arms:
        for target in arm.targets:
            cell = Cell(arm.train_label, arm.target_label(target), table=arm.table, arm=arm.name)
            for seed in config.seeds:
                res = per_seed[seed][arm.name]
                if isinstance(res, str):
                    cell.failed = res
                else:
                    cell.fers[seed] = float(res[target])
            if cell.failed:
                cell.fers = {}
            cells.append(cell)
    report = MetricsReport(cells)
    (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2))
    return report
