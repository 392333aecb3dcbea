"""Time-delay neural networks as frame classifier and feature regressor.

A TDNN layer with context [i, 0, k] computes an affine map per frame and then
sums the mapped vectors at t + i, t and t + k before the ReLU. Frames outside
the utterance are clamped to the first or last frame.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint
from .errors import ArgumentError, DataError, ShapeError
from .sigproc import FeatureMatrix

log = logging.getLogger(__name__)

DEFAULT_CONTEXTS = ((-1, 0, 1),) * 3 + ((-3, 0, 3),) * 3
STD_FLOOR = 1e-3


@dataclass
class TdnnConfig:
    contexts: tuple = DEFAULT_CONTEXTS
    hidden_units: int = 1000
    input_dim: int = 80
    output: str = "softmax"
    n_outputs: int = 80
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.contexts = tuple(tuple(int(v) for v in c) for c in self.contexts)
        for c in self.contexts:
            if len(c) != 3 or c[1] != 0:
                raise ArgumentError("contexts must be [i, 0, k] triples", context=list(c))
        if self.hidden_units < 1:
            raise ArgumentError("hidden_units must be >= 1")
        if self.output not in ("softmax", "linear"):
            raise ArgumentError(f"unknown output kind {self.output!r}")

    @property
    def receptive_field(self) -> tuple[int, int]:
        return (sum(c[0] for c in self.contexts), sum(c[2] for c in self.contexts))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["contexts"] = [list(c) for c in self.contexts]
        return d


@dataclass
class Utterance:
    id: str
    features: np.ndarray
    labels: np.ndarray | None = None
    target: np.ndarray | None = None
    domain: str = ""


def clamp_index(t: int, offset: int) -> np.ndarray:
    return np.clip(np.arange(t) + offset, 0, t - 1)


def tdnn_layer(h_prev, W, b, context) -> ad.Tensor:
    """ReLU(h~[t+i] + h~[t] + h~[t+k]) with h~ = W h_prev + b, indices clamped."""
    h_prev = ad.as_tensor(h_prev)
    if h_prev.value.ndim != 2:
        raise ShapeError("tdnn_layer expects a T x D matrix", shape=list(h_prev.shape))
    i, _, k = context
    t = h_prev.shape[0]
    mapped = ad.affine(h_prev, W, b)
    left = ad.gather_rows(mapped, clamp_index(t, i))
    right = ad.gather_rows(mapped, clamp_index(t, k))
    return ad.relu(ad.add(ad.add(left, mapped), right))


class Tdnn:
    """Six context layers, one per-frame affine+ReLU layer and an output layer."""

    def __init__(self, config: TdnnConfig, params: dict | None = None, aux: dict | None = None):
        self.config = config
        dtype = np.dtype(config.dtype)
        if params is None:
            params = self._init_params(np.random.default_rng(config.seed), dtype)
        self.params = {k: ad.parameter(np.asarray(v, dtype=dtype), k) for k, v in params.items()}
        self.aux = {k: np.asarray(v, dtype=np.float64) for k, v in (aux or {}).items()}

    def _init_params(self, rng, dtype) -> dict:
        c = self.config
        params = {}
        dim = c.input_dim
        for n in range(len(c.contexts)):
            # Three summed taps share W: equivalent to one affine over a 3*dim splice,
            # so Glorot uses that fan-in.
            w = ad.glorot_uniform(rng, c.hidden_units, 3 * dim, dtype)
            params[f"tdnn{n}.W"] = w[:, :dim].copy()
            params[f"tdnn{n}.b"] = np.zeros(c.hidden_units, dtype=dtype)
            dim = c.hidden_units
        params["dense.W"] = ad.glorot_uniform(rng, c.hidden_units, dim, dtype)
        params["dense.b"] = np.zeros(c.hidden_units, dtype=dtype)
        params["out.W"] = ad.glorot_uniform(rng, c.n_outputs, c.hidden_units, dtype)
        params["out.b"] = np.zeros(c.n_outputs, dtype=dtype)
        return params

    def set_input_stats(self, frames: np.ndarray) -> None:
        self.aux["in_mean"] = frames.mean(axis=0)
        self.aux["in_std"] = np.maximum(frames.std(axis=0), STD_FLOOR)

    def set_target_stats(self, frames: np.ndarray) -> None:
        self.aux["out_mean"] = frames.mean(axis=0)
        self.aux["out_std"] = np.maximum(frames.std(axis=0), STD_FLOOR)

    def normalize_input(self, feats: np.ndarray) -> np.ndarray:
        feats = np.asarray(feats)
        if feats.ndim != 2 or feats.shape[1] != self.config.input_dim:
            raise ShapeError("feature dimension does not match the model",
                             expected=self.config.input_dim, shape=list(feats.shape))
        if "in_mean" in self.aux:
            feats = (feats - self.aux["in_mean"]) / self.aux["in_std"]
        return feats.astype(self.config.dtype)

    def normalize_target(self, target: np.ndarray) -> np.ndarray:
        if "out_mean" in self.aux:
            target = (target - self.aux["out_mean"]) / self.aux["out_std"]
        return np.asarray(target, dtype=self.config.dtype)

    def denormalize_output(self, out: np.ndarray) -> np.ndarray:
        if "out_mean" in self.aux:
            out = out * self.aux["out_std"] + self.aux["out_mean"]
        return out

    def forward(self, feats: np.ndarray) -> ad.Tensor:
        h = ad.Tensor(self.normalize_input(feats))
        p = self.params
        for n, ctx in enumerate(self.config.contexts):
            h = tdnn_layer(h, p[f"tdnn{n}.W"], p[f"tdnn{n}.b"], ctx)
        h = ad.relu(ad.affine(h, p["dense.W"], p["dense.b"]))
        return ad.affine(h, p["out.W"], p["out.b"])

    def state_arrays(self) -> dict:
        return {k: p.value.copy() for k, p in self.params.items()}

    def load_arrays(self, arrays: dict) -> None:
        for k, v in arrays.items():
            self.params[k].value = v.copy()

    def to_checkpoint(self, meta: dict | None = None, optimizer=None, rng_state=None) -> Checkpoint:
        info = {"model": "tdnn", "config": self.config.to_dict(), **(meta or {})}
        return Checkpoint(self.state_arrays(), dict(self.aux), info, optimizer, rng_state)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "Tdnn":
        if ckpt.meta.get("model") != "tdnn":
            raise DataError("checkpoint does not hold a TDNN", model=ckpt.meta.get("model"))
        return cls(TdnnConfig(**ckpt.meta["config"]), ckpt.params, ckpt.aux)


# ------------------------------------------------------------ training

@dataclass
class TrainConfig:
    """Two-phase SGD schedule.

    Phase 1 runs ``epochs`` epochs at a fixed ``step_size`` and keeps the
    epoch with the best dev score; phase 2 continues from it for
    ``extra_epochs`` epochs at ``phase2_step_size * decay**n``, n = 1, 2, ...
    """

    epochs: int = 20
    step_size: float = 0.025
    extra_epochs: int = 5
    phase2_step_size: float = 0.025
    decay: float = 0.75
    clip_norm: float = 5.0
    seed: int = 0

    def phase2_step_sizes(self) -> list[float]:
        return [self.phase2_step_size * self.decay ** n for n in range(1, self.extra_epochs + 1)]


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list = field(default_factory=list)
    best_epoch: int = 0
    optimizer: ad.OptimizerState | None = None


def frame_error_rate(predicted, reference) -> float:
    """Percentage of frames whose predicted label differs from the reference."""
    predicted, reference = np.asarray(predicted), np.asarray(reference)
    if predicted.shape != reference.shape:
        raise DataError("prediction and reference lengths differ",
                        predicted=len(predicted), reference=len(reference))
    if reference.size == 0:
        raise DataError("no frames to score")
    return 100.0 * float(np.mean(predicted != reference))


def _check_lengths(items, what):
    for u in items:
        ref = u.labels if what == "labels" else u.target
        if ref is None:
            raise DataError(f"utterance {u.id} has no {what}", id=u.id)
        if len(ref) != len(u.features):
            raise DataError(f"{what}/feature length mismatch for {u.id}", id=u.id,
                            frames=len(u.features), targets=len(ref))


def _loss(model: Tdnn, u: Utterance) -> ad.Tensor:
    out = model.forward(u.features)
    if model.config.output == "softmax":
        return ad.softmax_cross_entropy(out, u.labels)
    return ad.mse(out, model.normalize_target(u.target))


def _dev_score(model: Tdnn, dev) -> float:
    """Frame error rate (%) for classifiers, mean squared error for regressors."""
    with ad.no_grad():
        if model.config.output == "softmax":
            errors = frames = 0
            for u in dev:
                pred = np.argmax(model.forward(u.features).value, axis=1)
                errors += int(np.sum(pred != u.labels))
                frames += len(u.labels)
            return 100.0 * errors / max(frames, 1)
        total = count = 0.0
        for u in dev:
            out = model.denormalize_output(model.forward(u.features).value.astype(np.float64))
            total += float(np.sum((out - u.target) ** 2))
            count += u.target.size
        return total / max(count, 1)


def _run_epoch(model, items, state, rng) -> float:
    losses = []
    for idx in rng.permutation(len(items)):
        ad.zero_grads(model.params)
        loss = _loss(model, items[idx])
        loss.backward()
        ad.sgd_step(model.params, None, state)
        losses.append(loss.item())
    return float(np.mean(losses))


def train_tdnn(model: Tdnn, train, dev, config: TrainConfig) -> TrainResult:
    """Shared two-phase schedule for the classifier and the regressor."""
    if not train:
        raise DataError("empty training set")
    if not dev:
        raise DataError("empty dev set")
    rng = np.random.default_rng(config.seed)
    state = ad.OptimizerState("sgd", config.step_size, config.clip_norm)
    history = []
    snapshots = []
    for epoch in range(config.epochs):
        state.step_size = config.step_size
        train_loss = _run_epoch(model, train, state, rng)
        score = _dev_score(model, dev)
        snapshots.append(model.state_arrays())
        history.append({"epoch": epoch + 1, "phase": 1, "step_size": state.step_size,
                        "train_loss": train_loss, "dev_score": score})
        log.debug("epoch %d loss %.4f dev %.4f", epoch + 1, train_loss, score)
    best = int(np.argmin([h["dev_score"] for h in history])) if history else 0
    if snapshots:
        model.load_arrays(snapshots[best])
    for n, step in enumerate(config.phase2_step_sizes()):
        state.step_size = step
        train_loss = _run_epoch(model, train, state, rng)
        score = _dev_score(model, dev)
        history.append({"epoch": config.epochs + n + 1, "phase": 2, "step_size": step,
                        "train_loss": train_loss, "dev_score": score})
    meta = {"train_config": asdict(config), "log": history, "best_epoch": best + 1}
    ckpt = model.to_checkpoint(meta, state, rng.bit_generator.state)
    return TrainResult(ckpt, history, best + 1, state)


def _stack(frames_list) -> np.ndarray:
    return np.concatenate([np.asarray(f, dtype=np.float64) for f in frames_list], axis=0)


def train_acoustic_model(train, dev, tdnn: TdnnConfig, config: TrainConfig) -> TrainResult:
    """Cross-entropy frame classifier on labelled utterances."""
    _check_lengths(train, "labels")
    _check_lengths(dev, "labels")
    n_labels = int(max(max(u.labels.max() for u in train), max(u.labels.max() for u in dev))) + 1
    if tdnn.output != "softmax" or tdnn.n_outputs < n_labels:
        raise ArgumentError("classifier config must be softmax with enough outputs",
                            n_outputs=tdnn.n_outputs, n_labels=n_labels)
    model = Tdnn(tdnn)
    model.set_input_stats(_stack(u.features for u in train))
    result = train_tdnn(model, list(train), list(dev), config)
    for h in result.log:
        h["train_ce"] = h["train_loss"]
        h["dev_fer"] = h["dev_score"]
    result.checkpoint.meta["log"] = result.log
    return result


def train_enhancer(parallel, identity, dev, tdnn: TdnnConfig, config: TrainConfig) -> TrainResult:
    """Regress clean features from corrupted ones while acting as identity on clean input.

    ``parallel`` and ``identity`` are utterances whose ``target`` holds the
    clean features; both kinds are shuffled together every epoch.
    """
    items = list(parallel) + list(identity)
    _check_lengths(items, "target")
    _check_lengths(dev, "target")
    if tdnn.output != "linear" or tdnn.n_outputs != tdnn.input_dim:
        raise ArgumentError("enhancer config must be linear with n_outputs == input_dim")
    model = Tdnn(tdnn)
    model.set_input_stats(_stack(u.features for u in items))
    model.set_target_stats(_stack(u.target for u in items))
    result = train_tdnn(model, items, list(dev), config)
    for h in result.log:
        h["train_mse"] = h["train_loss"]
        h["dev_mse"] = h["dev_score"]
    result.checkpoint.meta["log"] = result.log
    return result


# ------------------------------------------------------------ inference

def _as_frames(features):
    if isinstance(features, FeatureMatrix):
        return features.frames, features.source_id
    return np.asarray(features), ""


def enhance(features, checkpoint: Checkpoint | Tdnn) -> FeatureMatrix:
    model = checkpoint if isinstance(checkpoint, Tdnn) else Tdnn.from_checkpoint(checkpoint)
    if model.config.output != "linear":
        raise ArgumentError("checkpoint is not an enhancer")
    frames, sid = _as_frames(features)
    with ad.no_grad():
        out = model.forward(frames).value.astype(np.float64)
    return FeatureMatrix(model.denormalize_output(out), 0.01, "log-mel", sid)


def classify_frames(features, checkpoint: Checkpoint | Tdnn):
    """Argmax label per frame (lowest index on ties) and the posterior matrix."""
    model = checkpoint if isinstance(checkpoint, Tdnn) else Tdnn.from_checkpoint(checkpoint)
    if model.config.output != "softmax":
        raise ArgumentError("checkpoint is not a classifier")
    frames, _ = _as_frames(features)
    with ad.no_grad():
        logits = model.forward(frames).value.astype(np.float64)
    post = ad.softmax(logits)
    return np.argmax(post, axis=1), post


def evaluate_fer(utterances, checkpoint: Checkpoint | Tdnn) -> float:
    model = checkpoint if isinstance(checkpoint, Tdnn) else Tdnn.from_checkpoint(checkpoint)
    errors = frames = 0
    for u in utterances:
        pred, _ = classify_frames(u.features, model)
        if len(pred) != len(u.labels):
            raise DataError(f"label/feature length mismatch for {u.id}", id=u.id)
        errors += int(np.sum(pred != u.labels))
        frames += len(pred)
    if frames == 0:
        raise DataError("no frames to score")
    return 100.0 * errors / frames
