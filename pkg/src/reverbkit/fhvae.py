"""Factorized hierarchical VAE over 20-frame segments.

Two LSTM encoders produce q(z2 | x) and q(z1 | x, z2); an LSTM decoder fed
with [z1, z2] at every step emits a Gaussian per frame. Each training
utterance owns a prior mean for z2 (the ``mu2`` table), and an
alpha-weighted softmax over that table makes z2 predictive of which
utterance a segment came from. Only the z1 encoder is used afterwards, as a
feature extractor.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import DataError, LookupFailure, ShapeError, StateError
from .sigproc import FeatureMatrix

log = logging.getLogger(__name__)

SEGMENT_FRAMES = 20


@dataclass
class Segment:
    frames: np.ndarray
    utterance_id: str
    position: int

    def __post_init__(self):
        if self.frames.shape[0] != SEGMENT_FRAMES:
            raise ShapeError("segments hold exactly 20 frames", frames=self.frames.shape[0])


def segment_stream(features, utterance_id: str = "", mode: str = "train") -> list[Segment]:
    """Cut a T x F matrix into segments.

    ``train``: non-overlapping segments from frame 0, a trailing partial
    segment is dropped. ``extract``: one segment per frame t covering
    t - 10 .. t + 9 with edge frames repeated.
    """
    frames = features.frames if isinstance(features, FeatureMatrix) else np.asarray(features)
    t = len(frames)
    if t == 0:
        return []
    if mode == "train":
        return [Segment(frames[s:s + SEGMENT_FRAMES], utterance_id, s)
                for s in range(0, t - SEGMENT_FRAMES + 1, SEGMENT_FRAMES)]
    if mode == "extract":
        half = SEGMENT_FRAMES // 2
        return [Segment(frames[np.clip(np.arange(c - half, c - half + SEGMENT_FRAMES), 0, t - 1)],
                        utterance_id, c)
                for c in range(t)]
    raise ValueError(f"unknown segmentation mode {mode!r}")


@dataclass
class FhvaeConfig:
    input_dim: int = 80
    lstm_units: int = 256
    z1_dim: int = 32
    z2_dim: int = 32
    alpha: float = 10.0
    z1_prior_var: float = 1.0
    z2_prior_var: float = 0.25
    mu2_prior_var: float = 1.0
    learning_rate: float = 1e-3
    beta1: float = 0.95
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    dtype: str = "float32"


class FhvaeModel:
    def __init__(self, config: FhvaeConfig, utterance_ids, params: dict | None = None,
                 aux: dict | None = None):
        self.config = config
        self.utterance_ids = list(utterance_ids)
        self.index = {u: i for i, u in enumerate(self.utterance_ids)}
        if len(self.index) != len(self.utterance_ids):
            raise DataError("duplicate utterance ids in FHVAE table")
        dtype = np.dtype(config.dtype)
        if params is None:
            params = self._init_params(np.random.default_rng(config.seed), dtype)
        self.params = {k: ad.parameter(np.asarray(v, dtype=dtype), k) for k, v in params.items()}
        self.aux = {k: np.asarray(v, dtype=np.float64) for k, v in (aux or {}).items()}

    def _init_params(self, rng, dtype) -> dict:
        c = self.config
        h, d1, d2, f = c.lstm_units, c.z1_dim, c.z2_dim, c.input_dim
        p = {}
        p.update(ad.lstm_params(rng, f, h, dtype, "enc2"))
        p["enc2_out.W"] = ad.glorot_uniform(rng, 2 * d2, h, dtype)
        p["enc2_out.b"] = np.zeros(2 * d2, dtype=dtype)
        p.update(ad.lstm_params(rng, f + d2, h, dtype, "enc1"))
        p["enc1_out.W"] = ad.glorot_uniform(rng, 2 * d1, h, dtype)
        p["enc1_out.b"] = np.zeros(2 * d1, dtype=dtype)
        p.update(ad.lstm_params(rng, d1 + d2, h, dtype, "dec"))
        p["dec_out.W"] = ad.glorot_uniform(rng, 2 * f, h, dtype)
        p["dec_out.b"] = np.zeros(2 * f, dtype=dtype)
        p["mu2"] = np.zeros((max(len(self.utterance_ids), 1), d2), dtype=dtype)
        return p

    # -------------------------------------------------------- plumbing

    def set_input_stats(self, frames: np.ndarray) -> None:
        self.aux["in_mean"] = frames.mean(axis=0)
        self.aux["in_std"] = np.maximum(frames.std(axis=0), 1e-3)

    def normalize_input(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.config.input_dim:
            raise ShapeError("feature dimension does not match the FHVAE",
                             expected=self.config.input_dim, got=x.shape[-1])
        if "in_mean" in self.aux:
            x = (x - self.aux["in_mean"]) / self.aux["in_std"]
        return np.asarray(x, dtype=self.config.dtype)

    def utterance_index(self, utterance_id: str) -> int:
        try:
            return self.index[utterance_id]
        except KeyError:
            raise LookupFailure(f"utterance {utterance_id!r} not in the FHVAE table",
                                id=utterance_id) from None

    def state_arrays(self) -> dict:
        return {k: p.value.copy() for k, p in self.params.items()}

    def load_arrays(self, arrays: dict) -> None:
        for k, v in arrays.items():
            self.params[k].value = v.copy()

    def to_checkpoint(self, meta: dict | None = None, optimizer=None) -> Checkpoint:
        info = {"model": "fhvae", "config": asdict(self.config),
                "utterance_ids": self.utterance_ids, **(meta or {})}
        return Checkpoint(self.state_arrays(), dict(self.aux), info, optimizer)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "FhvaeModel":
        if ckpt.meta.get("model") != "fhvae":
            raise DataError("checkpoint does not hold an FHVAE", model=ckpt.meta.get("model"))
        return cls(FhvaeConfig(**ckpt.meta["config"]), ckpt.meta["utterance_ids"],
                   ckpt.params, ckpt.aux)

    # -------------------------------------------------------- networks

    def _run_lstm(self, prefix, inputs):
        """Unroll over a list of (B, D) step inputs; returns per-step hidden states."""
        p = self.params
        b = inputs[0].shape[0]
        zeros = np.zeros((b, self.config.lstm_units), dtype=self.config.dtype)
        h, c = ad.Tensor(zeros), ad.Tensor(zeros)
        states = []
        for x in inputs:
            h, c = ad.lstm_cell(x, h, c, p[f"{prefix}.W"], p[f"{prefix}.b"])
            states.append(h)
        return states

    def _gaussian_head(self, name, h, dim):
        out = ad.affine(h, self.params[f"{name}.W"], self.params[f"{name}.b"])
        return (ad.slice_(out, (slice(None), slice(0, dim))),
                ad.slice_(out, (slice(None), slice(dim, 2 * dim))))

    def encode_z2(self, x: np.ndarray):
        """x: (B, 20, F) normalised frames -> (mean, logvar) of q(z2 | x)."""
        steps = [ad.Tensor(x[:, t]) for t in range(x.shape[1])]
        h = self._run_lstm("enc2", steps)[-1]
        return self._gaussian_head("enc2_out", h, self.config.z2_dim)

    def encode_z1(self, x: np.ndarray, z2):
        steps = [ad.concat([ad.Tensor(x[:, t]), z2], axis=1) for t in range(x.shape[1])]
        h = self._run_lstm("enc1", steps)[-1]
        return self._gaussian_head("enc1_out", h, self.config.z1_dim)

    def decode(self, z1, z2, n_frames: int):
        """Per-frame Gaussian parameters, stacked time-major as (n_frames * B, F)."""
        z = ad.concat([z1, z2], axis=1)
        states = self._run_lstm("dec", [z] * n_frames)
        return self._gaussian_head("dec_out", ad.concat(states, axis=0), self.config.input_dim)


def _reparameterize(mean, logvar, noise):
    return ad.add(mean, ad.mul(ad.exp(ad.scale(logvar, 0.5)), ad.Tensor(noise)))


def _const(shape, value, dtype):
    return ad.Tensor(np.full(shape, value, dtype=dtype))


def segment_loss(model: FhvaeModel, frames: np.ndarray, utt_index, seg_counts,
                 noise: tuple | None = None, rng: np.random.Generator | None = None,
                 discriminative: bool = True, mu2_rows=None):
    """Negative discriminative segmental lower bound, averaged over a batch.

    frames: (B, 20, F) normalised; utt_index: (B,) rows of the mu2 table;
    seg_counts: (B,) number of segments K of each segment's utterance.
    ``mu2_rows`` overrides the table lookup (dev utterances outside the table).
    """
    c = model.config
    dtype = np.dtype(c.dtype)
    frames = np.asarray(frames, dtype=dtype)
    if frames.ndim != 3 or frames.shape[2] != c.input_dim:
        raise ShapeError("frames must be (B, T, F)", shape=list(frames.shape))
    b, t, f = frames.shape
    utt_index = np.asarray(utt_index, dtype=np.int64)
    if noise is None:
        rng = rng or np.random.default_rng(c.seed)
        noise = (rng.standard_normal((b, c.z2_dim)).astype(dtype),
                 rng.standard_normal((b, c.z1_dim)).astype(dtype))
    eps2, eps1 = noise

    mu2, lv2 = model.encode_z2(frames)
    z2 = _reparameterize(mu2, lv2, eps2)
    mu1, lv1 = model.encode_z1(frames, z2)
    z1 = _reparameterize(mu1, lv1, eps1)
    dec_mean, dec_lv = model.decode(z1, z2, t)

    target = np.ascontiguousarray(frames.transpose(1, 0, 2)).reshape(t * b, f)
    recon = ad.gaussian_nll(target, dec_mean, dec_lv)
    kl1 = ad.kl_diag_gaussians(mu1, lv1, _const(mu1.shape, 0.0, dtype),
                               _const(lv1.shape, math.log(c.z1_prior_var), dtype))
    table = model.params["mu2"]
    prior_mean = ad.gather_rows(table, utt_index) if mu2_rows is None else ad.Tensor(mu2_rows)
    kl2 = ad.kl_diag_gaussians(mu2, lv2, prior_mean,
                               _const(lv2.shape, math.log(c.z2_prior_var), dtype))
    weights = (1.0 / np.asarray(seg_counts, dtype=np.float64)).astype(dtype)
    sq = ad.sum_(ad.mul(prior_mean, prior_mean), axis=1)
    log_prior = ad.sub(
        _const((b,), -0.5 * c.z2_dim * math.log(2 * math.pi * c.mu2_prior_var), dtype),
        ad.scale(sq, 0.5 / c.mu2_prior_var))
    log_prior_mu2 = ad.sum_(ad.mul(log_prior, ad.Tensor(weights)))
    lower_bound = ad.sub(ad.sub(ad.sub(ad.scale(recon, -1.0), kl1), kl2),
                         ad.scale(log_prior_mu2, -1.0))
    parts = {"recon": recon, "kl_z1": kl1, "kl_z2": kl2, "log_p_mu2": log_prior_mu2}
    loss = ad.scale(lower_bound, -1.0)
    if discriminative:
        # log-softmax over utterances of -|mu2 - table_j|^2 / (2 var); the |mu2|^2
        # term is common to every j and cancels.
        scores = ad.matmul(mu2, ad.transpose(table))
        half_sq = ad.scale(ad.sum_(ad.mul(table, table), axis=1), -0.5)
        logits = ad.scale(ad.add_row(scores, half_sq), 1.0 / c.z2_prior_var)
        disc = ad.softmax_cross_entropy(logits, utt_index, reduction="sum")
        parts["log_p_utt"] = ad.scale(disc, -1.0)
        loss = ad.add(loss, ad.scale(disc, c.alpha))
    loss = ad.scale(loss, 1.0 / b)
    return loss, parts


def elbo(model: FhvaeModel, segment: Segment, seg_count: int = 1, noise=None):
    """Loss and its components for one training segment."""
    idx = model.utterance_index(segment.utterance_id)
    x = model.normalize_input(segment.frames)[None]
    loss, parts = segment_loss(model, x, [idx], [seg_count], noise=noise)
    return loss, {k: v.item() for k, v in parts.items()}


# ------------------------------------------------------------ training

@dataclass
class FhvaeResult:
    model: FhvaeModel
    log: list = field(default_factory=list)
    best_epoch: int = 0
    optimizer: ad.OptimizerState | None = None


def _segments_by_utterance(items):
    """items: iterable of (utterance_id, T x F frames) -> stacked segments and owners."""
    frames, owners = [], []
    for uid, feats in items:
        segs = segment_stream(feats, uid, "train")
        frames.extend(s.frames for s in segs)
        owners.extend([uid] * len(segs))
    if not frames:
        return np.zeros((0, SEGMENT_FRAMES, 0)), []
    return np.stack(frames), owners


def dev_loss(model: FhvaeModel, items, seed: int = 12345) -> float:
    """Per-segment negative lower bound on held-out utterances.

    Their z2 prior mean is the posterior-mean MAP estimate
    sum(mu2_k) / (K + var_z2 / var_mu2); the discriminative term is left out.
    """
    c = model.config
    rng = np.random.default_rng(seed)
    total, count = 0.0, 0
    with ad.no_grad():
        for uid, feats in items:
            segs = segment_stream(feats, uid, "train")
            if not segs:
                continue
            x = model.normalize_input(np.stack([s.frames for s in segs]))
            mu2, _ = model.encode_z2(x)
            k = len(segs)
            est = mu2.value.sum(axis=0) / (k + c.z2_prior_var / c.mu2_prior_var)
            rows = np.repeat(est[None], k, axis=0).astype(c.dtype)
            loss, _ = segment_loss(model, x, np.zeros(k, dtype=np.int64), np.full(k, k), rng=rng,
                                   discriminative=False, mu2_rows=rows)
            total += loss.item() * k
            count += k
    if count == 0:
        raise DataError("dev set yields no 20-frame segments")
    return total / count


def train_fhvae(train_items, dev_items, config: FhvaeConfig) -> FhvaeResult:
    """Adam training with early stopping on the dev bound; returns the best-dev model.

    ``train_items``/``dev_items`` are (utterance_id, T x F) pairs; the train
    ids become the utterance table.
    """
    train_items = list(train_items)
    dev_items = list(dev_items)
    if not train_items:
        raise DataError("empty FHVAE training set")
    if not dev_items:
        raise DataError("empty FHVAE dev set")
    segs, owners = _segments_by_utterance(train_items)
    if len(owners) == 0:
        raise DataError("training utterances are shorter than one segment")
    model = FhvaeModel(config, [uid for uid, _ in train_items])
    model.set_input_stats(np.concatenate([np.asarray(f, dtype=np.float64) for _, f in train_items]))
    x_all = model.normalize_input(segs)
    idx_all = np.array([model.index[o] for o in owners])
    counts = np.bincount(idx_all, minlength=len(model.utterance_ids))
    k_all = counts[idx_all]

    rng = np.random.default_rng(config.seed)
    state = ad.OptimizerState("adam", config.learning_rate, config.clip_norm,
                              config.beta1, config.beta2, config.eps)
    best, best_epoch, best_arrays, stale = math.inf, 0, model.state_arrays(), 0
    history = []
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(idx_all))
        losses = []
        for start in range(0, len(order), config.batch_size):
            sel = order[start:start + config.batch_size]
            ad.zero_grads(model.params)
            loss, _ = segment_loss(model, x_all[sel], idx_all[sel], k_all[sel], rng=rng)
            loss.backward()
            ad.adam_step(model.params, None, state)
            losses.append(loss.item())
        dev = dev_loss(model, dev_items)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "dev_loss": dev})
        log.debug("fhvae epoch %d train %.3f dev %.3f", epoch, history[-1]["train_loss"], dev)
        if dev < best:
            best, best_epoch, best_arrays, stale = dev, epoch, model.state_arrays(), 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.load_arrays(best_arrays)
    return FhvaeResult(model, history, best_epoch, state)


# ------------------------------------------------------------ extraction

def _latent_stats(model: FhvaeModel, frames: np.ndarray, batch: int = 512):
    """Posterior z1 mean/logvar for every valid 20-frame window (rows = window starts)."""
    x = model.normalize_input(frames)
    windows = np.lib.stride_tricks.sliding_window_view(x, SEGMENT_FRAMES, axis=0)
    windows = np.ascontiguousarray(windows.transpose(0, 2, 1))
    means, logvars = [], []
    with ad.no_grad():
        for s in range(0, len(windows), batch):
            w = windows[s:s + batch]
            mu2, _ = model.encode_z2(w)
            mu1, lv1 = model.encode_z1(w, mu2)
            means.append(mu1.value)
            logvars.append(lv1.value)
    return np.concatenate(means).astype(np.float64), np.concatenate(logvars).astype(np.float64)


def raw_z1(model: FhvaeModel, features, include_logvar: bool = False) -> np.ndarray:
    """Un-normalised z1 features with the original number of frames."""
    frames = features.frames if isinstance(features, FeatureMatrix) else np.asarray(features)
    t = len(frames)
    if t == 0:
        raise DataError("empty feature matrix")
    half = SEGMENT_FRAMES // 2
    if t >= SEGMENT_FRAMES:
        mean, logvar = _latent_stats(model, frames)
        pad = (half, SEGMENT_FRAMES - 1 - half)
        mean = np.pad(mean, (pad, (0, 0)), mode="edge")
        logvar = np.pad(logvar, (pad, (0, 0)), mode="edge")
    else:
        segs = np.stack([s.frames for s in segment_stream(frames, mode="extract")])
        x = model.normalize_input(segs)
        with ad.no_grad():
            mu2, _ = model.encode_z2(x)
            m, lv = model.encode_z1(x, mu2)
        mean, logvar = m.value.astype(np.float64), lv.value.astype(np.float64)
    return np.concatenate([mean, logvar], axis=1) if include_logvar else mean


def fit_normalization(model: FhvaeModel, feature_list, include_logvar: bool = False) -> None:
    """Store per-dimension mean/std of z1 features over a training set."""
    stacked = np.concatenate([raw_z1(model, f, include_logvar) for f in feature_list])
    key = "z1lv" if include_logvar else "z1"
    model.aux[f"{key}_mean"] = stacked.mean(axis=0)
    model.aux[f"{key}_std"] = np.maximum(stacked.std(axis=0), 1e-6)


def extract_z1(model: FhvaeModel, features, include_logvar: bool = False) -> FeatureMatrix:
    """Normalised z1 posterior means (optionally with log-variances), one row per input frame."""
    key = "z1lv" if include_logvar else "z1"
    if f"{key}_mean" not in model.aux:
        raise StateError("normalisation statistics missing; call fit_normalization first",
                         include_logvar=include_logvar)
    z = raw_z1(model, features, include_logvar)
    z = (z - model.aux[f"{key}_mean"]) / model.aux[f"{key}_std"]
    sid = features.source_id if isinstance(features, FeatureMatrix) else ""
    kind = "z1-mean+logvar" if include_logvar else "z1-mean"
    return FeatureMatrix(z, 0.01, kind, sid)


def save_fhvae(model: FhvaeModel, path) -> None:
    """CKPT1 file (normalisation statistics ride along as aux tensors) plus a JSON sidecar."""
    path = Path(path)
    save_checkpoint(model.to_checkpoint(), path)
    sidecar = {"config": asdict(model.config), "utterance_ids": model.utterance_ids,
               "normalization": sorted(k for k in model.aux if k.startswith("z1"))}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1))


def load_fhvae(path) -> FhvaeModel:
    return FhvaeModel.from_checkpoint(load_checkpoint(path))
