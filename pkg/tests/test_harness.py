import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from reverbkit import fhvae, models, roomsim
from reverbkit.augment import CorruptionSpec, generate
from reverbkit.errors import ArgumentError, NumericError, StateError
from reverbkit.harness import (
    ChannelSpec, CorpusParams, ExperimentConfig, MetricsReport, make_distant, report, run_grid,
    synth_corpus,
)
from reverbkit.harness.grid import ArmRunner, Cell, prepare_seed, shift_labels
from reverbkit.harness.report import parse_csv, to_csv, to_svg, to_text
from reverbkit.manifest import load_labels
from reverbkit.sigproc import logmel, read_wav

SMALL = CorpusParams(n_train=3, n_dev=1, n_test=2, frames_per_utt=120)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    return synth_corpus(SMALL, 3, tmp_path_factory.mktemp("corpus"))


@pytest.fixture(scope="module")
def pool():
    return [roomsim.image_method(s, 0.3) for s in roomsim.sample_rooms("S1", 1, 2, 5)]


def test_corpus_contract(corpus):
    assert [len(corpus[r]) for r in ("train", "dev", "test")] == [3, 1, 2]
    for e in corpus["train"]:
        labels = load_labels(e)
        feats = logmel(read_wav(e.audio, e.id))
        assert len(labels) == feats.num_frames == 120
        assert labels.min() >= 0 and labels.max() < 8
    with pytest.raises(ArgumentError):
        CorpusParams(n_label_classes=1)


def test_corpus_is_byte_identical_per_seed(corpus, tmp_path):
    again = synth_corpus(SMALL, 3, tmp_path / "again")
    other = synth_corpus(SMALL, 4, tmp_path / "other")
    for a, b, c in zip(corpus["train"], again["train"], other["train"]):
        assert open(a.audio, "rb").read() == open(b.audio, "rb").read()
        assert open(a.audio, "rb").read() != open(c.audio, "rb").read()


def test_unit_classes_have_distinct_spectral_peaks(tmp_path):
    params = CorpusParams(n_train=6, n_dev=1, n_test=1, frames_per_utt=300, floor_db=-60.0)
    corpus = synth_corpus(params, 0, tmp_path)
    peaks = {}
    for e in corpus["train"]:
        feats = logmel(read_wav(e.audio, e.id)).frames
        labels = load_labels(e)
        for k in np.unique(labels):
            peaks.setdefault(int(k), []).append(feats[labels == k].mean(axis=0))
    argmax = {k: int(np.argmax(np.mean(v, axis=0))) for k, v in peaks.items()}
    assert len(argmax) >= 6
    assert len(set(argmax.values())) == len(argmax)


def test_channel_off_is_identity(corpus, pool, tmp_path):
    out = make_distant(corpus["dev"], pool, ChannelSpec.off(), tmp_path)
    for a, b in zip(corpus["dev"], out):
        np.testing.assert_array_equal(read_wav(a.audio).samples, read_wav(b.audio).samples)
        assert b.domain == "SDM"


def test_reverb_only_channel_equals_generate(corpus, pool, tmp_path):
    ch = ChannelSpec(gain_db=0.0, snr_db=None, keep_gain=False, seed=9)
    dist = make_distant(corpus["dev"], pool, ch, tmp_path / "d")
    ref = generate(corpus["dev"], CorruptionSpec(pool, snr_db=None, gain_db=0.0, seed=9),
                   tmp_path / "g")
    for a, b in zip(dist, ref):
        assert open(a.audio, "rb").read() == open(b.audio, "rb").read()


def test_distant_features_differ(corpus, pool, tmp_path):
    dist = make_distant(corpus["test"], pool, ChannelSpec(seed=1), tmp_path)
    for a, b in zip(corpus["test"], dist):
        fa = logmel(read_wav(a.audio)).frames
        fb = logmel(read_wav(b.audio)).frames
        assert fa.shape == fb.shape
        assert np.mean(np.linalg.norm(fa - fb, axis=1)) > 0


def test_shift_labels():
    np.testing.assert_array_equal(shift_labels(np.array([1, 2, 3, 4]), 2), [1, 1, 1, 2])
    np.testing.assert_array_equal(shift_labels(np.array([1, 2]), 0), [1, 2])


# ------------------------------------------------------------ report

def _metrics():
    return MetricsReport([
        Cell("IHM", "IHM", {0: 1.5, 1: 2.25}, 1, "clean"),
        Cell("IHM", "SDM", {0: 20.0, 1: 1 / 3}, 1, "clean"),
        Cell("IHM", "SDM-e", {}, 3, "enhance", failed="NumericError: boom"),
    ])


def test_csv_round_trip():
    m = _metrics()
    text = to_csv(m)
    assert text.splitlines()[0].startswith("train,target,fer_mean,fer_min,fer_max,seeds")
    back = parse_csv(text)
    assert back.to_dict() == m.to_dict()


def test_svg_is_well_formed():
    root = ET.fromstring(to_svg(_metrics()))
    assert root.tag.endswith("svg")


def test_text_layout():
    text = to_text(_metrics())
    assert "Table 1" in text and "Table 3" in text and "failed" in text


def test_empty_report_refused(tmp_path):
    with pytest.raises(StateError):
        report(MetricsReport([]), tmp_path)
    assert not list(tmp_path.iterdir())
    paths = report(_metrics(), tmp_path)
    assert sorted(p.name for p in paths) == ["report.csv", "report.svg", "report.txt"]


# ------------------------------------------------------------ grid

def tiny_config(out_dir, **kw):
    d = dict(
        out_dir=str(out_dir), seeds=(0,),
        corpus=CorpusParams(n_train=3, n_dev=1, n_test=1, frames_per_utt=100),
        hidden_units=8, enhancer_units=8, epochs=1, extra_epochs=1,
        distant_rooms=1, distant_rirs_per_room=2, aug_room_sets=("S1",), aug_rooms_per_set=1,
        aug_rirs_per_room=2, aug_copies=2,
        fhvae=fhvae.FhvaeConfig(lstm_units=4, z1_dim=2, z2_dim=2, max_epochs=1, batch_size=16),
    )
    d.update(kw)
    return ExperimentConfig(**d)


def test_config_round_trip(tmp_path):
    cfg = tiny_config(tmp_path)
    again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict(), default=list)))
    assert again.to_dict() == cfg.to_dict()
    with pytest.raises(ArgumentError):
        ExperimentConfig(out_dir="x", seeds=())


@pytest.fixture(scope="module")
def grid_run(tmp_path_factory):
    """Tiny grid with spies on every trainer recording the utterance ids it was given."""
    seen = []
    mp = pytest.MonkeyPatch()
    for mod, name in ((models, "train_acoustic_model"), (models, "train_enhancer"),
                      (fhvae, "train_fhvae")):
        real = getattr(mod, name)

        def spy(*args, _real=real, **kw):
            for group in args[:3]:
                if isinstance(group, list):
                    for u in group:
                        seen.append(u.id if hasattr(u, "id") else u[0])
            return _real(*args, **kw)
        mp.setattr(mod, name, spy)
    try:
        out = tmp_path_factory.mktemp("grid")
        metrics = run_grid(tiny_config(out))
    finally:
        mp.undo()
    return out, metrics, seen


def test_grid_produces_every_cell(grid_run):
    out, metrics, _ = grid_run
    cfg = tiny_config(out)
    expected = [(a.train_label, a.target_label(t)) for a in cfg.arms for t in a.targets]
    assert [(c.train, c.target) for c in metrics.cells] == expected
    assert not metrics.failed
    for c in metrics.cells:
        assert c.seeds == 1 and 0.0 <= c.mean <= 100.0
    assert (out / "clean" / "0" / "am.ckpt").exists()
    assert (out / "enhance" / "0" / "enhancer.ckpt").exists()
    assert (out / "z1" / "0" / "fhvae.ckpt").exists()
    assert MetricsReport.from_dict(json.loads((out / "metrics.json").read_text())).to_dict() \
        == metrics.to_dict()


def test_training_never_sees_test_utterances(grid_run):
    _, _, seen = grid_run
    assert seen
    assert not [u for u in seen if "test" in u]


def test_runner_refuses_test_role(tmp_path):
    cfg = tiny_config(tmp_path)
    runner = ArmRunner(cfg, prepare_seed(cfg, 0))
    with pytest.raises(StateError):
        runner.utterances("IHM", "test")


def test_grid_is_deterministic(grid_run, tmp_path):
    _, metrics, _ = grid_run
    again = run_grid(tiny_config(tmp_path))
    assert to_csv(again) == to_csv(metrics)


def test_failed_arm_is_recorded(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise NumericError("diverged")
    monkeypatch.setattr(models, "train_enhancer", boom)
    cfg = tiny_config(tmp_path, arms=[a for a in tiny_config(tmp_path).arms
                                      if a.name in ("clean", "enhance")])
    metrics = run_grid(cfg)
    failed = {c.arm for c in metrics.failed}
    assert failed == {"enhance"}
    assert metrics.cell("IHM", "IHM").seeds == 1
    assert "diverged" in to_text(metrics)
