"""``reverbkit`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage, 2 data, 3 numeric. Failures are reported on
stderr as one JSON line ``{"code", "message", "context"}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, augment, fhvae, models, roomsim, sigproc
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import DataError, NumericError, ReverbkitError, UsageError
from .manifest import Entry, Manifest, load_labels, read_manifest, write_manifest

log = logging.getLogger("reverbkit")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message, prog=self.prog)


# ------------------------------------------------------------ helpers

def _read_json(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"file not found: {path}", path=str(path)) from None
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid JSON in {path}: {exc}", path=str(path)) from None


def _manifest(path, role: str) -> Manifest:
    if not Path(path).exists():
        raise DataError(f"manifest not found: {path}", path=str(path))
    return read_manifest(path, role)


def entry_features(entry: Entry) -> np.ndarray:
    """FEAT1 features when the manifest names them, log-Mel from the audio otherwise."""
    if entry.features:
        return sigproc.read_feat(entry.features, source_id=entry.id).frames
    if not entry.audio:
        raise DataError(f"entry {entry.id} has neither features nor audio", id=entry.id)
    return sigproc.logmel(sigproc.read_wav(entry.audio, entry.id)).frames


def _utterances(manifest: Manifest) -> list:
    return [models.Utterance(e.id, entry_features(e), load_labels(e), domain=e.domain)
            for e in manifest]


def _train_config(args) -> models.TrainConfig:
    return models.TrainConfig(epochs=args.epochs, extra_epochs=args.extra_epochs,
                              step_size=args.step_size, seed=args.seed)


def _write_log(path: Path, rows) -> None:
    path.write_text(json.dumps(rows, indent=1))


# ------------------------------------------------------------ subcommands

def cmd_rir(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    specs = roomsim.sample_rooms(args.set, args.rooms, args.per_room, args.seed)
    for n, spec in enumerate(specs):
        rir = roomsim.image_method(spec, args.duration, fractional=args.fractional)
        roomsim.save_rir(rir, out / f"{args.set}_{spec.room_index:04d}_{n:06d}.wav")
    log.info("wrote %d RIRs to %s", len(specs), out)


def cmd_augment(args) -> None:
    pool = roomsim.load_rir_dir(args.rir_dir)
    spec = augment.CorruptionSpec(pool, snr_db=args.snr_db, gain_db=args.gain_db, seed=args.seed,
                                  keep_gain=args.keep_gain)
    augment.generate(_manifest(args.manifest, args.role), spec, args.out, domain=args.domain)


def cmd_features(args) -> None:
    if args.wav:
        clip = sigproc.read_wav(args.wav)
        sigproc.write_feat(sigproc.logmel(clip), args.out)
        return
    if not args.manifest:
        raise UsageError("features needs --wav or --manifest")
    man = _manifest(args.manifest, args.role)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for e in man:
        path = out / f"{e.id}.feat"
        sigproc.write_feat(sigproc.logmel(sigproc.read_wav(e.audio, e.id)), path)
        entries.append(Entry(e.id, e.audio, e.domain, e.labels, str(path)))
    write_manifest(Manifest(entries, man.role), out / "manifest.jsonl")


def cmd_synth(args) -> None:
    from .harness.corpus import CorpusParams, synth_corpus

    params = CorpusParams(**_read_json(args.config)) if args.config else CorpusParams()
    synth_corpus(params, args.seed, args.out)


def cmd_train_am(args) -> None:
    train = _utterances(_manifest(args.train, "train"))
    dev = _utterances(_manifest(args.dev, "dev"))
    if not train:
        raise DataError("empty training manifest", path=args.train)
    n_out = args.classes or int(max(u.labels.max() for u in train + dev)) + 1
    tdnn = models.TdnnConfig(hidden_units=args.hidden, input_dim=train[0].features.shape[1],
                             n_outputs=n_out, seed=args.seed)
    result = models.train_acoustic_model(train, dev, tdnn, _train_config(args))
    save_checkpoint(result.checkpoint, args.out)
    _write_log(Path(args.out).with_suffix(".log.json"),
               [{"epoch": h["epoch"], "train_ce": h["train_ce"], "dev_fer": h["dev_fer"],
                 "step_size": h["step_size"]} for h in result.log])


def _pairs(noisy: Manifest, clean: Manifest) -> list:
    targets = {e.id: entry_features(e) for e in clean}
    missing = [e.id for e in noisy if e.id not in targets]
    if missing:
        raise DataError("corrupted utterances without a clean counterpart", ids=missing[:5])
    return [models.Utterance(e.id, entry_features(e), target=targets[e.id]) for e in noisy]


def cmd_train_enhance(args) -> None:
    clean_train = _manifest(args.clean, "train")
    clean_dev = _manifest(args.dev_clean, "dev")
    parallel = _pairs(_manifest(args.noisy, "train"), clean_train)
    identity = _pairs(clean_train, clean_train)
    dev = _pairs(_manifest(args.dev_noisy, "dev"), clean_dev) + _pairs(clean_dev, clean_dev)
    tdnn = models.TdnnConfig(hidden_units=args.hidden, output="linear", n_outputs=80, seed=args.seed)
    result = models.train_enhancer(parallel, identity, dev, tdnn, _train_config(args))
    save_checkpoint(result.checkpoint, args.out)
    _write_log(Path(args.out).with_suffix(".log.json"),
               [{"epoch": h["epoch"], "train_mse": h["train_mse"], "dev_mse": h["dev_mse"],
                 "step_size": h["step_size"]} for h in result.log])


def cmd_train_fhvae(args) -> None:
    def items(paths, role):
        return [(f"{e.domain}/{e.id}", entry_features(e)) for p in paths for e in _manifest(p, role)]

    train, dev = items(args.train, "train"), items(args.dev, "dev")
    cfg = fhvae.FhvaeConfig(lstm_units=args.lstm_units, z1_dim=args.z1_dim, z2_dim=args.z2_dim,
                            max_epochs=args.max_epochs, batch_size=args.batch_size, seed=args.seed)
    result = fhvae.train_fhvae(train, dev, cfg)
    feats = [x for _, x in train]
    fhvae.fit_normalization(result.model, feats, include_logvar=False)
    fhvae.fit_normalization(result.model, feats, include_logvar=True)
    fhvae.save_fhvae(result.model, args.out)
    _write_log(Path(args.out).with_suffix(".log.json"), result.log)


def cmd_extract_z1(args) -> None:
    model = fhvae.load_fhvae(args.model)
    man = _manifest(args.manifest, args.role)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for e in man:
        path = out / f"{e.id}.feat"
        sigproc.write_feat(fhvae.extract_z1(model, entry_features(e), args.logvar), path)
        entries.append(Entry(e.id, e.audio, e.domain, e.labels, str(path)))
    write_manifest(Manifest(entries, man.role), out / "manifest.jsonl")


def cmd_eval(args) -> None:
    am = load_checkpoint(args.model)
    mapper = load_checkpoint(args.enhancer) if args.enhancer else None
    utts = []
    for e in _manifest(args.manifest, "test"):
        feats = entry_features(e)
        if mapper is not None:
            feats = models.enhance(feats, mapper).frames
        utts.append(models.Utterance(e.id, feats, load_labels(e)))
    fer = models.evaluate_fer(utts, am)
    print(json.dumps({"fer": fer, "utterances": len(utts)}))


def cmd_grid(args) -> None:
    from .harness.grid import ExperimentConfig, run_grid
    from .harness.report import report

    doc = _read_json(args.config)
    if args.out:
        doc["out_dir"] = args.out
    if "out_dir" not in doc:
        raise UsageError("grid needs --out or an out_dir in the config")
    if args.seeds:
        doc["seeds"] = args.seeds
    config = ExperimentConfig.from_dict(doc)
    metrics = run_grid(config)
    report(metrics, config.out_dir)


def cmd_report(args) -> None:
    from .harness.grid import MetricsReport
    from .harness.report import report

    metrics = MetricsReport.from_dict(_read_json(args.metrics))
    report(metrics, args.out, args.format)


# ------------------------------------------------------------ parser

def _training_flags(p, step_size: float) -> None:
    p.add_argument("--hidden", type=int, default=64, help="hidden units per layer")
    p.add_argument("--epochs", type=int, default=20, help="phase-1 epochs")
    p.add_argument("--extra-epochs", type=int, default=5, help="phase-2 epochs")
    p.add_argument("--step-size", type=float, default=step_size, help="phase-1 step size")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="reverbkit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"reverbkit {__version__}")
    parser.add_argument("--seed", type=int, default=0, help="seed for every stochastic stage")
    parser.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="logging verbosity")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("rir", help="simulate room impulse responses")
    p.add_argument("action", choices=["sample"], help="only 'sample' is defined")
    p.add_argument("--set", required=True, choices=sorted(roomsim.ROOM_SETS), help="room set")
    p.add_argument("--rooms", type=int, required=True, help="rooms to sample")
    p.add_argument("--per-room", type=int, required=True, help="RIRs per room")
    p.add_argument("--duration", type=float, default=1.0, help="RIR length in seconds")
    p.add_argument("--fractional", action="store_true", help="windowed-sinc tap placement")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_rir)

    p = sub.add_parser("augment", help="convolve a manifest with random RIRs")
    p.add_argument("--manifest", required=True, help="input manifest (JSON lines)")
    p.add_argument("--rir-dir", required=True, help="directory of RIR WAVs")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--keep-gain", action="store_true", help="skip peak renormalisation")
    p.add_argument("--snr-db", type=float, default=None, help="add white noise at this SNR")
    p.add_argument("--gain-db", type=float, default=0.0, help="gain offset after reverb")
    p.add_argument("--domain", default="IHM-r", help="domain tag of the output")
    p.add_argument("--role", default="train", choices=["train", "dev", "test"], help="manifest role")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("features", help="log-Mel features to FEAT1 files")
    p.add_argument("--wav", help="single WAV input (writes one FEAT1 file to --out)")
    p.add_argument("--manifest", help="manifest input (writes DIR/<id>.feat and a manifest)")
    p.add_argument("--role", default="train", choices=["train", "dev", "test"], help="manifest role")
    p.add_argument("--out", required=True, help="output file or directory")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("synth", help="synthesize the clean desk-scale corpus")
    p.add_argument("--config", help="JSON file of corpus parameters")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-am", help="train a TDNN frame classifier")
    p.add_argument("--train", required=True, help="training manifest")
    p.add_argument("--dev", required=True, help="dev manifest for model selection")
    p.add_argument("--classes", type=int, default=None, help="number of label classes")
    p.add_argument("--out", required=True, help="checkpoint path (CKPT1)")
    _training_flags(p, 0.025)
    p.set_defaults(func=cmd_train_am)

    p = sub.add_parser("train-enhance", help="train a TDNN feature enhancer")
    p.add_argument("--noisy", required=True, help="corrupted training manifest")
    p.add_argument("--clean", required=True, help="parallel clean training manifest")
    p.add_argument("--dev-noisy", required=True, help="corrupted dev manifest")
    p.add_argument("--dev-clean", required=True, help="parallel clean dev manifest")
    p.add_argument("--out", required=True, help="checkpoint path (CKPT1)")
    _training_flags(p, 0.025)
    p.set_defaults(func=cmd_train_enhance)

    p = sub.add_parser("train-fhvae", help="train a factorized hierarchical VAE")
    p.add_argument("--train", required=True, nargs="+", help="training manifests")
    p.add_argument("--dev", required=True, nargs="+", help="dev manifests for early stopping")
    p.add_argument("--lstm-units", type=int, default=256, help="LSTM width")
    p.add_argument("--z1-dim", type=int, default=32, help="segment latent size")
    p.add_argument("--z2-dim", type=int, default=32, help="sequence latent size")
    p.add_argument("--max-epochs", type=int, default=50, help="epoch cap")
    p.add_argument("--batch-size", type=int, default=32, help="segments per step")
    p.add_argument("--out", required=True, help="checkpoint path (CKPT1 + JSON sidecar)")
    p.set_defaults(func=cmd_train_fhvae)

    p = sub.add_parser("extract-z1", help="write normalised z1 features")
    p.add_argument("--model", required=True, help="FHVAE checkpoint")
    p.add_argument("--manifest", required=True, help="input manifest")
    p.add_argument("--role", default="train", choices=["train", "dev", "test"], help="manifest role")
    p.add_argument("--logvar", action="store_true", help="append log-variances")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_extract_z1)

    p = sub.add_parser("eval", help="frame error rate of a classifier on a test manifest")
    p.add_argument("--model", required=True, help="classifier checkpoint")
    p.add_argument("--manifest", required=True, help="test manifest")
    p.add_argument("--enhancer", help="optional enhancer applied to the features first")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grid", help="run the experiment grid and write the report")
    p.add_argument("--config", required=True, help="JSON document mirroring ExperimentConfig")
    p.add_argument("--out", help="output directory (overrides out_dir in the config)")
    p.add_argument("--seeds", type=int, nargs="+", help="override the config's seeds")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("report", help="render metrics.json as CSV, SVG and text")
    p.add_argument("--metrics", required=True, help="metrics.json written by grid")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--format", nargs="+", default=["csv", "svg", "text"],
                   choices=["csv", "svg", "text"], help="formats to write")
    p.set_defaults(func=cmd_report)
    return parser


def _emit(exc: ReverbkitError) -> None:
    record = {"code": exc.code, "message": exc.message, "context": exc.context}
    print(json.dumps(record, default=str), file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("no subcommand given")
        args.func(args)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except ReverbkitError as exc:
        _emit(exc)
        return exc.exit_code
    except OSError as exc:
        _emit(DataError(str(exc), path=getattr(exc, "filename", None)))
        return DataError.exit_code
    except (FloatingPointError, ArithmeticError) as exc:
        _emit(NumericError(str(exc)))
        return NumericError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
