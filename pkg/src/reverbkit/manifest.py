"""Line-delimited JSON manifests and frame-label files.

A manifest line is ``{"id", "audio", "domain", "labels"}``; stages may add
keys (``features`` for a FEAT1 path). Entries are kept sorted by id; the
same id may appear once per domain, which is how parallel corpora are pooled.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError

ROLES = ("train", "dev", "test")


@dataclass(frozen=True)
class Entry:
    id: str
    audio: str | None
    domain: str
    labels: str | None = None
    features: str | None = None

    def to_dict(self) -> dict:
        d = {"id": self.id, "audio": self.audio, "domain": self.domain, "labels": self.labels}
        if self.features is not None:
            d["features"] = self.features
        return d


@dataclass
class Manifest:
    entries: list = field(default_factory=list)
    role: str = "train"

    def __post_init__(self):
        if self.role not in ROLES:
            raise DataError(f"unknown manifest role {self.role!r}")
        self.entries = sorted(self.entries, key=lambda e: (e.id, e.domain))
        keys = [(e.id, e.domain) for e in self.entries]
        if len(set(keys)) != len(keys):
            raise DataError("duplicate (id, domain) pairs in manifest")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    @property
    def domains(self) -> set[str]:
        return {e.domain for e in self.entries}

    def with_role(self, role: str) -> "Manifest":
        return Manifest(list(self.entries), role)

    def map(self, fn) -> "Manifest":
        return Manifest([fn(e) for e in self.entries], self.role)

    def __add__(self, other: "Manifest") -> "Manifest":
        if self.role != other.role:
            raise DataError("cannot pool manifests with different roles",
                            left=self.role, right=other.role)
        return Manifest(self.entries + other.entries, self.role)


def write_manifest(manifest: Manifest, path, relative_to=None) -> None:
    entries = manifest.entries
    if relative_to is not None:
        entries = [_relativize(e, Path(relative_to)) for e in entries]
    lines = [json.dumps(e.to_dict(), sort_keys=True) for e in entries]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_manifest(path, role: str = "train") -> Manifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}", path=str(path))
    base = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            entry = Entry(rec["id"], rec.get("audio"), rec["domain"], rec.get("labels"),
                          rec.get("features"))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"bad manifest line {lineno}: {exc}", path=str(path)) from exc
        entries.append(_resolve(entry, base))
    return Manifest(entries, role)


def _resolve(entry: Entry, base: Path) -> Entry:
    def fix(p):
        if p is None or Path(p).is_absolute():
            return p
        return str(base / p)

    return replace(entry, audio=fix(entry.audio), labels=fix(entry.labels),
                   features=fix(entry.features))


def _relativize(entry: Entry, base: Path) -> Entry:
    def fix(p):
        if p is None:
            return p
        try:
            return str(Path(p).resolve().relative_to(base.resolve()))
        except ValueError:
            return p

    return replace(entry, audio=fix(entry.audio), labels=fix(entry.labels),
                   features=fix(entry.features))


def write_labels(utt_id: str, labels, path) -> None:
    Path(path).write_text(utt_id + " " + " ".join(str(int(v)) for v in labels) + "\n")


def read_labels(path) -> tuple[str, np.ndarray]:
    """One line: utterance id followed by integer frame labels."""
    path = Path(path)
    try:
        fields = path.read_text().split()
    except OSError as exc:
        raise DataError(f"cannot read labels: {path}", path=str(path)) from exc
    if not fields:
        raise FormatError("empty label file", path=str(path))
    try:
        labels = np.array([int(v) for v in fields[1:]], dtype=np.int64)
    except ValueError as exc:
        raise FormatError(f"non-integer label in {path}", path=str(path)) from exc
    return fields[0], labels


def load_labels(entry: Entry) -> np.ndarray:
    if entry.labels is None:
        raise DataError("entry has no labels", id=entry.id)
    utt, labels = read_labels(entry.labels)
    if utt != entry.id:
        raise DataError("label file utterance id mismatch", id=entry.id, found=utt)
    return labels
