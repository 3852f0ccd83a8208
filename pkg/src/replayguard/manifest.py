"""Corpus manifests: ``id<TAB>relpath<TAB>label<TAB>device<TAB>factor`` per line."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

LABELS = ("bonafide", "spoof")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Entry:
    utt_id: str
    relpath: str
    label: str
    device: str = "-"
    factor: float = 1.0

    def __post_init__(self):
        if self.label not in LABELS:
            raise ManifestError(f"{self.utt_id}: label {self.label!r} not in {LABELS}")

    def format(self) -> str:
        return f"{self.utt_id}\t{self.relpath}\t{self.label}\t{self.device}\t{float(self.factor)!r}"


@dataclass
class Manifest:
    entries: list
    root: Path = Path(".")

    def __post_init__(self):
        ids = [e.utt_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ManifestError(f"duplicate utterance ids: {dup[:5]}")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def path_of(self, e: Entry) -> Path:
        return self.root / e.relpath

    def labels(self) -> dict:
        return {e.utt_id: e.label for e in self.entries}

    def write(self, path) -> None:
        path = Path(path)
        path.write_text("".join(e.format() + "\n" for e in self.entries))

    def write_trials(self, path) -> None:
        Path(path).write_text("".join(f"{e.utt_id}\t{e.label}\n" for e in self.entries))


def read_manifest(path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such manifest: {path}")
    entries = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ManifestError(f"{path}:{n}: expected 5 tab-separated fields, got {len(parts)}")
        try:
            factor = float(parts[4])
        except ValueError as e:
            raise ManifestError(f"{path}:{n}: bad speed factor {parts[4]!r}") from e
        entries.append(Entry(parts[0], parts[1], parts[2], parts[3], factor))
    return Manifest(entries, path.parent)
