"""Corpus manifests: the CSV index of audio files, languages, splits, labels.

Emotion manifests carry columns path,language,split,emotion; personality
manifests carry path,language,split,ext,agr,con,neu,ope with trait scores
in [0, 1].  Relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from pathlib import Path

from .audio import AudioSample, read_wav

EMOTIONS = ("anger", "sadness", "happiness", "anxiety")
TRAITS = ("ext", "agr", "con", "neu", "ope")
SPLITS = ("train", "test")

EMOTION_COLUMNS = ("path", "language", "split", "emotion")
PERSONALITY_COLUMNS = ("path", "language", "split") + TRAITS


class ManifestError(ValueError):
    """Malformed corpus manifest."""


@dataclass(frozen=True)
class ManifestRow:
    path: str
    language: str
    split: str
    emotion: str | None = None
    traits: tuple[float, ...] | None = None

    @property
    def label(self):
        return self.emotion if self.emotion is not None else self.traits


@dataclass
class CorpusManifest:
    task: str  # "emotion" | "personality"
    rows: list[ManifestRow]
    root: Path

    @classmethod
    def load(cls, path) -> "CorpusManifest":
        path = Path(path)
        with open(path, newline="", encoding="utf-8") as fh:
            return cls.parse(fh.read(), root=path.parent)

    @classmethod
    def parse(cls, text: str, root=".") -> "CorpusManifest":
        reader = csv.DictReader(io.StringIO(text))
        header = tuple(reader.fieldnames or ())
        if header == EMOTION_COLUMNS:
            task = "emotion"
        elif header == PERSONALITY_COLUMNS:
            task = "personality"
        else:
            raise ManifestError(
                f"unrecognized manifest header {header}; expected "
                f"{EMOTION_COLUMNS} or {PERSONALITY_COLUMNS}"
            )
        rows = []
        for i, rec in enumerate(reader, start=2):
            if rec["split"] not in SPLITS:
                raise ManifestError(f"line {i}: bad split {rec['split']!r}")
            if task == "emotion":
                if rec["emotion"] not in EMOTIONS:
                    raise ManifestError(f"line {i}: unknown emotion {rec['emotion']!r}")
                rows.append(
                    ManifestRow(
                        path=rec["path"],
                        language=rec["language"],
                        split=rec["split"],
                        emotion=rec["emotion"],
                    )
                )
            else:
                try:
                    traits = tuple(float(rec[t]) for t in TRAITS)
                except ValueError as exc:
                    raise ManifestError(f"line {i}: non-numeric trait: {exc}") from exc
                if any(not 0.0 <= t <= 1.0 for t in traits):
                    raise ManifestError(f"line {i}: trait score outside [0, 1]")
                rows.append(
                    ManifestRow(
                        path=rec["path"],
                        language=rec["language"],
                        split=rec["split"],
                        traits=traits,
                    )
                )
        return cls(task=task, rows=rows, root=Path(root))

    def save(self, path) -> None:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            if self.task == "emotion":
                writer.writerow(EMOTION_COLUMNS)
                for r in self.rows:
                    writer.writerow([r.path, r.language, r.split, r.emotion])
            else:
                writer.writerow(PERSONALITY_COLUMNS)
                for r in self.rows:
                    writer.writerow(
                        [r.path, r.language, r.split, *(f"{t:.6f}" for t in r.traits)]
                    )

    def filter(self, split: str | None = None, languages=None) -> "CorpusManifest":
        langs = set(languages) if languages is not None else None
        rows = [
            r
            for r in self.rows
            if (split is None or r.split == split)
            and (langs is None or r.language in langs)
        ]
        return replace(self, rows=rows)

    @property
    def languages(self) -> list[str]:
        return sorted({r.language for r in self.rows})

    def resolve_path(self, row: ManifestRow) -> Path:
        p = Path(row.path)
        return p if p.is_absolute() else self.root / p

    def load_sample(self, row: ManifestRow) -> AudioSample:
        sample = read_wav(self.resolve_path(row))
        sample.language = row.language
        sample.label = row.label
        sample.source_id = Path(row.path).stem
        return sample
