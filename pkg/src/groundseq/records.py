"""JSONL record files that carry their vocabulary manifest.

Every file opens with a header line ``{"header": {...}}`` holding the
record kind and the vocabulary manifest. Readers accept header lines
anywhere, so concatenating shards yields a valid file as long as all
headers agree.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, TextIO, Union

from groundseq.builder import Annotation, Entity
from groundseq.vocab import QuantBox, UnifiedVocab

logger = logging.getLogger(__name__)

HEADER_KEY = "header"


class VocabMismatch(ValueError):
    pass


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_header(f: TextIO, kind: str, vocab: UnifiedVocab, **extra) -> None:
    f.write(dumps({HEADER_KEY: {"kind": kind, "vocab": vocab.manifest(), **extra}}) + "\n")


def write_record(f: TextIO, rec: dict) -> None:
    f.write(dumps(rec) + "\n")


@dataclass
class ReadStats:
    records: int = 0
    malformed: list[int] = field(default_factory=list)


@dataclass
class RecordFile:
    """Streaming reader; ``vocab`` is set from the first header line."""

    path: Path
    vocab: Optional[UnifiedVocab] = None
    kind: Optional[str] = None
    stats: ReadStats = field(default_factory=ReadStats)

    def __iter__(self) -> Iterator[tuple[int, dict]]:
        with open(self.path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    if not isinstance(obj, dict):
                        raise ValueError("record is not an object")
                except ValueError as e:
                    logger.warning("%s:%d: malformed record skipped (%s)", self.path, lineno, e)
                    self.stats.malformed.append(lineno)
                    continue
                if HEADER_KEY in obj:
                    self._header(obj[HEADER_KEY], lineno)
                    continue
                self.stats.records += 1
                yield lineno, obj

    def _header(self, h: dict, lineno: int) -> None:
        vocab = UnifiedVocab.from_manifest(h["vocab"])
        if self.vocab is not None and vocab != self.vocab:
            raise VocabMismatch(f"{self.path}:{lineno}: header vocabulary differs from an earlier header")
        self.vocab = vocab
        self.kind = h.get("kind")

    def skip(self, lineno: int, reason: str) -> None:
        """Mark an already-yielded record as malformed."""
        logger.warning("%s:%d: malformed record skipped (%s)", self.path, lineno, reason)
        self.stats.records -= 1
        self.stats.malformed.append(lineno)


def read_header(path: Union[str, Path]) -> dict:
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                obj = json.loads(line)
                if HEADER_KEY not in obj:
                    break
                return obj[HEADER_KEY]
    raise ValueError(f"{path}: missing header line")


def annotation_to_record(task: str, ann: Annotation, vocab: UnifiedVocab) -> dict:
    rec = {
        "image": ann.image,
        "task": task,
        "words": [vocab.words[i] for i in ann.words],
        "entities": [{"start": e.start, "end": e.end, "box": list(e.box.as_tuple())} for e in ann.entities],
    }
    if ann.answer:
        rec["answer"] = [vocab.words[i] for i in ann.answer]
    return rec


def record_to_annotation(rec: dict, vocab: UnifiedVocab) -> tuple[str, Annotation]:
    ents = [Entity(int(e["start"]), int(e["end"]), QuantBox(*map(int, e["box"]))) for e in rec.get("entities", [])]
    for e in ents:
        e.box.check_range(vocab.n_bins)
    ann = Annotation(
        rec["image"],
        vocab.encode_words(rec["words"]),
        ents,
        vocab.encode_words(rec.get("answer", [])),
    )
    ann.grounded()  # span validation
    return rec["task"], ann
