"""Ground-truth target sequences: text with inline ``<obj>``-delimited box tokens."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Any, Optional, Sequence

import numpy as np

from groundseq.vocab import EOS, QuantBox, UnifiedVocab

MAX_SEQ_LEN = 256

TASKS = ("grounded_captioning", "phrase_grounding", "refexp", "captioning", "vqa", "pretrain")

TASK_PREFIXES = {
    "grounded_captioning": ("grounded", "caption", ":"),
    "phrase_grounding": ("phrase", "grounding", ":"),
    "refexp": ("visual", "grounding", ":"),
    "captioning": ("caption", ":"),
    "vqa": ("question", "answering", ":"),
    "pretrain": ("describe", ":"),
}


class MarkerStyle(str, enum.Enum):
    """Which object markers wrap a grounded group.

    ``BOTH`` is the default format; the other two are the marker ablations
    (drop ``<\\obj>``, or drop both markers).
    """

    BOTH = "both"
    OPEN_ONLY = "open_only"
    NONE = "none"


@dataclass(frozen=True)
class Entity:
    """Half-open word span ``[start, end)`` aligned to one box."""

    start: int
    end: int
    box: QuantBox


@dataclass(frozen=True)
class GroundedText:
    words: tuple[int, ...]
    entities: tuple[Entity, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "words", tuple(self.words))
        object.__setattr__(self, "entities", tuple(self.entities))
        prev_end = 0
        for e in self.entities:
            if not 0 <= e.start < e.end <= len(self.words):
                raise ValueError(f"entity span [{e.start}, {e.end}) invalid for {len(self.words)} words")
            if e.start < prev_end:
                raise ValueError(f"entity span [{e.start}, {e.end}) overlaps or is out of order")
            prev_end = e.end


@dataclass
class TaskSample:
    task: str
    input_text: list[int]
    image: Any
    target: list[int]

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if not self.target or self.target[-1] != EOS:
            raise ValueError("target must end with EOS")
        if len(self.target) > MAX_SEQ_LEN:
            raise ValueError(f"target length {len(self.target)} exceeds {MAX_SEQ_LEN}")


@dataclass
class Annotation:
    """One annotation record.

    ``words`` is the caption (grounded_captioning, phrase_grounding,
    captioning, pretrain), the query (refexp) or the question (vqa).
    ``entities`` index into ``words``. ``answer`` is only used by vqa.
    """

    image: Any
    words: list[int]
    entities: list[Entity] = field(default_factory=list)
    answer: list[int] = field(default_factory=list)

    def grounded(self) -> GroundedText:
        return GroundedText(tuple(self.words), tuple(self.entities))


def build_target(g: GroundedText, vocab: UnifiedVocab, style: MarkerStyle = MarkerStyle.BOTH) -> list[int]:
    out: list[int] = []
    pos = 0
    for e in g.entities:
        e.box.check_range(vocab.n_bins)
        out.extend(g.words[pos : e.start])
        if style != MarkerStyle.NONE:
            out.append(vocab.obj_open)
        out.extend(g.words[e.start : e.end])
        out.extend(vocab.box_ids(e.box))
        if style == MarkerStyle.BOTH:
            out.append(vocab.obj_close)
        pos = e.end
    out.extend(g.words[pos:])
    out.append(EOS)
    if len(out) > MAX_SEQ_LEN:
        raise ValueError(f"target length {len(out)} exceeds {MAX_SEQ_LEN}")
    return out


def build_pretrain_sample(
    ann: Annotation,
    vocab: UnifiedVocab,
    rng: np.random.Generator,
    p_empty: float = 0.5,
    style: MarkerStyle = MarkerStyle.BOTH,
) -> TaskSample:
    if not 0.0 <= p_empty <= 1.0:
        raise ValueError(f"p_empty must be in [0, 1], got {p_empty}")
    target = build_target(ann.grounded(), vocab, style)
    input_text = [] if rng.random() < p_empty else list(ann.words)
    return TaskSample("pretrain", input_text, ann.image, target)


def build_task_sample(
    task: str,
    ann: Annotation,
    vocab: UnifiedVocab,
    style: MarkerStyle = MarkerStyle.BOTH,
    rng: Optional[np.random.Generator] = None,
    p_empty: float = 0.5,
) -> TaskSample:
    if task == "pretrain":
        if rng is None:
            raise ValueError("pretrain samples need an rng")
        return build_pretrain_sample(ann, vocab, rng, p_empty, style)
    if task == "grounded_captioning":
        return TaskSample(task, [], ann.image, build_target(ann.grounded(), vocab, style))
    if task == "phrase_grounding":
        return TaskSample(task, list(ann.words), ann.image, build_target(ann.grounded(), vocab, style))
    if task == "refexp":
        if len(ann.entities) != 1:
            raise ValueError(f"refexp annotation needs exactly one referent, got {len(ann.entities)}")
        return TaskSample(task, list(ann.words), ann.image, build_target(ann.grounded(), vocab, style))
    if task == "captioning":
        return TaskSample(task, [], ann.image, build_target(GroundedText(tuple(ann.words)), vocab, style))
    if task == "vqa":
        if not ann.answer:
            raise ValueError("vqa annotation needs a non-empty answer")
        if ann.entities:
            raise ValueError("vqa annotation cannot carry entities")
        return TaskSample(task, list(ann.words), ann.image, build_target(GroundedText(tuple(ann.answer)), vocab, style))
    raise ValueError(f"unknown task {task!r}")


def task_prefix_ids(task: str, vocab: UnifiedVocab) -> list[int]:
    words = TASK_PREFIXES[task]
    ids = vocab.encode_words(words)
    missing = [w for w, i in zip(words, ids) if vocab.words[i] != w]
    if missing:
        raise ValueError(f"task prefix words missing from vocabulary: {missing}")
    return ids


def apply_task_prefix(sample: TaskSample, enabled: bool, vocab: UnifiedVocab) -> TaskSample:
    if not enabled:
        return sample
    return replace(sample, input_text=task_prefix_ids(sample.task, vocab) + list(sample.input_text))


def strip_task_prefix(sample: TaskSample, vocab: UnifiedVocab) -> TaskSample:
    prefix = task_prefix_ids(sample.task, vocab)
    if list(sample.input_text[: len(prefix)]) != prefix:
        raise ValueError(f"input does not start with the {sample.task} prefix")
    return replace(sample, input_text=list(sample.input_text[len(prefix) :]))


def box_token_count(ids: Sequence[int], vocab: UnifiedVocab) -> int:
    return sum(1 for i in ids if vocab.is_box(i))
