"""Validation and parsing of decoded text+box sequences.

The output grammar is regular. With the default marker style a sequence is::

    ( word | <obj> word+ box box box box <\\obj> )* EOS

Validation is a single left-to-right pass with constant state. Two failure
kinds are reported: ``box_count`` (a group's box run is not exactly four
tokens) and ``marker_misuse`` (a marker directly followed by a box token,
unpaired markers, nesting). Box tokens outside any group are tolerated as
warnings and dropped by :func:`parse`, except directly after ``<\\obj>``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

from groundseq.builder import MarkerStyle
from groundseq.vocab import EOS, BBox, QuantBox, UnifiedVocab, dequantize_box

BOX_COUNT = "box_count"
MARKER_MISUSE = "marker_misuse"
BAD_ID = "bad_id"
STRAY_BOX = "stray_box"
BOX_ORDER = "box_order"

# scanner states
_FREE, _AFTER_GROUP, _OPENED, _TEXT, _BOXES = range(5)


@dataclass(frozen=True)
class Failure:
    position: int
    kind: str


@dataclass
class ValidityReport:
    failures: list[Failure] = field(default_factory=list)
    warnings: list[Failure] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return not self.failures

    def counts(self) -> dict[str, int]:
        out = {BOX_COUNT: 0, MARKER_MISUSE: 0}
        for f in self.failures:
            out[f.kind] = out.get(f.kind, 0) + 1
        return out

    def to_dict(self) -> dict:
        return {
            "valid": self.valid,
            "failures": [[f.position, f.kind] for f in self.failures],
            "warnings": [[w.position, w.kind] for w in self.warnings],
        }


@dataclass(frozen=True)
class Grounding:
    """Half-open span over the parsed text plus the group's quantized box."""

    start: int
    end: int
    box: QuantBox


@dataclass
class ParsedOutput:
    text: list[int]
    groundings: list[Grounding]
    loose_boxes: list[QuantBox]
    report: ValidityReport


class InvalidSequenceError(ValueError):
    def __init__(self, report: ValidityReport):
        self.report = report
        super().__init__(f"invalid sequence: {report.failures}")


class NoBoxError(ValueError):
    """A box was required (refexp) but the output contains none."""


def _classify(i: int, vocab: UnifiedVocab) -> str:
    if i == EOS:
        return "e"
    if vocab.is_text(i):
        return "t"
    if vocab.is_box(i):
        return "b"
    if i == vocab.obj_open:
        return "o"
    if i == vocab.obj_close:
        return "c"
    return "?"


def _make_box(bins: Sequence[int], pos: int, warnings: list[Failure]) -> QuantBox:
    x0, y0, x1, y1 = bins
    if x0 > x1 or y0 > y1:
        warnings.append(Failure(pos, BOX_ORDER))
    return QuantBox(min(x0, x1), min(y0, y1), max(x0, x1), max(y0, y1))


def _scan(seq: Sequence[int], vocab: UnifiedVocab, style: MarkerStyle, collect: bool):
    """Shared scanner for validate/parse. Returns (report, text, groundings, loose)."""
    style = MarkerStyle(style)
    fails: list[Failure] = []
    warns: list[Failure] = []
    text: list[int] = []
    groundings: list[Grounding] = []
    loose: list[QuantBox] = []

    state = _FREE
    group_start = 0  # text index where the open group's words begin
    group_bad = False
    bins: list[int] = []  # box run in progress (inside a group or loose)
    run_start = 0

    def fail(pos, kind):
        fails.append(Failure(pos, kind))

    def end_loose_run(pos):
        # loose run of box tokens outside any group
        if not bins:
            return
        if style == MarkerStyle.NONE:
            if len(bins) != 4:
                fail(run_start, BOX_COUNT)
            elif collect:
                loose.append(_make_box(bins, run_start, warns))
        else:
            warns.extend(Failure(run_start + j, STRAY_BOX) for j in range(len(bins)))
            if len(bins) == 4 and collect:
                loose.append(_make_box(bins, run_start, warns))
        bins.clear()

    in_group = (_OPENED, _TEXT, _BOXES)
    n = len(seq)
    pos = 0
    while pos < n:
        i = seq[pos]
        kind = _classify(i, vocab)
        if kind == "?":
            fail(pos, BAD_ID)
            pos += 1
            continue
        if state in (_FREE, _AFTER_GROUP):
            if kind == "b":
                if state == _AFTER_GROUP and not bins:
                    if style == MarkerStyle.BOTH:
                        fail(pos, MARKER_MISUSE)
                    else:
                        fail(pos, BOX_COUNT)
                if not bins:
                    run_start = pos
                bins.append(vocab.bin_of(i))
                pos += 1
                continue
            end_loose_run(pos)
            state = _FREE
            if kind == "e":
                break
            if kind == "t":
                text.append(i)
            elif kind == "o":
                if style == MarkerStyle.NONE:
                    fail(pos, MARKER_MISUSE)
                else:
                    state, group_start, group_bad = _OPENED, len(text), False
            elif kind == "c":
                fail(pos, MARKER_MISUSE)
            pos += 1
            continue

        # inside a group
        if kind == "e":
            fail(pos, MARKER_MISUSE)
            bins.clear()
            state = _FREE
            break
        if kind == "o":
            fail(pos, MARKER_MISUSE)
            bins.clear()
            state, group_start, group_bad = _OPENED, len(text), False
        elif kind == "c":
            if style != MarkerStyle.BOTH:
                fail(pos, MARKER_MISUSE)
            elif state != _BOXES or len(bins) != 4:
                if not group_bad:
                    fail(pos, BOX_COUNT)
            elif not group_bad and collect:
                groundings.append(Grounding(group_start, len(text), _make_box(bins, pos, warns)))
            bins.clear()
            state = _AFTER_GROUP if style == MarkerStyle.BOTH else state
        elif kind == "t":
            if state == _BOXES and not group_bad:
                fail(pos, BOX_COUNT)
                group_bad = True
            bins.clear()
            text.append(i)
            state = _TEXT
        else:  # box
            if state == _OPENED:
                fail(pos, MARKER_MISUSE)
                group_bad = True
            bins.append(vocab.bin_of(i))
            state = _BOXES
            if style == MarkerStyle.OPEN_ONLY and len(bins) == 4:
                if not group_bad and collect:
                    groundings.append(Grounding(group_start, len(text), _make_box(bins, pos, warns)))
                bins.clear()
                state = _AFTER_GROUP
        pos += 1
    else:
        # ran off the end without EOS
        if state in in_group:
            fail(n, MARKER_MISUSE)
            bins.clear()
        else:
            end_loose_run(n)
    if state in (_FREE, _AFTER_GROUP):
        end_loose_run(pos)

    return ValidityReport(fails, warns), text, groundings, loose


def validate(seq: Sequence[int], vocab: UnifiedVocab, style: MarkerStyle = MarkerStyle.BOTH) -> ValidityReport:
    return _scan(seq, vocab, style, collect=False)[0]


def parse(seq: Sequence[int], vocab: UnifiedVocab, style: MarkerStyle = MarkerStyle.BOTH) -> ParsedOutput:
    """Split a valid sequence into text, word-box groundings and ungrouped boxes.

    Raises :class:`InvalidSequenceError` (carrying the report) if the
    sequence violates the grammar.
    """
    report, text, groundings, loose = _scan(seq, vocab, style, collect=True)
    if not report.valid:
        raise InvalidSequenceError(report)
    return ParsedOutput(text, groundings, loose, report)


# per-task extraction


@dataclass
class BoxedSpan:
    start: int
    end: int
    words: list[int]
    box: BBox


@dataclass
class PhraseGroundingResult:
    aligned: list[BoxedSpan]
    unaligned: list[BoxedSpan]


@dataclass
class GroundedCaption:
    text: list[int]
    groundings: list[BoxedSpan]


def _boxed_spans(p: ParsedOutput, vocab: UnifiedVocab) -> list[BoxedSpan]:
    return [
        BoxedSpan(g.start, g.end, p.text[g.start : g.end], dequantize_box(g.box, vocab.n_bins))
        for g in p.groundings
    ]


def extract_for_task(p: ParsedOutput, task: str, vocab: UnifiedVocab, query: Optional[Sequence[int]] = None):
    """Task-shaped prediction from a parsed output.

    refexp -> BBox of the first box in the sequence (NoBoxError if none);
    phrase_grounding -> PhraseGroundingResult, matching each group against
    ``query`` by exact word identity at the same positions;
    grounded_captioning / pretrain -> GroundedCaption; captioning / vqa -> text ids.
    """
    if task == "refexp":
        if p.groundings:
            return dequantize_box(p.groundings[0].box, vocab.n_bins)
        if p.loose_boxes:
            return dequantize_box(p.loose_boxes[0], vocab.n_bins)
        raise NoBoxError("refexp output contains no box")
    if task == "phrase_grounding":
        if query is None:
            raise ValueError("phrase grounding extraction needs the input query")
        query = list(query)
        aligned, unaligned = [], []
        for s in _boxed_spans(p, vocab):
            (aligned if query[s.start : s.end] == s.words else unaligned).append(s)
        return PhraseGroundingResult(aligned, unaligned)
    if task in ("grounded_captioning", "pretrain"):
        return GroundedCaption(list(p.text), _boxed_spans(p, vocab))
    if task in ("captioning", "vqa"):
        return list(p.text)
    raise ValueError(f"unknown task {task!r}")
