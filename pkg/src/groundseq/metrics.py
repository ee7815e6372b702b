"""Evaluation metrics: IoU, Acc@0.5, grounding F1 (all / loc), BLEU@4, VQA soft accuracy."""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Optional, Sequence

from groundseq.vocab import BBox

IOU_THRESHOLD = 0.5


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def acc_at_05(preds: Sequence[Optional[BBox]], gts: Sequence[BBox]) -> float:
    """Fraction of queries whose predicted box has IoU > 0.5 with the GT box.

    A ``None`` prediction (no box in the output) counts as a miss.
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} queries")
    if not gts:
        raise ValueError("no queries")
    hits = sum(1 for p, g in zip(preds, gts) if p is not None and iou(p, g) > IOU_THRESHOLD)
    return hits / len(gts)


@dataclass
class ClassCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


@dataclass
class F1Report:
    precision: float
    recall: float
    f1: float
    per_class: dict[str, ClassCounts] = field(default_factory=dict)


# One image: predicted (word, box) instances and GT (word, [boxes]) instances.
PredInstances = Sequence[tuple[str, BBox]]
GTInstances = Sequence[tuple[str, Sequence[BBox]]]


def _match_image(preds: PredInstances, gts: GTInstances, mode: str, counts: dict[str, ClassCounts]) -> None:
    pred_by = defaultdict(list)
    for w, b in preds:
        pred_by[w].append(b)
    gt_by = defaultdict(list)
    for w, bs in gts:
        gt_by[w].append(list(bs))
    words = set(pred_by) | set(gt_by)
    if mode == "loc":
        # only words that were predicted correctly in this image
        words = set(pred_by) & set(gt_by)
    for w in words:
        ps, gs = pred_by.get(w, []), gt_by.get(w, [])
        # greedy one-to-one matching by descending IoU
        cand = []
        for i, pb in enumerate(ps):
            for j, gbs in enumerate(gs):
                v = max(iou(pb, gb) for gb in gbs)
                if v > IOU_THRESHOLD:
                    cand.append((-v, i, j))
        cand.sort()
        used_p, used_g = set(), set()
        for _, i, j in cand:
            if i not in used_p and j not in used_g:
                used_p.add(i)
                used_g.add(j)
        c = counts.setdefault(w, ClassCounts())
        c.tp += len(used_p)
        c.fp += len(ps) - len(used_p)
        c.fn += len(gs) - len(used_g)


def grounding_f1(
    preds: Sequence[PredInstances],
    gts: Sequence[GTInstances],
    mode: str = "all",
    average: str = "macro",
    classes: Optional[Sequence[str]] = None,
) -> F1Report:
    """Grounding F1 over object-word classes.

    ``mode="all"``: a predicted instance is correct iff its word is among the
    image's GT object words and its box overlaps a still-unmatched GT box of
    that word with IoU > 0.5. ``mode="loc"``: the same, restricted to words
    that appear in both prediction and GT of an image.

    ``average="macro"`` averages per-class precision and recall over classes
    (those in ``classes``, or every class seen); ``"micro"`` pools counts.
    F1 is 2PR/(P+R) of the averaged values.
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predicted images for {len(gts)} GT images")
    if mode not in ("all", "loc"):
        raise ValueError(f"unknown F1 mode {mode!r}")
    if classes is not None and not classes:
        raise ValueError("empty class list")
    counts: dict[str, ClassCounts] = {}
    for p, g in zip(preds, gts):
        _match_image(p, g, mode, counts)
    if classes is not None:
        unknown = set(counts) - set(classes)
        if unknown:
            raise ValueError(f"object words outside the class list: {sorted(unknown)}")
        counts = {c: counts[c] for c in classes if c in counts}
    if not counts:
        return F1Report(0.0, 0.0, 0.0, {})
    if average == "micro":
        tot = ClassCounts(
            sum(c.tp for c in counts.values()),
            sum(c.fp for c in counts.values()),
            sum(c.fn for c in counts.values()),
        )
        p, r = tot.precision, tot.recall
    elif average == "macro":
        p = sum(c.precision for c in counts.values()) / len(counts)
        r = sum(c.recall for c in counts.values()) / len(counts)
    else:
        raise ValueError(f"unknown averaging {average!r}")
    return F1Report(p, r, _f1(p, r), counts)


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidates: Sequence[Sequence], references: Sequence[Sequence]) -> float:
    """Corpus BLEU with uniform 1-4 gram weights and no smoothing.

    ``references[i]`` is either one token list or a list of token lists.
    """
    if not candidates:
        raise ValueError("empty corpus")
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates for {len(references)} references")
    matched = [0] * 4
    total = [0] * 4
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, references):
        cand = list(cand)
        if refs and not isinstance(refs[0], (list, tuple)):
            refs = [refs]
        refs = [list(r) for r in refs]
        cand_len += len(cand)
        # closest reference length, ties to the shorter
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, 5):
            cc = _ngrams(cand, n)
            max_ref = Counter()
            for r in refs:
                max_ref |= _ngrams(r, n)
            matched[n - 1] += sum(min(c, max_ref[g]) for g, c in cc.items())
            total[n - 1] += sum(cc.values())
    if min(matched) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / 4
    bp = 1.0 if cand_len > ref_len else math.exp(1 - ref_len / cand_len)
    return bp * math.exp(log_p)


def _norm_answer(s) -> str:
    if not isinstance(s, str):
        s = " ".join(s)
    return " ".join(s.lower().split())


def vqa_soft_accuracy(pred, answers: Sequence) -> float:
    """min(#humans agreeing / 3, 1) against exactly ten reference answers."""
    if len(answers) != 10:
        raise ValueError(f"expected 10 reference answers, got {len(answers)}")
    p = _norm_answer(pred)
    hits = sum(1 for a in answers if _norm_answer(a) == p)
    return min(hits / 3, 1.0)
