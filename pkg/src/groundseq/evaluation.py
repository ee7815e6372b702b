"""Decode held-out annotations and score them per task."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from groundseq.builder import MarkerStyle, apply_task_prefix, build_task_sample
from groundseq.decoding import SamplerConfig, decode_batch
from groundseq.grammar import InvalidSequenceError, NoBoxError, extract_for_task, parse, validate
from groundseq.metrics import acc_at_05, bleu4, grounding_f1, vqa_soft_accuracy
from groundseq.training import Example
from groundseq.vocab import EOS, UnifiedVocab, dequantize_box

REPORT_COLUMNS = (
    "refexp_acc50",
    "phrase_f1_all",
    "phrase_f1_loc",
    "gcap_bleu4",
    "gcap_f1_all",
    "gcap_f1_loc",
    "gcap_exact",
    "cap_bleu4",
    "vqa_acc",
    "syntax_fail_rate",
)


def strip_eos(ids: Sequence[int]) -> list[int]:
    ids = list(ids)
    return ids[: ids.index(EOS)] if EOS in ids else ids


def object_word(words: Sequence[int]) -> int:
    """The object word of a grounded phrase: its last word."""
    return words[-1]


def gt_instances(ann, vocab: UnifiedVocab):
    return [
        (vocab.words[object_word(ann.words[e.start : e.end])], [dequantize_box(e.box, vocab.n_bins)])
        for e in ann.entities
    ]


def _pred_instances(spans, vocab: UnifiedVocab):
    return [(vocab.words[object_word(s.words)], s.box) for s in spans]


@dataclass
class TaskOutputs:
    task: str
    examples: list
    sequences: list
    parsed: list  # ParsedOutput or None when invalid


@dataclass
class EvalReport:
    scores: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    n_sequences: int = 0

    def row(self) -> list[str]:
        return [f"{self.scores[c]:.4f}" if c in self.scores else "-" for c in REPORT_COLUMNS]


def run_decoding(
    model,
    examples: Sequence[Example],
    vocab: UnifiedVocab,
    sampler: SamplerConfig,
    style: MarkerStyle = MarkerStyle.BOTH,
    task_prefix: bool = False,
    batch_size: int = 128,
) -> dict[str, TaskOutputs]:
    rng = np.random.default_rng(sampler.seed)
    by_task: dict[str, list[Example]] = {}
    for ex in examples:
        by_task.setdefault(ex.task, []).append(ex)
    out = {}
    for task, exs in by_task.items():
        seqs = []
        for i in range(0, len(exs), batch_size):
            chunk = exs[i : i + batch_size]
            inputs = []
            for ex in chunk:
                s = build_task_sample(task, ex.annotation, vocab, style, rng=rng)
                inputs.append(apply_task_prefix(s, task_prefix, vocab).input_text)
            seqs += decode_batch(model, [ex.features for ex in chunk], inputs, sampler, vocab, style, rng)
        parsed = []
        for s in seqs:
            try:
                parsed.append(parse(s, vocab, style))
            except InvalidSequenceError:
                parsed.append(None)
        out[task] = TaskOutputs(task, exs, seqs, parsed)
    return out


def score_outputs(outputs: dict[str, TaskOutputs], vocab: UnifiedVocab, style: MarkerStyle = MarkerStyle.BOTH) -> EvalReport:
    rep = EvalReport()
    n_invalid = 0
    for to in outputs.values():
        for s in to.sequences:
            r = validate(s, vocab, style)
            rep.n_sequences += 1
            if not r.valid:
                n_invalid += 1
                for k, v in r.counts().items():
                    rep.failures[k] = rep.failures.get(k, 0) + v
    if rep.n_sequences:
        rep.scores["syntax_fail_rate"] = n_invalid / rep.n_sequences

    if "refexp" in outputs:
        to = outputs["refexp"]
        preds, gts = [], []
        for ex, p in zip(to.examples, to.parsed):
            box = None
            if p is not None:
                try:
                    box = extract_for_task(p, "refexp", vocab)
                except NoBoxError:
                    pass
            preds.append(box)
            gts.append(dequantize_box(ex.annotation.entities[0].box, vocab.n_bins))
        rep.scores["refexp_acc50"] = acc_at_05(preds, gts)

    if "phrase_grounding" in outputs:
        to = outputs["phrase_grounding"]
        preds, gts = [], []
        for ex, p in zip(to.examples, to.parsed):
            spans = extract_for_task(p, "phrase_grounding", vocab, query=ex.annotation.words).aligned if p else []
            preds.append(_pred_instances(spans, vocab))
            gts.append(gt_instances(ex.annotation, vocab))
        rep.scores["phrase_f1_all"] = grounding_f1(preds, gts, "all").f1
        rep.scores["phrase_f1_loc"] = grounding_f1(preds, gts, "loc").f1

    if "grounded_captioning" in outputs:
        to = outputs["grounded_captioning"]
        preds, gts, cands, refs, exact = [], [], [], [], 0
        for ex, p, s in zip(to.examples, to.parsed, to.sequences):
            gc = extract_for_task(p, "grounded_captioning", vocab) if p else None
            text = gc.text if gc else [i for i in strip_eos(s) if vocab.is_text(i)]
            preds.append(_pred_instances(gc.groundings, vocab) if gc else [])
            gts.append(gt_instances(ex.annotation, vocab))
            cands.append(text)
            refs.append(list(ex.annotation.words))
            exact += text == list(ex.annotation.words)
        rep.scores["gcap_bleu4"] = bleu4(cands, refs)
        rep.scores["gcap_f1_all"] = grounding_f1(preds, gts, "all").f1
        rep.scores["gcap_f1_loc"] = grounding_f1(preds, gts, "loc").f1
        rep.scores["gcap_exact"] = exact / len(to.examples)

    if "captioning" in outputs:
        to = outputs["captioning"]
        cands = [[i for i in strip_eos(s) if vocab.is_text(i)] for s in to.sequences]
        rep.scores["cap_bleu4"] = bleu4(cands, [list(ex.annotation.words) for ex in to.examples])

    if "vqa" in outputs:
        to = outputs["vqa"]
        accs = []
        for ex, p in zip(to.examples, to.parsed):
            pred = " ".join(vocab.words[i] for i in p.text) if p else ""
            answer = " ".join(vocab.words[i] for i in ex.annotation.answer)
            accs.append(vqa_soft_accuracy(pred, [answer] * 10))
        rep.scores["vqa_acc"] = float(np.mean(accs))
    return rep


def evaluate(model, examples, vocab, sampler: Optional[SamplerConfig] = None, style=MarkerStyle.BOTH, task_prefix=False):
    outputs = run_decoding(model, examples, vocab, sampler or SamplerConfig(), style, task_prefix)
    return score_outputs(outputs, vocab, style), outputs


def format_table(rows: dict[str, EvalReport]) -> str:
    names = list(rows)
    w = max([5] + [len(n) for n in names])
    head = "model".ljust(w) + " " + " ".join(c.rjust(16) for c in REPORT_COLUMNS)
    lines = [head]
    for n in names:
        lines.append(n.ljust(w) + " " + " ".join(v.rjust(16) for v in rows[n].row()))
    return "\n".join(lines)
