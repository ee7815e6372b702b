"""Independent reference implementations used only by the tests."""

import re
from fractions import Fraction

from groundseq.vocab import EOS

# One character per token class; the grammar becomes a plain regular expression.
_GRAMMARS = {
    "both": re.compile(r"(?:t|b|ot+bbbbc(?!b))*(?:e.*)?", re.S),
    "open_only": re.compile(r"(?:t|b|ot+bbbb(?!b))*(?:e.*)?", re.S),
    "none": re.compile(r"(?:t|bbbb(?!b))*(?:e.*)?", re.S),
}


def token_classes(seq, vocab) -> str:
    out = []
    for i in seq:
        if i == EOS:
            out.append("e")
        elif 0 <= i < vocab.n_text:
            out.append("t")
        elif vocab.n_text <= i < vocab.n_text + vocab.n_bins:
            out.append("b")
        elif i == vocab.n_text + vocab.n_bins:
            out.append("o")
        elif i == vocab.n_text + vocab.n_bins + 1:
            out.append("c")
        else:
            out.append("?")
    return "".join(out)


def regex_accepts(seq, vocab, style="both") -> bool:
    return _GRAMMARS[style].fullmatch(token_classes(seq, vocab)) is not None


def brute_force_bin(x: float, n_bins: int) -> int:
    """Scan the exact rational bin boundaries k/n_bins from the top."""
    x = Fraction(min(max(x, 0.0), 1.0))
    for k in range(n_bins - 1, -1, -1):
        if x >= Fraction(k, n_bins):
            return k
    return 0


def splice_template(words, entities, n_text, n_bins):
    """Build the target by inserting marker/box pieces at word indices, right to left."""
    out = [[w] for w in words]
    opens = {e[0] for e in entities}
    for start, end, box in sorted(entities, reverse=True):
        out[end - 1] = out[end - 1] + [n_text + b for b in box] + [n_text + n_bins + 1]
        out[start] = [n_text + n_bins] + out[start]
    assert len(opens) == len(entities)
    return [t for piece in out for t in piece] + [EOS]


def grid_iou(a, b, n=400) -> float:
    """IoU counted on an n x n pixel grid (pixel centers)."""
    def inside(box, x, y):
        return box[0] <= x < box[2] and box[1] <= y < box[3]

    inter = union = 0
    for i in range(n):
        x = (i + 0.5) / n
        for j in range(n):
            y = (j + 0.5) / n
            ia, ib = inside(a, x, y), inside(b, x, y)
            inter += ia and ib
            union += ia or ib
    return inter / union if union else 0.0


def bleu4_by_hand(cands, refs):
    """Exact-rational corpus BLEU-4 components: (precisions, c, r)."""
    num = [0] * 4
    den = [0] * 4
    c = r = 0
    for cand, ref in zip(cands, refs):
        c += len(cand)
        r += len(ref)
        for n in range(1, 5):
            grams = [tuple(cand[i : i + n]) for i in range(len(cand) - n + 1)]
            ref_grams = [tuple(ref[i : i + n]) for i in range(len(ref) - n + 1)]
            for g in set(grams):
                num[n - 1] += min(grams.count(g), ref_grams.count(g))
            den[n - 1] += len(grams)
    return [Fraction(a, b) for a, b in zip(num, den)], c, r
