"""Autoregressive decoding over the unified vocabulary.

Models are duck-typed: anything with ``start_batch(images, input_texts)``
returning a context and ``next_logits_batch(ctx, prefixes, rows)`` returning
a ``(len(rows), vocab)`` array of next-token logits can be decoded.
``prefixes`` is a list of id lists, each starting with BOS, and ``rows``
the batch indices they belong to.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Optional, Sequence

import numpy as np

from groundseq.builder import MAX_SEQ_LEN, MarkerStyle
from groundseq.vocab import BOS, EOS, UnifiedVocab

ARGMAX = "argmax"
NUCLEUS = "nucleus"


@dataclass
class SamplerConfig:
    method: str = ARGMAX
    top_p: float = 0.9
    constrained: bool = False
    max_steps: int = MAX_SEQ_LEN
    seed: int = 0

    def __post_init__(self):
        if self.method not in (ARGMAX, NUCLEUS):
            raise ValueError(f"unknown sampler {self.method!r}")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")


def _check_logits(logits, vocab_size: Optional[int]) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-d logit vector, got shape {x.shape}")
    if vocab_size is not None and x.shape[0] != vocab_size:
        raise ValueError(f"logit length {x.shape[0]} != vocab size {vocab_size}")
    if np.isnan(x).any() or np.isposinf(x).any():
        raise ValueError("logits contain NaN or +inf")
    if np.isneginf(x).all():
        raise ValueError("every token is masked")
    return x


def step_argmax(logits, vocab_size: Optional[int] = None) -> int:
    """Index of the largest logit; ties go to the lowest id."""
    return int(np.argmax(_check_logits(logits, vocab_size)))


def nucleus_set(logits, p: float, vocab_size: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    """Ids and renormalized probabilities of the top-p nucleus.

    Tokens are ranked by probability (ties by lowest id); the kept set is the
    shortest prefix whose mass reaches ``p``.
    """
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must be in (0, 1], got {p}")
    x = _check_logits(logits, vocab_size)
    probs = np.exp(x - x.max())
    probs /= probs.sum()
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    k = int(np.searchsorted(cum, p, side="left")) + 1
    k = min(k, len(order))
    kept = order[:k]
    kept_p = probs[kept] / probs[kept].sum()
    return kept, kept_p


def step_nucleus(logits, p: float, rng: np.random.Generator, vocab_size: Optional[int] = None) -> int:
    kept, kept_p = nucleus_set(logits, p, vocab_size)
    if len(kept) == 1:
        return int(kept[0])
    u = rng.random()
    j = int(np.searchsorted(np.cumsum(kept_p), u, side="right"))
    return int(kept[min(j, len(kept) - 1)])


# grammar tracking for constrained decoding

FREE = "free"
AFTER_RUN = "after_run"  # just closed a box run without a closing marker
OPENED = "opened"  # <obj> emitted, no words yet
IN_GROUP_TEXT = "in_group_text"
IN_GROUP_BOXES = "in_group_boxes"


@dataclass
class DecodeState:
    """Position in the output grammar after the tokens emitted so far."""

    mode: str = FREE
    boxes: int = 0  # box tokens in the current run
    emitted: int = 0

    def advance(self, tok: int, vocab: UnifiedVocab, style: MarkerStyle = MarkerStyle.BOTH) -> None:
        self.mode, self.boxes = _next_mode(self.mode, self.boxes, _kind(tok, vocab), style)
        self.emitted += 1


def _kind(tok: int, vocab: UnifiedVocab) -> str:
    if tok == EOS:
        return "e"
    if vocab.is_text(tok):
        return "t"
    if vocab.is_box(tok):
        return "b"
    if tok == vocab.obj_open:
        return "o"
    if tok == vocab.obj_close:
        return "c"
    raise ValueError(f"id {tok} outside vocabulary")


def _allowed_kinds(mode: str, boxes: int, style: MarkerStyle) -> set[str]:
    if style == MarkerStyle.NONE:
        if mode == IN_GROUP_BOXES:
            return {"b"}
        if mode == AFTER_RUN:
            return {"t", "e"}
        return {"t", "e", "b"}
    if mode in (FREE, AFTER_RUN):
        return {"t", "e", "o"}
    if mode == OPENED:
        return {"t"}
    if mode == IN_GROUP_TEXT:
        return {"t", "b"}
    if boxes < 4:
        return {"b"}
    return {"c"}


def _next_mode(mode: str, boxes: int, kind: str, style: MarkerStyle) -> tuple[str, int]:
    if kind == "e":
        return FREE, 0
    if style == MarkerStyle.NONE:
        if kind == "b":
            boxes += 1
            return (AFTER_RUN, 0) if boxes == 4 else (IN_GROUP_BOXES, boxes)
        return FREE, 0
    if kind == "o":
        return OPENED, 0
    if kind == "c":
        return FREE, 0
    if kind == "t":
        return (IN_GROUP_TEXT, 0) if mode in (OPENED, IN_GROUP_TEXT, IN_GROUP_BOXES) else (FREE, 0)
    # box
    if mode in (FREE, AFTER_RUN):
        return FREE, 0  # stray box, only reachable unconstrained
    boxes += 1
    if style == MarkerStyle.OPEN_ONLY and boxes == 4:
        return AFTER_RUN, 0
    return IN_GROUP_BOXES, boxes


def _cost_to_finish(mode: str, boxes: int, style: MarkerStyle) -> int:
    """Fewest tokens needed to leave the grammar in a state that may end."""
    close = 1 if style == MarkerStyle.BOTH else 0
    if mode in (FREE, AFTER_RUN):
        return 0
    if mode == OPENED:
        return 1 + 4 + close
    if mode == IN_GROUP_TEXT:
        return 4 + close
    return (4 - boxes) + close


def grammar_mask(
    state: DecodeState,
    vocab: UnifiedVocab,
    style: MarkerStyle = MarkerStyle.BOTH,
    remaining: Optional[int] = None,
) -> np.ndarray:
    """Boolean mask over the vocabulary; True marks a permitted next token.

    With ``remaining`` (steps left including this one) the mask also removes
    tokens that would leave a group unfinishable before the length cap.
    """
    style = MarkerStyle(style)
    kinds = _allowed_kinds(state.mode, state.boxes, style)
    if remaining is not None:
        kinds = {
            k for k in kinds
            if _cost_to_finish(*_next_mode(state.mode, state.boxes, k, style), style) <= remaining - 1
        }
    mask = np.zeros(vocab.size, dtype=bool)
    if "t" in kinds:
        mask[: vocab.n_text] = True
        mask[EOS] = "e" in kinds
    elif "e" in kinds:
        mask[EOS] = True
    if "b" in kinds:
        mask[vocab.n_text : vocab.n_text + vocab.n_bins] = True
    if "o" in kinds:
        mask[vocab.obj_open] = True
    if "c" in kinds:
        mask[vocab.obj_close] = True
    return mask


def decode_batch(
    model: Any,
    images: Sequence[Any],
    input_texts: Sequence[Sequence[int]],
    cfg: SamplerConfig,
    vocab: UnifiedVocab,
    style: MarkerStyle = MarkerStyle.BOTH,
    rng: Optional[np.random.Generator] = None,
) -> list[list[int]]:
    """Decode one sequence per (image, input_text) pair.

    Each result holds the emitted ids; it ends with EOS unless the
    ``max_steps`` cap was hit first.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    n = len(images)
    ctx = model.start_batch(images, input_texts)
    outs: list[list[int]] = [[] for _ in range(n)]
    states = [DecodeState() for _ in range(n)]
    live = list(range(n))
    for step in range(cfg.max_steps):
        if not live:
            break
        prefixes = [[BOS] + outs[i] for i in live]
        logits = np.asarray(model.next_logits_batch(ctx, prefixes, live), dtype=np.float64)
        if logits.shape != (len(live), vocab.size):
            raise ValueError(f"model returned logits of shape {logits.shape}")
        still = []
        for row, i in zip(logits, live):
            if cfg.constrained:
                mask = grammar_mask(states[i], vocab, style, remaining=cfg.max_steps - step)
                row = np.where(mask, row, -np.inf)
            if cfg.method == ARGMAX:
                tok = step_argmax(row)
            else:
                tok = step_nucleus(row, cfg.top_p, rng)
            outs[i].append(tok)
            states[i].advance(tok, vocab, style)
            if tok != EOS:
                still.append(i)
        live = still
    return outs


def decode(model, image, input_text, cfg: SamplerConfig, vocab: UnifiedVocab, style=MarkerStyle.BOTH, rng=None) -> list[int]:
    return decode_batch(model, [image], [input_text], cfg, vocab, style, rng)[0]
