"""Unified token id space and the box <-> bin codec.

Id layout for a vocabulary with ``n_text`` text ids and ``n_bins`` box bins::

    [0, n_text)                  text tokens (PAD, BOS, EOS, UNK first)
    [n_text, n_text + n_bins)    box tokens <0> ... <n_bins - 1>
    n_text + n_bins              <obj>
    n_text + n_bins + 1          <\\obj>
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence, Union

PAD, BOS, EOS, UNK = 0, 1, 2, 3
CONTROL_WORDS = ("<pad>", "<bos>", "<eos>", "<unk>")
DEFAULT_N_BINS = 200
# x_min, y_min, x_max, y_max
COORD_ORDER = ("x_min", "y_min", "x_max", "y_max")
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class BBox:
    """Box in normalized image coordinates (x as fraction of width, y of height)."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        vals = self.as_tuple()
        if any(math.isnan(v) for v in vals):
            raise ValueError(f"NaN coordinate in {vals}")
        if not (0.0 <= self.x_min <= self.x_max <= 1.0 and 0.0 <= self.y_min <= self.y_max <= 1.0):
            raise ValueError(f"invalid normalized box {vals}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return tuple(getattr(self, k) for k in COORD_ORDER)

    @classmethod
    def from_pixels(cls, x_min, y_min, x_max, y_max, width, height) -> "BBox":
        return cls(
            _clamp01(x_min / width),
            _clamp01(y_min / height),
            _clamp01(x_max / width),
            _clamp01(y_max / height),
        )

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


@dataclass(frozen=True)
class QuantBox:
    bx_min: int
    by_min: int
    bx_max: int
    by_max: int

    def __post_init__(self):
        if self.bx_min > self.bx_max or self.by_min > self.by_max:
            raise ValueError(f"unordered quantized box {self.as_tuple()}")
        if min(self.as_tuple()) < 0:
            raise ValueError(f"negative bin in {self.as_tuple()}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.bx_min, self.by_min, self.bx_max, self.by_max)

    def check_range(self, n_bins: int) -> None:
        if max(self.as_tuple()) >= n_bins:
            raise ValueError(f"bin out of range for n_bins={n_bins}: {self.as_tuple()}")


# Tagged token values. Sequences are stored as plain int ids; these exist for
# inspection and for the id <-> token round trip.
@dataclass(frozen=True)
class Text:
    id: int


@dataclass(frozen=True)
class BoxBin:
    index: int


@dataclass(frozen=True)
class ObjOpen:
    pass


@dataclass(frozen=True)
class ObjClose:
    pass


Token = Union[Text, BoxBin, ObjOpen, ObjClose]


def _clamp01(x: float) -> float:
    return min(max(x, 0.0), 1.0)


def quantize_coord(x: float, n_bins: int = DEFAULT_N_BINS) -> int:
    """Map a normalized coordinate to its bin; values outside [0, 1] are clamped."""
    if n_bins < 1:
        raise ValueError(f"n_bins must be positive, got {n_bins}")
    if math.isnan(x):
        raise ValueError("cannot quantize NaN")
    x = _clamp01(x)
    scaled = x * n_bins
    b = int(math.floor(scaled))
    if abs(scaled - round(scaled)) < 1e-9:
        # float product may have rounded across a bin boundary
        b = math.floor(Fraction(x) * n_bins)
    return min(b, n_bins - 1)


def dequantize_coord(b: int, n_bins: int = DEFAULT_N_BINS) -> float:
    """Bin center of bin ``b``."""
    if not 0 <= b < n_bins:
        raise ValueError(f"bin {b} outside [0, {n_bins})")
    return (b + 0.5) / n_bins


def quantize_box(box: BBox, n_bins: int = DEFAULT_N_BINS) -> QuantBox:
    return QuantBox(*(quantize_coord(v, n_bins) for v in box.as_tuple()))


def dequantize_box(q: QuantBox, n_bins: int = DEFAULT_N_BINS) -> BBox:
    q.check_range(n_bins)
    return BBox(*(dequantize_coord(b, n_bins) for b in q.as_tuple()))


@dataclass(frozen=True)
class UnifiedVocab:
    """Text words, box bins and the two object markers in one id space.

    ``words`` holds the display string for every text id; its length is
    ``n_text``. The first four words are the control tokens.
    """

    words: tuple[str, ...]
    n_bins: int = DEFAULT_N_BINS
    _index: dict = field(default=None, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        if len(self.words) < len(CONTROL_WORDS):
            raise ValueError(f"n_text must be >= {len(CONTROL_WORDS)}, got {len(self.words)}")
        if self.n_bins < 1:
            raise ValueError(f"n_bins must be positive, got {self.n_bins}")
        if tuple(self.words[: len(CONTROL_WORDS)]) != CONTROL_WORDS:
            raise ValueError(f"first text ids must be {CONTROL_WORDS}")
        index = {}
        for i, w in enumerate(self.words):
            if w in index:
                raise ValueError(f"duplicate word {w!r}")
            index[w] = i
        object.__setattr__(self, "_index", index)

    @property
    def n_text(self) -> int:
        return len(self.words)

    @property
    def size(self) -> int:
        return self.n_text + self.n_bins + 2

    @property
    def box_offset(self) -> int:
        return self.n_text

    @property
    def obj_open(self) -> int:
        return self.n_text + self.n_bins

    @property
    def obj_close(self) -> int:
        return self.n_text + self.n_bins + 1

    # id classification
    def is_text(self, i: int) -> bool:
        return 0 <= i < self.n_text

    def is_box(self, i: int) -> bool:
        return self.n_text <= i < self.n_text + self.n_bins

    def box_id(self, b: int) -> int:
        if not 0 <= b < self.n_bins:
            raise ValueError(f"bin {b} outside [0, {self.n_bins})")
        return self.n_text + b

    def bin_of(self, i: int) -> int:
        if not self.is_box(i):
            raise ValueError(f"id {i} is not a box token")
        return i - self.n_text

    def to_token(self, i: int) -> Token:
        if self.is_text(i):
            return Text(i)
        if self.is_box(i):
            return BoxBin(i - self.n_text)
        if i == self.obj_open:
            return ObjOpen()
        if i == self.obj_close:
            return ObjClose()
        raise ValueError(f"id {i} outside vocabulary of size {self.size}")

    def to_id(self, tok: Token) -> int:
        if isinstance(tok, Text):
            if not self.is_text(tok.id):
                raise ValueError(f"text id {tok.id} out of range")
            return tok.id
        if isinstance(tok, BoxBin):
            return self.box_id(tok.index)
        if isinstance(tok, ObjOpen):
            return self.obj_open
        if isinstance(tok, ObjClose):
            return self.obj_close
        raise TypeError(f"not a token: {tok!r}")

    # words
    def word_id(self, word: str) -> int:
        return self._index.get(word, UNK)

    def encode_words(self, words: Iterable[str]) -> list[int]:
        return [self.word_id(w) for w in words]

    def box_ids(self, q: QuantBox) -> list[int]:
        return [self.box_id(b) for b in q.as_tuple()]

    def render(self, ids: Sequence[int]) -> str:
        """Human-readable form, e.g. ``<obj> a donut <90> <83> <184> <180> <\\obj>``."""
        out = []
        for i in ids:
            if self.is_text(i):
                out.append(self.words[i])
            elif self.is_box(i):
                out.append(f"<{i - self.n_text}>")
            elif i == self.obj_open:
                out.append("<obj>")
            elif i == self.obj_close:
                out.append("<\\obj>")
            else:
                out.append(f"<?{i}>")
        return " ".join(out)

    def tokenize_rendered(self, text: str) -> list[int]:
        """Inverse of :meth:`render` for well-formed strings."""
        ids = []
        for piece in text.split():
            if piece == "<obj>":
                ids.append(self.obj_open)
            elif piece == "<\\obj>":
                ids.append(self.obj_close)
            elif piece in self._index:
                ids.append(self._index[piece])
            elif piece.startswith("<") and piece.endswith(">") and piece[1:-1].isdigit():
                ids.append(self.box_id(int(piece[1:-1])))
            else:
                ids.append(UNK)
        return ids

    # manifest
    def manifest(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "n_text": self.n_text,
            "n_bins": self.n_bins,
            "control_ids": {"pad": PAD, "bos": BOS, "eos": EOS, "unk": UNK},
            "obj_open": self.obj_open,
            "obj_close": self.obj_close,
            "coord_order": list(COORD_ORDER),
            "words": list(self.words),
        }

    @classmethod
    def from_manifest(cls, m: dict) -> "UnifiedVocab":
        if m.get("version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported vocab manifest version {m.get('version')!r}")
        vocab = cls(tuple(m["words"]), int(m["n_bins"]))
        if vocab.n_text != m["n_text"] or vocab.obj_open != m["obj_open"] or vocab.obj_close != m["obj_close"]:
            raise ValueError("vocab manifest is internally inconsistent")
        if list(m.get("coord_order", COORD_ORDER)) != list(COORD_ORDER):
            raise ValueError(f"unsupported coordinate order {m['coord_order']}")
        return vocab

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.manifest(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "UnifiedVocab":
        return cls.from_manifest(json.loads(Path(path).read_text(encoding="utf-8")))


def build_vocab(n_text: int, n_bins: int = DEFAULT_N_BINS) -> UnifiedVocab:
    """Vocabulary with placeholder words ``w4, w5, ...`` after the control tokens."""
    if n_text < len(CONTROL_WORDS):
        raise ValueError(f"n_text must be >= {len(CONTROL_WORDS)}, got {n_text}")
    words = CONTROL_WORDS + tuple(f"w{i}" for i in range(len(CONTROL_WORDS), n_text))
    return UnifiedVocab(words, n_bins)


def vocab_from_words(words: Sequence[str], n_bins: int = DEFAULT_N_BINS) -> UnifiedVocab:
    """Vocabulary over ``words`` (control tokens are prepended, duplicates dropped)."""
    seen = list(CONTROL_WORDS)
    for w in words:
        if w not in seen:
            seen.append(w)
    return UnifiedVocab(tuple(seen), n_bins)
