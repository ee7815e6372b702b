import numpy as np
import pytest
from hypothesis import strategies as st

from groundseq.builder import Entity, GroundedText
from groundseq.vocab import QuantBox, build_vocab


@pytest.fixture
def vocab():
    return build_vocab(64, 200)


@pytest.fixture
def donut_vocab():
    from groundseq.vocab import vocab_from_words

    return vocab_from_words(["a", "donut", "on", "the", "table"], 200)


def random_grounded(rng: np.random.Generator, vocab, max_words=12, max_entities=4) -> GroundedText:
    n = int(rng.integers(0, max_words + 1))
    words = [int(w) for w in rng.integers(4, vocab.n_text, size=n)]
    entities = []
    pos = 0
    for _ in range(int(rng.integers(0, max_entities + 1))):
        if pos >= n:
            break
        start = int(rng.integers(pos, n))
        end = int(rng.integers(start + 1, n + 1))
        xs = sorted(int(b) for b in rng.integers(0, vocab.n_bins, size=2))
        ys = sorted(int(b) for b in rng.integers(0, vocab.n_bins, size=2))
        entities.append(Entity(start, end, QuantBox(xs[0], ys[0], xs[1], ys[1])))
        pos = end
    return GroundedText(tuple(words), tuple(entities))


@st.composite
def grounded_texts(draw, n_text=64, n_bins=200, max_words=10):
    n = draw(st.integers(0, max_words))
    words = draw(st.lists(st.integers(4, n_text - 1), min_size=n, max_size=n))
    cuts = sorted(draw(st.lists(st.integers(0, n), max_size=8, unique=True)))
    entities = []
    for a, b in zip(cuts[0::2], cuts[1::2]):
        if a < b:
            x = sorted(draw(st.lists(st.integers(0, n_bins - 1), min_size=2, max_size=2)))
            y = sorted(draw(st.lists(st.integers(0, n_bins - 1), min_size=2, max_size=2)))
            entities.append(Entity(a, b, QuantBox(x[0], y[0], x[1], y[1])))
    return GroundedText(tuple(words), tuple(entities))


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, ok, detail)``; shown in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(n, ok, detail):
        lines.append((n, bool(ok), detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(lines, key=lambda t: t[0]):
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
