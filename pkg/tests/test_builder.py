import numpy as np
import pytest
from hypothesis import given, settings

from groundseq.builder import (
    MAX_SEQ_LEN,
    Annotation,
    Entity,
    GroundedText,
    MarkerStyle,
    TaskSample,
    apply_task_prefix,
    box_token_count,
    build_pretrain_sample,
    build_target,
    build_task_sample,
    strip_task_prefix,
)
from groundseq.grammar import parse, validate
from groundseq.scenes import toy_vocab
from groundseq.vocab import EOS, QuantBox

from conftest import grounded_texts, random_grounded
from oracles import splice_template

DONUT = QuantBox(90, 83, 184, 180)


def test_donut_target(donut_vocab):
    v = donut_vocab
    words = v.encode_words("a donut on the table".split())
    g = GroundedText(words, [Entity(0, 2, DONUT)])
    target = build_target(g, v)
    assert v.render(target) == "<obj> a donut <90> <83> <184> <180> <\\obj> on the table <eos>"


def test_no_entities_is_plain_text(vocab):
    g = GroundedText((5, 6, 7))
    assert build_target(g, vocab) == [5, 6, 7, EOS]


def test_two_entities_match_template_oracle(vocab):
    rng = np.random.default_rng(3)
    for _ in range(300):
        g = random_grounded(rng, vocab)
        ents = [(e.start, e.end, e.box.as_tuple()) for e in g.entities]
        assert build_target(g, vocab) == splice_template(g.words, ents, vocab.n_text, vocab.n_bins)


def test_marker_ablations(donut_vocab):
    v = donut_vocab
    g = GroundedText(v.encode_words(["a", "donut"]), [Entity(0, 2, DONUT)])
    assert v.render(build_target(g, v, MarkerStyle.OPEN_ONLY)) == "<obj> a donut <90> <83> <184> <180> <eos>"
    assert v.render(build_target(g, v, MarkerStyle.NONE)) == "a donut <90> <83> <184> <180> <eos>"


def test_overlapping_spans_rejected():
    with pytest.raises(ValueError):
        GroundedText((5, 6, 7), [Entity(0, 2, DONUT), Entity(1, 3, DONUT)])
    with pytest.raises(ValueError):
        GroundedText((5, 6, 7), [Entity(2, 3, DONUT), Entity(0, 1, DONUT)])
    with pytest.raises(ValueError):
        GroundedText((5,), [Entity(0, 0, DONUT)])


def test_overlong_target_rejected(vocab):
    with pytest.raises(ValueError):
        build_target(GroundedText(tuple([5] * MAX_SEQ_LEN)), vocab)
    assert len(build_target(GroundedText(tuple([5] * (MAX_SEQ_LEN - 1))), vocab)) == MAX_SEQ_LEN


@settings(max_examples=300, deadline=None)
@given(grounded_texts())
def test_build_parse_round_trip(g):
    from groundseq.vocab import build_vocab

    v = build_vocab(64, 200)
    seq = build_target(g, v)
    assert validate(seq, v).valid
    p = parse(seq, v)
    assert tuple(p.text) == g.words
    assert [(x.start, x.end, x.box) for x in p.groundings] == [(e.start, e.end, e.box) for e in g.entities]
    assert box_token_count(seq, v) == 4 * len(g.entities)


@settings(max_examples=200, deadline=None)
@given(grounded_texts())
def test_marker_depth_at_most_one(g):
    from groundseq.vocab import build_vocab

    v = build_vocab(64, 200)
    depth = 0
    for t in build_target(g, v):
        depth += t == v.obj_open
        depth -= t == v.obj_close
        assert 0 <= depth <= 1


def _ann(v):
    words = v.encode_words(["a", "red", "circle"])
    return Annotation("img", words, [Entity(0, 3, QuantBox(1, 2, 3, 4))])


def test_pretrain_degenerate_probabilities():
    v = toy_vocab()
    rng = np.random.default_rng(0)
    ann = _ann(v)
    for _ in range(50):
        assert build_pretrain_sample(ann, v, rng, p_empty=1.0).input_text == []
        assert build_pretrain_sample(ann, v, rng, p_empty=0.0).input_text == ann.words


def test_pretrain_empty_rate():
    # 99% binomial interval for n=1e4, p=0.5 is 0.5 +- 2.576*0.005 = [0.4871, 0.5129] inside [0.47, 0.53]
    v = toy_vocab()
    rng = np.random.default_rng(1)
    ann = _ann(v)
    samples = [build_pretrain_sample(ann, v, rng) for _ in range(10_000)]
    rate = sum(not s.input_text for s in samples) / len(samples)
    assert 0.47 <= rate <= 0.53
    # target identical for both branches
    assert len({tuple(s.target) for s in samples}) == 1


def test_pretrain_rejects_bad_probability():
    v = toy_vocab()
    with pytest.raises(ValueError):
        build_pretrain_sample(_ann(v), v, np.random.default_rng(0), p_empty=1.5)


def test_task_samples():
    v = toy_vocab()
    ann = _ann(v)
    gc = build_task_sample("grounded_captioning", ann, v)
    assert gc.input_text == [] and box_token_count(gc.target, v) == 4
    pg = build_task_sample("phrase_grounding", ann, v)
    assert pg.input_text == ann.words and pg.target == gc.target
    cap = build_task_sample("captioning", ann, v)
    assert box_token_count(cap.target, v) == 0 and cap.target == ann.words + [EOS]

    q = Annotation("img", v.encode_words(["the", "red", "circle"]), [Entity(2, 3, QuantBox(1, 2, 3, 4))])
    ref = build_task_sample("refexp", q, v)
    assert ref.target.count(v.obj_open) == 1 and box_token_count(ref.target, v) == 4
    assert len(parse(ref.target, v).groundings) == 1

    vq = Annotation("img", v.encode_words(["how", "many", "circles", "?"]), answer=v.encode_words(["two"]))
    s = build_task_sample("vqa", vq, v)
    assert s.target == v.encode_words(["two"]) + [EOS]


def test_phrase_grounding_without_entities_repeats_input():
    v = toy_vocab()
    ann = Annotation("img", v.encode_words(["a", "red", "circle"]))
    s = build_task_sample("phrase_grounding", ann, v)
    assert s.target[:-1] == s.input_text


def test_schema_mismatch_rejected():
    v = toy_vocab()
    with pytest.raises(ValueError):
        build_task_sample("refexp", Annotation("img", [5, 6]), v)
    with pytest.raises(ValueError):
        build_task_sample("vqa", Annotation("img", [5, 6]), v)
    with pytest.raises(ValueError):
        build_task_sample("detection", _ann(v), v)
    with pytest.raises(ValueError):
        TaskSample("vqa", [], None, [5])


def test_task_prefix_round_trip():
    v = toy_vocab()
    q = Annotation("img", v.encode_words(["the", "red", "circle"]), [Entity(2, 3, QuantBox(1, 2, 3, 4))])
    s = build_task_sample("refexp", q, v)
    assert apply_task_prefix(s, False, v) is s
    p = apply_task_prefix(s, True, v)
    assert p.input_text[:3] == v.encode_words(["visual", "grounding", ":"])
    assert strip_task_prefix(p, v) == s
    prefix_lengths = {"grounded_captioning": 3, "phrase_grounding": 3, "refexp": 3, "captioning": 2, "vqa": 3}
    ann = _ann(v)
    for task, n in prefix_lengths.items():
        a = q if task == "refexp" else ann
        if task == "vqa":
            a = Annotation("img", [5], answer=[6])
        s = build_task_sample(task, a, v)
        p = apply_task_prefix(s, True, v)
        assert len(p.input_text) - len(s.input_text) == n
        assert strip_task_prefix(p, v).input_text == s.input_text
