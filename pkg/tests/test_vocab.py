import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from groundseq.vocab import (
    BBox,
    BoxBin,
    ObjClose,
    ObjOpen,
    QuantBox,
    Text,
    UnifiedVocab,
    build_vocab,
    dequantize_box,
    dequantize_coord,
    quantize_box,
    quantize_coord,
)
from oracles import brute_force_bin


def test_vocab_sizes():
    assert build_vocab(50265, 200).size == 50467
    assert build_vocab(10, 1).size == 13


def test_marker_ids_by_enumeration():
    v = build_vocab(64, 200)
    # walk the partition boundaries: text block, then box block, then two markers
    boundaries = [64, 64 + 200]
    assert v.obj_open == boundaries[-1] == 264
    assert v.obj_close == boundaries[-1] + 1 == 265


@pytest.mark.parametrize("n_text,n_bins", [(3, 200), (0, 1), (10, 0), (-4, 5)])
def test_build_vocab_rejects_bad_sizes(n_text, n_bins):
    with pytest.raises(ValueError):
        build_vocab(n_text, n_bins)


def test_id_partition_total_and_disjoint():
    v = build_vocab(12, 7)
    kinds = []
    for i in range(v.size):
        tok = v.to_token(i)
        assert v.to_id(tok) == i
        kinds.append(type(tok))
    assert kinds.count(Text) == 12
    assert kinds.count(BoxBin) == 7
    assert kinds.count(ObjOpen) == kinds.count(ObjClose) == 1
    with pytest.raises(ValueError):
        v.to_token(v.size)


@pytest.mark.parametrize("x,expected", [(0.0, 0), (1.0, 199), (0.4525, 90), (-0.3, 0), (7.0, 199)])
def test_quantize_coord_examples(x, expected):
    assert quantize_coord(x, 200) == expected
    assert brute_force_bin(x, 200) == expected


def test_quantize_rejects_nan():
    with pytest.raises(ValueError):
        quantize_coord(float("nan"), 200)


@pytest.mark.parametrize("b,expected", [(0, 0.0025), (199, 0.9975), (90, 0.4525)])
def test_dequantize_coord_examples(b, expected):
    assert dequantize_coord(b, 200) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("b", [-1, 200])
def test_dequantize_rejects_out_of_range(b):
    with pytest.raises(ValueError):
        dequantize_coord(b, 200)


@pytest.mark.parametrize("n_bins", [1, 7, 200, 1000])
def test_quantize_dequantize_identity_on_bins(n_bins):
    assert all(quantize_coord(dequantize_coord(b, n_bins), n_bins) == b for b in range(n_bins))


def test_quantize_matches_brute_force_on_grid():
    xs = np.arange(10001) / 10000
    assert all(quantize_coord(float(x), 200) == brute_force_bin(float(x), 200) for x in xs[::7])


@given(st.floats(0, 1), st.floats(0, 1))
def test_quantize_monotone(x, y):
    if x > y:
        x, y = y, x
    assert quantize_coord(x) <= quantize_coord(y)


@given(st.floats(0, 1), st.integers(1, 500))
def test_round_trip_error_bound(x, n_bins):
    err = abs(dequantize_coord(quantize_coord(x, n_bins), n_bins) - x)
    assert err <= 1 / (2 * n_bins) + 1e-12


def test_donut_box_round_trip():
    q = QuantBox(90, 83, 184, 180)
    assert quantize_box(dequantize_box(q, 200), 200) == q


def test_full_canvas_box():
    assert quantize_box(BBox(0, 0, 1, 1), 200) == QuantBox(0, 0, 199, 199)


@given(st.lists(st.floats(0, 1), min_size=4, max_size=4))
def test_quantized_box_keeps_order(vals):
    x0, x1 = sorted(vals[:2])
    y0, y1 = sorted(vals[2:])
    q = quantize_box(BBox(x0, y0, x1, y1))
    assert q.bx_min <= q.bx_max and q.by_min <= q.by_max
    d = dequantize_box(q)
    assert d.x_min <= d.x_max and d.y_min <= d.y_max


def test_bbox_invariants():
    with pytest.raises(ValueError):
        BBox(0.5, 0, 0.4, 1)
    with pytest.raises(ValueError):
        BBox(0, 0, 1.1, 1)
    with pytest.raises(ValueError):
        BBox(math.nan, 0, 1, 1)
    with pytest.raises(ValueError):
        QuantBox(5, 0, 4, 0)


def test_from_pixels_normalizes_and_clamps():
    b = BBox.from_pixels(-5, 10, 320, 500, 640, 480)
    assert b.as_tuple() == (0.0, 10 / 480, 0.5, 1.0)


def test_manifest_round_trip(tmp_path):
    v = build_vocab(20, 33)
    p = tmp_path / "vocab.json"
    v.save(p)
    assert UnifiedVocab.load(p) == v
    m = v.manifest()
    assert (m["n_text"], m["n_bins"], m["obj_open"], m["obj_close"]) == (20, 33, 53, 54)
    assert m["control_ids"] == {"pad": 0, "bos": 1, "eos": 2, "unk": 3}


def test_manifest_inconsistency_rejected():
    m = build_vocab(20, 33).manifest()
    m["obj_open"] = 7
    with pytest.raises(ValueError):
        UnifiedVocab.from_manifest(m)


def test_render_and_tokenize(donut_vocab):
    v = donut_vocab
    s = "<obj> a donut <90> <83> <184> <180> <\\obj>"
    ids = v.tokenize_rendered(s)
    assert v.render(ids) == s
