from fractions import Fraction

import numpy as np
import pytest

from groundseq.builder import build_task_sample
from groundseq.grammar import parse, validate
from groundseq.scenes import (
    COLORS,
    FEAT_DIM,
    SHAPES,
    TASK_ORDER,
    GenConfig,
    Scene,
    SceneObject,
    generate_corpus,
    query_matches,
    refexp_queries,
    scene_to_features,
    toy_vocab,
)
from groundseq.vocab import BBox, dequantize_box, quantize_box

V = toy_vocab()


def cells_inside(box, grid=8):
    """Cells whose center lies in ``box``, computed with exact rationals."""
    out = set()
    for r in range(grid):
        for c in range(grid):
            cx, cy = Fraction(2 * c + 1, 2 * grid), Fraction(2 * r + 1, 2 * grid)
            if Fraction(box.x_min) <= cx <= Fraction(box.x_max) and Fraction(box.y_min) <= cy <= Fraction(box.y_max):
                out.add((r, c))
    return out


def test_corpus_is_deterministic():
    a = generate_corpus(30, seed=4)
    b = generate_corpus(30, seed=4)
    assert [s.to_dict() for s in a[0]] == [s.to_dict() for s in b[0]]
    assert a[1] == b[1]
    c = generate_corpus(30, seed=5)
    assert [s.to_dict() for s in a[0]] != [s.to_dict() for s in c[0]]


def test_scene_invariants():
    scenes, anns = generate_corpus(300, seed=0)
    for scene, ann in zip(scenes, anns):
        objs = scene.objects
        assert 1 <= len(objs) <= 3
        assert len({(o.shape, o.color) for o in objs}) == len(objs)
        covered = [cells_inside(o.box) for o in objs]
        assert sum(map(len, covered)) == len(set().union(*covered))  # no overlap
        gt = {quantize_box(o.box) for o in objs}
        for task in ("grounded_captioning", "phrase_grounding"):
            assert {e.box for e in ann[task].entities} == gt
        assert set(ann) == set(TASK_ORDER)
        for task in TASK_ORDER:
            s = build_task_sample(task, ann[task], V)
            assert validate(s.target, V).valid
            parse(s.target, V)


def test_scene_json_round_trip():
    scenes, _ = generate_corpus(10, seed=2)
    for s in scenes:
        assert Scene.from_dict(s.to_dict()) == s


def test_refexp_queries_are_unambiguous():
    scenes, anns = generate_corpus(500, seed=7)
    for scene, ann in zip(scenes, anns):
        for target in scene.objects:
            for q in refexp_queries(scene, target):
                assert [o for o in scene.objects if query_matches(q, o)] == [target]
        words = [V.words[i] for i in ann["refexp"].words]
        hits = [o for o in scene.objects if query_matches(words, o)]
        assert len(hits) == 1
        head = ann["refexp"].entities[0]
        assert head.end == len(words) and head.box == quantize_box(hits[0].box)


def test_vqa_answers_by_brute_force():
    scenes, anns = generate_corpus(300, seed=9)
    for scene, ann in zip(scenes, anns):
        q = [V.words[i] for i in ann["vqa"].words]
        a = [V.words[i] for i in ann["vqa"].answer]
        if q[:2] == ["how", "many"]:
            shape = q[2][:-1]
            assert a == [["zero", "one", "two", "three"][sum(o.shape == shape for o in scene.objects)]]
        elif q[0] == "is":
            present = any(o.color == q[3] and o.shape == q[4] for o in scene.objects)
            assert a == ["yes" if present else "no"]
        else:
            (obj,) = [o for o in scene.objects if o.shape == q[4]]
            assert a == [obj.color]


def test_features_empty_scene():
    f = scene_to_features(Scene([]), 8)
    assert f.shape == (64, FEAT_DIM)
    assert (f[:, 0] == 1).all() and (f[:, 1:-2] == 0).all()
    assert f[0, -2:].tolist() == [1 / 16, 1 / 16]
    assert f[63, -2:].tolist() == [15 / 16, 15 / 16]


def test_features_full_canvas():
    f = scene_to_features(Scene([SceneObject("square", "blue", BBox(0, 0, 1, 1))]), 8)
    assert (f[:, 0] == 0).all()
    assert (f[:, 1 + SHAPES.index("square")] == 1).all()
    assert (f[:, 1 + len(SHAPES) + COLORS.index("blue")] == 1).all()


def test_features_six_cell_object():
    # columns 2..4 and rows 1..2 on an 8x8 grid
    box = BBox(2 / 8, 1 / 8, 5 / 8, 3 / 8)
    f = scene_to_features(Scene([SceneObject("circle", "red", box)]), 8).reshape(8, 8, FEAT_DIM)
    expected = cells_inside(box)
    assert expected == {(r, c) for r in (1, 2) for c in (2, 3, 4)}
    got = {(r, c) for r in range(8) for c in range(8) if f[r, c, 0] == 0}
    assert got == expected


@pytest.mark.parametrize("grid", [8, 16])
def test_features_match_containment_oracle(grid):
    # objects snap to 1/8 edges, so on these grids no cell center lies on an edge
    scenes, _ = generate_corpus(40, seed=grid)
    for s in scenes:
        f = scene_to_features(s, grid).reshape(grid, grid, FEAT_DIM)
        covered = set()
        for o in s.objects:
            cells = cells_inside(o.box, grid)
            covered |= cells
            for r, c in cells:
                assert f[r, c, 1 + SHAPES.index(o.shape)] == 1
                assert f[r, c, 1 + len(SHAPES) + COLORS.index(o.color)] == 1
        assert {(r, c) for r in range(grid) for c in range(grid) if f[r, c, 0] == 0} == covered


def test_features_shared_center_goes_to_later_object():
    a = SceneObject("circle", "red", BBox(0, 0, 0.375, 1))
    b = SceneObject("square", "blue", BBox(0.375, 0, 1, 1))
    f = scene_to_features(Scene([a, b]), 4).reshape(4, 4, FEAT_DIM)
    assert f[0, 1, 1 + SHAPES.index("square")] == 1


def test_gen_config_validation():
    with pytest.raises(ValueError):
        GenConfig(min_objects=0)
    with pytest.raises(ValueError):
        GenConfig(max_cells=9)


def test_boxes_survive_quantization():
    scenes, _ = generate_corpus(50, seed=1)
    for s in scenes:
        for o in s.objects:
            d = dequantize_box(quantize_box(o.box))
            assert max(abs(a - b) for a, b in zip(d.as_tuple(), o.box.as_tuple())) <= 1 / 400 + 1e-12
