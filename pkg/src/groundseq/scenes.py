"""Synthetic grounded scenes: colored shapes on a grid-aligned canvas.

Every scene yields one annotation per task. Boxes are snapped to the feature
grid so that the cell-level features determine each box exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from groundseq.builder import TASK_PREFIXES, Annotation, Entity
from groundseq.vocab import BBox, UnifiedVocab, quantize_box, vocab_from_words

SHAPES = ("circle", "square", "triangle")
PLURALS = {"circle": "circles", "square": "squares", "triangle": "triangles"}
COLORS = ("red", "green", "blue", "yellow")
COUNT_WORDS = ("zero", "one", "two", "three", "four", "five")
TASK_ORDER = ("grounded_captioning", "phrase_grounding", "refexp", "captioning", "vqa")

FEATURE_NAMES = (
    ("background",)
    + SHAPES
    + COLORS
    + ("edge_left", "edge_right", "edge_top", "edge_bottom", "cell_x", "cell_y")
)
FEAT_DIM = len(FEATURE_NAMES)


def toy_words() -> list[str]:
    words = ["a", "and", "the", "object", "how", "many", "what", "color", "is", "there", "?", "yes", "no"]
    words += list(SHAPES) + [PLURALS[s] for s in SHAPES] + list(COLORS) + list(COUNT_WORDS)
    for prefix in TASK_PREFIXES.values():
        words += list(prefix)
    return words


def toy_vocab(n_bins: int = 200) -> UnifiedVocab:
    return vocab_from_words(toy_words(), n_bins)


@dataclass
class GenConfig:
    grid: int = 8
    min_objects: int = 1
    max_objects: int = 3
    min_cells: int = 2
    max_cells: int = 4

    def __post_init__(self):
        if not 1 <= self.min_objects <= self.max_objects <= len(SHAPES) * len(COLORS):
            raise ValueError("bad object count range")
        if not 1 <= self.min_cells <= self.max_cells <= self.grid:
            raise ValueError("bad object size range")


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    box: BBox

    def to_dict(self) -> dict:
        return {"shape": self.shape, "color": self.color, "box": list(self.box.as_tuple())}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneObject":
        return cls(d["shape"], d["color"], BBox(*d["box"]))


@dataclass
class Scene:
    objects: list[SceneObject] = field(default_factory=list)
    scene_id: str = ""

    def to_dict(self) -> dict:
        return {"scene_id": self.scene_id, "objects": [o.to_dict() for o in self.objects]}

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls([SceneObject.from_dict(o) for o in d["objects"]], d.get("scene_id", ""))


def _canonical(objects):
    return sorted(objects, key=lambda o: (SHAPES.index(o.shape), COLORS.index(o.color)))


def _sample_objects(rng: np.random.Generator, cfg: GenConfig) -> list[SceneObject]:
    g = cfg.grid
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    combos = [(s, c) for s in SHAPES for c in COLORS]
    picks = rng.choice(len(combos), size=n, replace=False)
    occupied = np.zeros((g, g), dtype=bool)
    objects = []
    for k in picks:
        shape, color = combos[k]
        for _ in range(200):
            w = int(rng.integers(cfg.min_cells, cfg.max_cells + 1))
            h = int(rng.integers(cfg.min_cells, cfg.max_cells + 1))
            x0 = int(rng.integers(0, g - w + 1))
            y0 = int(rng.integers(0, g - h + 1))
            if not occupied[y0 : y0 + h, x0 : x0 + w].any():
                occupied[y0 : y0 + h, x0 : x0 + w] = True
                objects.append(SceneObject(shape, color, BBox(x0 / g, y0 / g, (x0 + w) / g, (y0 + h) / g)))
                break
    return objects


def describe(o: SceneObject) -> list[str]:
    return ["a", o.color, o.shape]


def _caption(objects, vocab: UnifiedVocab, order) -> Annotation:
    words: list[str] = []
    entities = []
    for j, o in enumerate(order):
        if j:
            words.append("and")
        start = len(words)
        words += describe(o)
        entities.append(Entity(start, len(words), quantize_box(o.box, vocab.n_bins)))
    return Annotation(None, vocab.encode_words(words), entities)


def refexp_queries(scene: Scene, target: SceneObject) -> list[list[str]]:
    """Every query form that singles out ``target`` in ``scene``."""
    out = [["the", target.color, target.shape]]
    if sum(o.shape == target.shape for o in scene.objects) == 1:
        out.append(["the", target.shape])
    if sum(o.color == target.color for o in scene.objects) == 1:
        out.append(["the", target.color, "object"])
    return out


def query_matches(query: list[str], o: SceneObject) -> bool:
    """Predicate a refexp query imposes on an object."""
    words = set(query[1:])
    if words & set(SHAPES) and o.shape not in words:
        return False
    if words & set(COLORS) and o.color not in words:
        return False
    return True


def _vqa(rng: np.random.Generator, scene: Scene) -> tuple[list[str], list[str]]:
    kinds = ["count", "exists"]
    unique_shapes = [s for s in SHAPES if sum(o.shape == s for o in scene.objects) == 1]
    if unique_shapes:
        kinds.append("color")
    kind = kinds[int(rng.integers(len(kinds)))]
    if kind == "count":
        s = SHAPES[int(rng.integers(len(SHAPES)))]
        n = sum(o.shape == s for o in scene.objects)
        return ["how", "many", PLURALS[s], "?"], [COUNT_WORDS[n]]
    if kind == "exists":
        s = SHAPES[int(rng.integers(len(SHAPES)))]
        c = COLORS[int(rng.integers(len(COLORS)))]
        yes = any(o.shape == s and o.color == c for o in scene.objects)
        return ["is", "there", "a", c, s, "?"], ["yes" if yes else "no"]
    s = unique_shapes[int(rng.integers(len(unique_shapes)))]
    obj = next(o for o in scene.objects if o.shape == s)
    return ["what", "color", "is", "the", s, "?"], [obj.color]


def generate_scene(
    rng: np.random.Generator, cfg: GenConfig, vocab: UnifiedVocab, scene_id: str = ""
) -> tuple[Scene, dict[str, Annotation]]:
    """Sample a scene and derive one annotation for each task.

    The grounded caption lists objects in canonical (shape, color) order; the
    phrase-grounding caption lists them in random order. Refexp targets
    ground the head word of the query.
    """
    scene = Scene(_sample_objects(rng, cfg), scene_id)
    objs = scene.objects
    anns: dict[str, Annotation] = {}
    anns["grounded_captioning"] = _caption(objs, vocab, _canonical(objs))
    perm = rng.permutation(len(objs))
    anns["phrase_grounding"] = _caption(objs, vocab, [objs[i] for i in perm])
    cap = anns["grounded_captioning"]
    anns["captioning"] = Annotation(None, list(cap.words))

    target = objs[int(rng.integers(len(objs)))]
    forms = refexp_queries(scene, target)
    query = forms[int(rng.integers(len(forms)))]
    head = len(query) - 1
    anns["refexp"] = Annotation(None, vocab.encode_words(query), [Entity(head, head + 1, quantize_box(target.box, vocab.n_bins))])

    q, a = _vqa(rng, scene)
    anns["vqa"] = Annotation(None, vocab.encode_words(q), [], vocab.encode_words(a))
    for ann in anns.values():
        ann.image = scene_id
    return scene, anns


def scene_to_features(scene: Scene, grid_h: int = 8, grid_w: Optional[int] = None) -> np.ndarray:
    """Flattened (H*W, FEAT_DIM) grid.

    A cell carries the shape/color one-hot of the object covering its center,
    flags for which sides of that object's region the cell sits on, and the
    cell-center coordinates. Uncovered cells carry the background flag.
    """
    grid_w = grid_w or grid_h
    feats = np.zeros((grid_h, grid_w, FEAT_DIM), dtype=np.float32)
    owner = -np.ones((grid_h, grid_w), dtype=np.int64)
    cy = (np.arange(grid_h) + 0.5) / grid_h
    cx = (np.arange(grid_w) + 0.5) / grid_w
    for k, o in enumerate(scene.objects):
        b = o.box
        rows = (cy >= b.y_min) & (cy <= b.y_max)
        cols = (cx >= b.x_min) & (cx <= b.x_max)
        owner[np.ix_(rows, cols)] = k
    pad = np.pad(owner, 1, constant_values=-1)
    for r in range(grid_h):
        for c in range(grid_w):
            f = feats[r, c]
            f[-2], f[-1] = cx[c], cy[r]
            k = owner[r, c]
            if k < 0:
                f[0] = 1.0
                continue
            o = scene.objects[k]
            f[1 + SHAPES.index(o.shape)] = 1.0
            f[1 + len(SHAPES) + COLORS.index(o.color)] = 1.0
            base = 1 + len(SHAPES) + len(COLORS)
            f[base + 0] = pad[r + 1, c] != k
            f[base + 1] = pad[r + 1, c + 2] != k
            f[base + 2] = pad[r, c + 1] != k
            f[base + 3] = pad[r + 2, c + 1] != k
    return feats.reshape(grid_h * grid_w, FEAT_DIM)


def generate_corpus(n_scenes: int, seed: int, cfg: Optional[GenConfig] = None, vocab: Optional[UnifiedVocab] = None, prefix: str = "s"):
    """``n_scenes`` scenes with annotations, deterministic in ``seed``."""
    cfg = cfg or GenConfig()
    vocab = vocab or toy_vocab()
    rng = np.random.default_rng(seed)
    scenes, anns = [], []
    for i in range(n_scenes):
        s, a = generate_scene(rng, cfg, vocab, f"{prefix}{i:06d}")
        scenes.append(s)
        anns.append(a)
    return scenes, anns
