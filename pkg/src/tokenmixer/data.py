"""Synthetic scene-grid dataset and the unified token form of its modalities.

A scene is a small grid of palette ids (0 = background) produced by painting
axis-aligned rectangles in order. Four condition modalities derive from it:

* text: one token, the dominant non-background palette id
* segmentation: one token per cell (palette id, UNKNOWN outside coverage)
* sketch: one token per cell (1 where a 4-neighbor differs, UNKNOWN outside
  coverage)
* bbox: (category, top-left, bottom-right) token triples, positions as flat
  cell indices

Coverage masks are random rectangles, so conditions may describe different,
partial, overlapping regions of the same scene.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .numerics import RNG_DATA, RngState


class ModalityKind(enum.Enum):
    TEXT = "text"
    SEGMENTATION = "seg"
    SKETCH = "sketch"
    BBOX = "bbox"


MODALITY_ORDER = (ModalityKind.TEXT, ModalityKind.SEGMENTATION, ModalityKind.SKETCH, ModalityKind.BBOX)
SKETCH_UNKNOWN = 2


@dataclass(frozen=True)
class DatasetConfig:
    """Generation knobs (grid geometry, palette, object and coverage ranges)."""

    grid_h: int = 8
    grid_w: int = 8
    palette: int = 6  # id 0 is background
    min_objects: int = 1
    max_objects: int = 4
    min_side: int = 1
    max_side: int = 4
    coverage_min: float = 0.3
    coverage_max: float = 1.0

    @property
    def cells(self):
        return self.grid_h * self.grid_w

    @property
    def categories(self):
        return self.palette - 1

    def image_vocab(self):
        return self.palette

    def seg_unknown(self):
        return self.palette

    def bbox_pad(self):
        return self.cells + self.categories

    def vocab(self, kind):
        if kind is ModalityKind.TEXT:
            return self.palette
        if kind is ModalityKind.SEGMENTATION:
            return self.palette + 1
        if kind is ModalityKind.SKETCH:
            return 3
        return self.cells + self.categories + 1  # positions, categories, PAD

    def max_tokens(self, kind):
        if kind is ModalityKind.TEXT:
            return 1
        if kind is ModalityKind.BBOX:
            return 3 * self.max_objects
        return self.cells


@dataclass(frozen=True)
class SceneSpec:
    """Rendered grid plus the ordered object list it was painted from."""

    grid: np.ndarray  # (H, W) palette ids
    objects: tuple  # ((category, (r0, c0), (r1, c1)), ...)
    global_attribute: int

    def __post_init__(self):
        h, w = self.grid.shape
        for cat, (r0, c0), (r1, c1) in self.objects:
            if not (0 <= r0 <= r1 < h and 0 <= c0 <= c1 < w):
                raise ValueError(f"object rectangle ({r0},{c0})-({r1},{c1}) outside {h}x{w} grid")


def render_scene(h, w, objects):
    """Paint objects over background in order; later objects overwrite."""
    grid = np.zeros((h, w), dtype=np.int16)
    for cat, (r0, c0), (r1, c1) in objects:
        grid[r0 : r1 + 1, c0 : c1 + 1] = cat
    return grid


def dominant_attribute(grid):
    """Most frequent non-background palette id (ties to the lowest id, 0 if none)."""
    counts = np.bincount(grid.reshape(-1))
    counts[0] = 0
    return int(counts.argmax()) if counts.any() else 0


def generate_scene(rng, knobs=DatasetConfig()):
    """Draw a scene of non-overlapping rectangles on background.

    Placement uses rejection (up to 20 tries per object, then the object is
    dropped) so every object's rectangle survives intact in the rendered
    grid, and objects of the same category never touch (4-adjacency), so
    each object remains its own connected component.
    """
    h, w = knobs.grid_h, knobs.grid_w
    n = int(rng.integers(knobs.min_objects, knobs.max_objects + 1))
    cats = rng.integers(1, knobs.palette, size=n) if n else []
    occupied = np.zeros((h, w), dtype=bool)
    near = {c: np.zeros((h, w), dtype=bool) for c in range(1, knobs.palette)}
    objects = []
    for cat in cats:
        cat = int(cat)
        for _ in range(20):
            hh = int(rng.integers(knobs.min_side, knobs.max_side + 1))
            ww = int(rng.integers(knobs.min_side, knobs.max_side + 1))
            r0 = int(rng.integers(0, h - hh + 1))
            c0 = int(rng.integers(0, w - ww + 1))
            rect = (slice(r0, r0 + hh), slice(c0, c0 + ww))
            if occupied[rect].any() or near[cat][rect].any():
                continue
            occupied[rect] = True
            grown = (slice(max(0, r0 - 1), min(h, r0 + hh + 1)), slice(max(0, c0 - 1), min(w, c0 + ww + 1)))
            near[cat][grown] = True
            objects.append((cat, (r0, c0), (r0 + hh - 1, c0 + ww - 1)))
            break
    grid = render_scene(h, w, objects)
    return SceneSpec(grid=grid, objects=tuple(objects), global_attribute=dominant_attribute(grid))


@dataclass(frozen=True)
class TokenSequence:
    modality: ModalityKind
    tokens: np.ndarray
    layout: tuple

    def __post_init__(self):
        object.__setattr__(self, "tokens", np.asarray(self.tokens, dtype=np.int64))
        n = len(self.tokens)
        if self.modality is ModalityKind.TEXT and (n != 1 or self.layout != (1,)):
            raise ValueError("text sequences carry exactly one token")
        if self.modality is ModalityKind.BBOX and n != 3 * self.layout[0]:
            raise ValueError(f"bbox sequence length {n} != 3*{self.layout[0]}")
        if self.modality in (ModalityKind.SEGMENTATION, ModalityKind.SKETCH) and n != self.layout[0] * self.layout[1]:
            raise ValueError(f"grid sequence length {n} != {self.layout}")


@dataclass
class ConditionSet:
    """Any subset of the modalities, each with the coverage mask it was derived under."""

    present: dict = field(default_factory=dict)  # ModalityKind -> TokenSequence
    coverage: dict = field(default_factory=dict)  # ModalityKind -> (H, W) bool

    def kinds(self):
        return [m for m in MODALITY_ORDER if m in self.present]

    def restricted(self, subset):
        keep = set(subset)
        return ConditionSet(
            present={m: s for m, s in self.present.items() if m in keep},
            coverage={m: c for m, c in self.coverage.items() if m in keep},
        )


def sketch_map(grid):
    """1 where any 4-neighbor holds a different palette id."""
    edge = np.zeros_like(grid, dtype=np.int16)
    edge[:-1, :] |= grid[:-1, :] != grid[1:, :]
    edge[1:, :] |= grid[1:, :] != grid[:-1, :]
    edge[:, :-1] |= grid[:, :-1] != grid[:, 1:]
    edge[:, 1:] |= grid[:, 1:] != grid[:, :-1]
    return edge


def derive_modality(scene, kind, coverage=None, knobs=DatasetConfig()):
    """Tokenize one modality of a scene under a coverage mask (ignored for text)."""
    h, w = scene.grid.shape
    if coverage is None:
        coverage = np.ones((h, w), dtype=bool)
    if kind is ModalityKind.TEXT:
        return TokenSequence(kind, np.array([scene.global_attribute]), (1,))
    if kind is ModalityKind.SEGMENTATION:
        toks = scene.grid.astype(np.int64).copy()
        toks[~coverage] = knobs.seg_unknown()
        return TokenSequence(kind, toks.reshape(-1), (h, w))
    if kind is ModalityKind.SKETCH:
        toks = sketch_map(scene.grid).astype(np.int64)
        toks[~coverage] = SKETCH_UNKNOWN
        return TokenSequence(kind, toks.reshape(-1), (h, w))
    triples = []
    for cat, (r0, c0), (r1, c1) in scene.objects:
        if coverage[r0 : r1 + 1, c0 : c1 + 1].all():
            triples.extend([knobs.cells + cat - 1, r0 * w + c0, r1 * w + c1])
    return TokenSequence(kind, np.array(triples, dtype=np.int64), (len(triples) // 3,))


def decode_bbox_tokens(seq, knobs=DatasetConfig()):
    """Inverse of the bbox tokenization: triples back to (category, corners)."""
    w = knobs.grid_w
    out = []
    toks = seq.tokens.reshape(-1, 3)
    for o, tl, br in toks:
        cat = int(o) - knobs.cells + 1
        out.append((cat, (int(tl) // w, int(tl) % w), (int(br) // w, int(br) % w)))
    return out


@dataclass(frozen=True)
class ImageTokens:
    tokens: np.ndarray
    layout: tuple
    exact: bool = True


def derive_image_tokens(scene, quantizer=None):
    """Image token sequence: exact palette ids per cell, or a VQ pipeline's codes.

    The exact mode is bijective (token id == palette id), which is what makes
    downstream constraint checking unambiguous.
    """
    h, w = scene.grid.shape
    if quantizer is None:
        return ImageTokens(tokens=scene.grid.reshape(-1).astype(np.int64), layout=(h, w), exact=True)
    ids, (th, tw) = quantizer.tokenize(scene)
    return ImageTokens(tokens=np.asarray(ids, dtype=np.int64), layout=(th, tw), exact=False)


def decode_image_tokens(tokens, h, w):
    return np.asarray(tokens, dtype=np.int64).reshape(h, w).astype(np.int16)


def draw_coverage(rng, knobs=DatasetConfig()):
    """Random rectangular coverage mask with area fraction in [coverage_min, coverage_max]."""
    h, w = knobs.grid_h, knobs.grid_w
    lo, hi = knobs.coverage_min * h * w, knobs.coverage_max * h * w
    while True:
        r0, r1 = sorted(int(v) for v in rng.integers(0, h, size=2))
        c0, c1 = sorted(int(v) for v in rng.integers(0, w, size=2))
        area = (r1 - r0 + 1) * (c1 - c0 + 1)
        if lo <= area <= hi:
            mask = np.zeros((h, w), dtype=bool)
            mask[r0 : r1 + 1, c0 : c1 + 1] = True
            return mask


def make_example(scene, subset, rng, knobs=DatasetConfig()):
    """Derive an (image tokens, ConditionSet) pair for the given modality subset.

    Coverage rectangles are drawn per modality in MODALITY_ORDER, so masks can
    overlap or leave scene regions undescribed.
    """
    subset = set(subset)
    present, coverage = {}, {}
    for kind in MODALITY_ORDER:
        if kind not in subset:
            continue
        cov = np.ones((knobs.grid_h, knobs.grid_w), dtype=bool) if kind is ModalityKind.TEXT else draw_coverage(rng, knobs)
        present[kind] = derive_modality(scene, kind, cov, knobs)
        coverage[kind] = cov
    return derive_image_tokens(scene), ConditionSet(present=present, coverage=coverage)


@dataclass
class Example:
    scene: SceneSpec
    image: ImageTokens
    conditions: ConditionSet  # all four modalities, each under its own coverage


def build_example(seed, index, knobs=DatasetConfig()):
    rng = RngState(seed).stream(RNG_DATA, index)
    scene = generate_scene(rng, knobs)
    image, conditions = make_example(scene, MODALITY_ORDER, rng, knobs)
    return Example(scene=scene, image=image, conditions=conditions)


class Corpus:
    """A fixed set of pre-derived examples packed into arrays for batching."""

    def __init__(self, seed=0, size=0, knobs=DatasetConfig(), examples=None):
        self.seed = seed
        self.knobs = knobs
        if examples is None:
            examples = [build_example(seed, i, knobs) for i in range(size)]
        self.examples = examples
        for e in self.examples:
            missing = [m for m in MODALITY_ORDER if m not in e.conditions.present]
            if missing:
                raise ValueError(f"corpus examples must carry all four modalities (missing {missing})")
        size = len(self.examples)
        k = knobs
        self.image = np.stack([e.image.tokens for e in self.examples])
        self.text = np.stack([e.conditions.present[ModalityKind.TEXT].tokens for e in self.examples])
        self.seg = np.stack([e.conditions.present[ModalityKind.SEGMENTATION].tokens for e in self.examples])
        self.sketch = np.stack([e.conditions.present[ModalityKind.SKETCH].tokens for e in self.examples])
        pad = k.bbox_pad()
        self.bbox = np.full((size, 3 * k.max_objects), pad, dtype=np.int64)
        self.bbox_len = np.zeros(size, dtype=np.int64)
        for i, e in enumerate(self.examples):
            t = e.conditions.present[ModalityKind.BBOX].tokens
            self.bbox[i, : len(t)] = t
            self.bbox_len[i] = len(t)

    @classmethod
    def from_records(cls, records, knobs):
        """Build from loaded (scene, image, conditions) dataset records."""
        examples = [Example(scene=s, image=i, conditions=c) for s, i, c in records]
        return cls(knobs=knobs, examples=examples)

    def __len__(self):
        return len(self.examples)

    def batch(self, indices):
        idx = np.asarray(indices)
        return {
            "image": self.image[idx],
            ModalityKind.TEXT: self.text[idx],
            ModalityKind.SEGMENTATION: self.seg[idx],
            ModalityKind.SKETCH: self.sketch[idx],
            ModalityKind.BBOX: self.bbox[idx],
            "bbox_len": self.bbox_len[idx],
        }


# ---------------------------------------------------------------------------
# Line-delimited serialization (schema documented in FORMATS.md)
# ---------------------------------------------------------------------------


def _mask_to_json(mask):
    return ["".join("1" if v else "0" for v in row) for row in mask]


def _mask_from_json(rows):
    return np.array([[ch == "1" for ch in row] for row in rows], dtype=bool)


def example_to_json(scene, image, conditions):
    rec = {
        "scene": {
            "grid": scene.grid.tolist(),
            "objects": [[cat, list(tl), list(br)] for cat, tl, br in scene.objects],
            "global_attribute": scene.global_attribute,
        },
        "subset": [m.value for m in conditions.kinds()],
        "conditions": {},
        "image_tokens": image.tokens.tolist(),
        "image_layout": list(image.layout),
    }
    for kind in conditions.kinds():
        seq = conditions.present[kind]
        rec["conditions"][kind.value] = {
            "tokens": seq.tokens.tolist(),
            "layout": list(seq.layout),
            "coverage": _mask_to_json(conditions.coverage[kind]),
        }
    return json.dumps(rec, separators=(",", ":"))


def example_from_json(line):
    rec = json.loads(line)
    s = rec["scene"]
    scene = SceneSpec(
        grid=np.array(s["grid"], dtype=np.int16),
        objects=tuple((int(cat), tuple(tl), tuple(br)) for cat, tl, br in s["objects"]),
        global_attribute=int(s["global_attribute"]),
    )
    image = ImageTokens(tokens=np.array(rec["image_tokens"], dtype=np.int64), layout=tuple(rec["image_layout"]))
    present, coverage = {}, {}
    for name, c in rec["conditions"].items():
        kind = ModalityKind(name)
        present[kind] = TokenSequence(kind, np.array(c["tokens"], dtype=np.int64), tuple(c["layout"]))
        coverage[kind] = _mask_from_json(c["coverage"])
    return scene, image, ConditionSet(present=present, coverage=coverage)


def save_dataset(path, records):
    """records: iterable of (scene, image, conditions)."""
    with open(path, "w") as fh:
        for scene, image, conditions in records:
            fh.write(example_to_json(scene, image, conditions) + "\n")


def load_dataset(path):
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(example_from_json(line))
    return out
