import numpy as np
import pytest

from tokenmixer.data import (
    MODALITY_ORDER,
    ConditionSet,
    Corpus,
    DatasetConfig,
    ModalityKind,
    SceneSpec,
    TokenSequence,
    decode_bbox_tokens,
    decode_image_tokens,
    derive_image_tokens,
    derive_modality,
    dominant_attribute,
    draw_coverage,
    example_from_json,
    example_to_json,
    generate_scene,
    make_example,
    render_scene,
    sketch_map,
)
from tokenmixer.numerics import RNG_DATA, RngState

KNOBS = DatasetConfig()


def rng(*ids):
    return RngState(99).stream(RNG_DATA, *ids)


def test_render_later_objects_overwrite():
    objs = ((1, (0, 0), (3, 3)), (2, (2, 2), (5, 5)))
    grid = render_scene(8, 8, objs)
    assert grid[3, 3] == 2 and grid[0, 0] == 1 and grid[7, 7] == 0


def test_scene_reconstructible_from_objects():
    scene = generate_scene(rng(0), KNOBS)
    np.testing.assert_array_equal(scene.grid, render_scene(KNOBS.grid_h, KNOBS.grid_w, scene.objects))


def test_scene_rect_outside_grid_rejected():
    with pytest.raises(ValueError):
        SceneSpec(grid=np.zeros((4, 4), dtype=np.int16), objects=((1, (0, 0), (4, 2)),), global_attribute=1)


def test_zero_objects_uniform_background():
    knobs = DatasetConfig(min_objects=0, max_objects=0)
    scene = generate_scene(rng(1), knobs)
    assert (scene.grid == 0).all() and scene.objects == () and scene.global_attribute == 0


def test_generate_scene_deterministic():
    a = generate_scene(rng(2), KNOBS)
    b = generate_scene(rng(2), KNOBS)
    np.testing.assert_array_equal(a.grid, b.grid)
    assert a.objects == b.objects


def test_dominant_attribute_histogram():
    counts = np.zeros(KNOBS.palette, dtype=int)
    n = 10_000
    for i in range(n):
        counts[generate_scene(rng(3, i), KNOBS).global_attribute] += 1
    for cat in range(1, KNOBS.palette):
        assert counts[cat] >= 0.02 * n, f"category {cat} dominant in only {counts[cat]}/{n}"


def test_uniform_scene_sketch_all_zero():
    scene = SceneSpec(grid=np.full((8, 8), 3, dtype=np.int16), objects=((3, (0, 0), (7, 7)),), global_attribute=3)
    seq = derive_modality(scene, ModalityKind.SKETCH, knobs=KNOBS)
    assert (seq.tokens == 0).all()


def test_full_grid_object_segmentation_constant():
    scene = SceneSpec(grid=np.full((8, 8), 4, dtype=np.int16), objects=((4, (0, 0), (7, 7)),), global_attribute=4)
    seq = derive_modality(scene, ModalityKind.SEGMENTATION, knobs=KNOBS)
    assert (seq.tokens == 4).all()


def test_segmentation_unknown_outside_coverage():
    scene = generate_scene(rng(4), KNOBS)
    cov = np.zeros((8, 8), dtype=bool)
    cov[:4] = True
    seq = derive_modality(scene, ModalityKind.SEGMENTATION, cov, KNOBS)
    toks = seq.tokens.reshape(8, 8)
    assert (toks[4:] == KNOBS.seg_unknown()).all()
    np.testing.assert_array_equal(toks[:4], scene.grid[:4])


def test_bbox_round_trip():
    scene = generate_scene(rng(5), KNOBS)
    seq = derive_modality(scene, ModalityKind.BBOX, knobs=KNOBS)
    assert decode_bbox_tokens(seq, KNOBS) == list(scene.objects)


def test_bbox_partial_coverage_keeps_fully_covered_objects():
    objs = ((1, (0, 0), (1, 1)), (2, (5, 5), (7, 7)))
    scene = SceneSpec(grid=render_scene(8, 8, objs), objects=objs, global_attribute=2)
    cov = np.zeros((8, 8), dtype=bool)
    cov[:3, :3] = True
    seq = derive_modality(scene, ModalityKind.BBOX, cov, KNOBS)
    assert seq.layout == (1,)
    assert decode_bbox_tokens(seq, KNOBS) == [objs[0]]


def test_text_token_is_dominant_attribute():
    scene = generate_scene(rng(6), KNOBS)
    seq = derive_modality(scene, ModalityKind.TEXT, knobs=KNOBS)
    assert seq.tokens.tolist() == [scene.global_attribute]
    assert seq.tokens[0] == dominant_attribute(scene.grid)


def test_image_tokens_exact_bijective():
    scene = generate_scene(rng(7), KNOBS)
    image = derive_image_tokens(scene)
    assert image.exact and image.tokens.max() < KNOBS.image_vocab()
    np.testing.assert_array_equal(decode_image_tokens(image.tokens, 8, 8), scene.grid)


def test_token_sequence_validation():
    with pytest.raises(ValueError):
        TokenSequence(ModalityKind.TEXT, np.array([1, 2]), (2,))
    with pytest.raises(ValueError):
        TokenSequence(ModalityKind.BBOX, np.array([1, 2]), (1,))
    with pytest.raises(ValueError):
        TokenSequence(ModalityKind.SEGMENTATION, np.zeros(5, dtype=int), (2, 3))


def test_make_example_empty_subset():
    scene = generate_scene(rng(8), KNOBS)
    image, conds = make_example(scene, set(), rng(8, 1), KNOBS)
    assert conds.present == {} and conds.kinds() == []
    assert len(image.tokens) == KNOBS.cells


def test_make_example_full_subset_deterministic():
    scene = generate_scene(rng(9), KNOBS)
    _, a = make_example(scene, MODALITY_ORDER, rng(9, 1), KNOBS)
    _, b = make_example(scene, MODALITY_ORDER, rng(9, 1), KNOBS)
    for kind in MODALITY_ORDER:
        np.testing.assert_array_equal(a.present[kind].tokens, b.present[kind].tokens)
        np.testing.assert_array_equal(a.coverage[kind], b.coverage[kind])


def test_coverage_area_fraction_in_range():
    for i in range(200):
        mask = draw_coverage(rng(10, i), KNOBS)
        frac = mask.mean()
        assert KNOBS.coverage_min <= frac <= KNOBS.coverage_max


def test_derivations_are_pure():
    scene = generate_scene(rng(11), KNOBS)
    cov = np.ones((8, 8), dtype=bool)
    for kind in MODALITY_ORDER:
        a = derive_modality(scene, kind, cov, KNOBS)
        b = derive_modality(scene, kind, cov, KNOBS)
        np.testing.assert_array_equal(a.tokens, b.tokens)


def test_conditions_consistent_with_scene_on_coverage():
    for i in range(20):
        scene = generate_scene(rng(12, i), KNOBS)
        _, conds = make_example(scene, MODALITY_ORDER, rng(12, i, 1), KNOBS)
        seg = conds.present[ModalityKind.SEGMENTATION].tokens.reshape(8, 8)
        cov = conds.coverage[ModalityKind.SEGMENTATION]
        np.testing.assert_array_equal(seg[cov], scene.grid[cov])
        sk = conds.present[ModalityKind.SKETCH].tokens.reshape(8, 8)
        covk = conds.coverage[ModalityKind.SKETCH]
        np.testing.assert_array_equal(sk[covk], sketch_map(scene.grid)[covk])


def test_restricted_subset():
    scene = generate_scene(rng(13), KNOBS)
    _, conds = make_example(scene, MODALITY_ORDER, rng(13, 1), KNOBS)
    sub = conds.restricted([ModalityKind.TEXT, ModalityKind.SKETCH])
    assert sub.kinds() == [ModalityKind.TEXT, ModalityKind.SKETCH]


def test_json_round_trip():
    scene = generate_scene(rng(14), KNOBS)
    image, conds = make_example(scene, MODALITY_ORDER, rng(14, 1), KNOBS)
    line = example_to_json(scene, image, conds)
    scene2, image2, conds2 = example_from_json(line)
    np.testing.assert_array_equal(scene.grid, scene2.grid)
    assert scene.objects == scene2.objects
    np.testing.assert_array_equal(image.tokens, image2.tokens)
    for kind in MODALITY_ORDER:
        np.testing.assert_array_equal(conds.present[kind].tokens, conds2.present[kind].tokens)
        np.testing.assert_array_equal(conds.coverage[kind], conds2.coverage[kind])


def test_corpus_batches():
    corpus = Corpus(seed=5, size=12, knobs=KNOBS)
    batch = corpus.batch(np.arange(4))
    assert batch["image"].shape == (4, 64)
    assert batch[ModalityKind.TEXT].shape == (4, 1)
    assert batch[ModalityKind.BBOX].shape == (4, 3 * KNOBS.max_objects)
    assert (batch["bbox_len"] % 3 == 0).all()
    pad = KNOBS.bbox_pad()
    for i in range(4):
        row = batch[ModalityKind.BBOX][i]
        n = batch["bbox_len"][i]
        assert (row[n:] == pad).all()
        assert (row[:n] != pad).all()
