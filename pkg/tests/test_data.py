import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image
from scipy import ndimage

from sonarsam.data import (
    SynthSpec,
    augment,
    boxes_from_mask,
    flip_sample,
    jitter,
    largest_remainder,
    load_dataset,
    parse_synth_spec,
    preprocess,
    split_dataset,
    synth_generate,
    write_dataset,
)
from sonarsam.errors import ConfigurationError, IngestionError, ParseError, UsageError, ValidationError


@pytest.fixture(scope="module")
def samples():
    return synth_generate(SynthSpec(), seed=0, n=12)


def bbox_by_scan(mask):
    """Tight pixel-edge box found by scanning rows and columns."""
    rows = [y for y in range(mask.shape[0]) if mask[y].any()]
    cols = [x for x in range(mask.shape[1]) if mask[:, x].any()]
    return cols[0], rows[0], cols[-1] + 1, rows[-1] + 1


def test_generation_is_deterministic():
    a = synth_generate(SynthSpec(), 0, 2)
    b = synth_generate(SynthSpec(), 0, 2)
    for x, y in zip(a, b):
        assert np.array_equal(x.image, y.image) and np.array_equal(x.label_map, y.label_map)
        assert [o.box for o in x.objects] == [o.box for o in y.objects]


def test_generation_per_index_independent():
    whole = synth_generate(SynthSpec(), 3, 4)
    tail = synth_generate(SynthSpec(), 3, 2, start=2)
    assert np.array_equal(whole[3].image, tail[1].image)


def test_objects_brighter_than_background(samples):
    for s in samples:
        fg = s.label_map > 0
        assert s.image[fg].mean() > s.image[~fg].mean()


def test_boxes_are_tight_and_masks_consistent(samples):
    for s in samples:
        assert s.objects
        union = np.zeros_like(s.label_map)
        for o in s.objects:
            assert o.box == bbox_by_scan(o.mask)
            assert (s.label_map[o.mask] == o.class_id).all()
            union[o.mask] = o.class_id
        assert np.array_equal(union, s.label_map)


def test_objects_are_single_separated_components(samples):
    for s in samples:
        labels, n = ndimage.label(s.label_map > 0, structure=np.ones((3, 3)))
        assert n == len(s.objects)


def test_synth_spec_validation():
    with pytest.raises(ConfigurationError):
        SynthSpec(num_classes=12)
    with pytest.raises(ConfigurationError):
        SynthSpec(shadow_prob=1.5)
    with pytest.raises(UsageError):
        synth_generate(SynthSpec(), 0, 0)


def test_four_class_spec_uses_first_classes():
    s = synth_generate(SynthSpec(num_classes=4), 1, 10)
    assert max(int(x.label_map.max()) for x in s) <= 4
    assert SynthSpec(num_classes=4).class_names == ("bottle", "can", "chain", "drink-carton")


def test_parse_synth_spec():
    spec = parse_synth_spec("num_classes = 4\nobject_size = 20, 30\n# comment\nspeckle=0.1\n")
    assert spec == SynthSpec(num_classes=4, object_size=(20.0, 30.0), speckle=0.1)
    with pytest.raises(ParseError, match="line 2"):
        parse_synth_spec("speckle = 0.1\ncolour = red\n")


def test_round_trip_through_disk(tmp_path, samples):
    write_dataset(samples, tmp_path)
    loaded = {s.sample_id: s for s in load_dataset(tmp_path)}
    assert set(loaded) == {s.sample_id for s in samples}
    for s in samples:
        t = loaded[s.sample_id]
        assert np.array_equal(t.label_map, s.label_map)
        assert np.array_equal(t.image, s.image)
        assert [(o.class_id, o.box) for o in t.objects] == [(o.class_id, o.box) for o in s.objects]
        for a, b in zip(t.objects, s.objects):
            assert np.array_equal(a.mask, b.mask)


def _write_one(root, mask, classes=("a", "b", "c")):
    (root / "images").mkdir(parents=True)
    (root / "masks").mkdir()
    (root / "classes.txt").write_text("\n".join(classes) + "\n")
    Image.fromarray(np.zeros(mask.shape, np.uint8)).save(root / "images" / "x.png")
    Image.fromarray(mask.astype(np.uint8)).save(root / "masks" / "x.png")


def test_load_empty_mask(tmp_path):
    _write_one(tmp_path, np.zeros((16, 16)))
    (s,) = load_dataset(tmp_path)
    assert s.objects == ()


def test_load_rectangle_gives_one_object(tmp_path):
    mask = np.zeros((20, 20))
    mask[5:9, 7:13] = 3  # 4 rows x 6 columns
    _write_one(tmp_path, mask)
    (s,) = load_dataset(tmp_path)
    (o,) = s.objects
    assert o.class_id == 3
    assert o.box == (7, 5, 13, 9)


def test_load_two_blobs_gives_two_objects(tmp_path):
    mask = np.zeros((20, 20))
    mask[2:5, 2:5] = 1
    mask[10:14, 12:15] = 1
    _write_one(tmp_path, mask)
    (s,) = load_dataset(tmp_path)
    assert len(s.objects) == 2 and all(o.class_id == 1 for o in s.objects)


def test_load_errors(tmp_path):
    mask = np.zeros((8, 8))
    mask[1, 1] = 4
    _write_one(tmp_path / "bad", mask)
    with pytest.raises(ValidationError):
        load_dataset(tmp_path / "bad")
    _write_one(tmp_path / "missing", np.zeros((8, 8)))
    (tmp_path / "missing" / "masks" / "x.png").unlink()
    with pytest.raises(IngestionError, match="x.png"):
        load_dataset(tmp_path / "missing")


@pytest.mark.parametrize("n, sizes", [(10, [6, 2, 2]), (1868, [1121, 374, 373]), (5, [3, 1, 1]), (7, [4, 2, 1])])
def test_largest_remainder(n, sizes):
    assert largest_remainder(n) == sizes


@settings(max_examples=40, deadline=None)
@given(st.integers(5, 300), st.integers(0, 2**31))
def test_split_disjoint_exhaustive_deterministic(n, seed):
    ids = list(range(n))
    sp = split_dataset(ids, seed)
    parts = [set(sp.train), set(sp.val), set(sp.test)]
    assert sum(map(len, parts)) == n and set().union(*parts) == set(ids)
    assert [len(p) for p in parts] == largest_remainder(n)
    assert split_dataset(ids, seed) == sp


def test_split_too_few():
    with pytest.raises(UsageError):
        split_dataset([1, 2, 3, 4], 0)


def test_preprocess_replicates_and_resizes(samples):
    small = synth_generate(SynthSpec(image_size=64), 0, 1)[0]
    out = preprocess(small, 128)
    assert out.image.shape == (3, 128, 128) and out.label_map.shape == (128, 128)
    assert np.array_equal(out.image[0], out.image[1]) and np.array_equal(out.image[1], out.image[2])
    for a, b in zip(small.objects, out.objects):
        assert b.box == tuple(2 * v for v in a.box)
        assert bbox_by_scan(b.mask) == b.box


def test_preprocess_box_scaling_example():
    from sonarsam.data import Sample, SampleObject

    mask = np.zeros((64, 64), bool)
    mask[10:20, 10:20] = True
    s = Sample("x", np.zeros((64, 64), np.float32), mask.astype(np.uint8), (SampleObject(1, (10, 10, 20, 20), mask),))
    assert preprocess(s, 128).objects[0].box == (20, 20, 40, 40)


def test_flip_is_involution_and_keeps_boxes_tight(samples):
    s = samples[0]
    f = flip_sample(s)
    for o in f.objects:
        assert o.box == bbox_by_scan(o.mask)
    ff = flip_sample(f)
    assert np.array_equal(ff.image, s.image) and np.array_equal(ff.label_map, s.label_map)
    assert [o.box for o in ff.objects] == [o.box for o in s.objects]


def test_identity_jitter_and_clamp():
    img = np.random.default_rng(0).uniform(0, 1, (8, 8)).astype(np.float32)
    assert np.array_equal(jitter(img, 1.0, 0.0), img)
    out = jitter(img, 1.2, 0.1)
    assert out.min() >= 0 and out.max() <= 1


def test_augment_ranges(samples):
    rng = np.random.default_rng(0)
    s = preprocess(samples[1], 128)
    flips = 0
    for _ in range(40):
        a = augment(s, rng)
        flipped = not np.array_equal(a.label_map, s.label_map)
        flips += flipped
        base = s.image[..., ::-1] if flipped else s.image
        fg = base > 0.05
        ratio = a.image[fg & (a.image > 0) & (a.image < 1)] - base[fg & (a.image > 0) & (a.image < 1)]
        assert np.isfinite(ratio).all()
        assert a.image.min() >= 0 and a.image.max() <= 1
    assert 8 <= flips <= 32


def test_boxes_from_mask():
    assert boxes_from_mask(np.zeros((6, 6), bool)) == []
    m = np.zeros((10, 10), bool)
    m[2:5, 3:8] = True
    assert boxes_from_mask(m) == [(3, 2, 8, 5)]
    diag = np.zeros((10, 10), bool)
    diag[1:3, 1:3] = True
    diag[3:5, 3:5] = True  # touches only at a corner
    assert boxes_from_mask(diag) == [(1, 1, 5, 5)]
    speck = np.zeros((10, 10), bool)
    speck[0, 0] = speck[0, 1] = speck[1, 0] = True
    assert boxes_from_mask(speck) == []
