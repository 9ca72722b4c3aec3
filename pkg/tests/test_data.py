"""Dataset I/O, patch extraction, and the synthetic generator."""

import warnings

import numpy as np
import pytest
from PIL import Image
from scipy import ndimage

from spanet.data import (
    DataError,
    Sample,
    SynthConfig,
    extract_patches,
    generate_synthetic,
    load_dataset,
    read_image,
    read_instance_map,
    relabel_contiguous,
    write_image,
    write_instance_map,
    write_sample,
)


def test_sample_validates_shapes():
    img = np.zeros((8, 8, 3), dtype=np.float32)
    inst = np.zeros((8, 8), dtype=np.int32)
    Sample(image=img, instances=inst, id="ok")
    with pytest.raises(DataError):
        Sample(image=img, instances=np.zeros((4, 4), dtype=np.int32), id="bad")
    with pytest.raises(DataError):
        Sample(image=np.zeros((8, 8), dtype=np.float32), instances=inst, id="bad")


def test_synth_config_validation():
    SynthConfig()
    with pytest.raises(DataError):
        SynthConfig(canvas=(100, 128))   # not divisible by 8
    with pytest.raises(DataError):
        SynthConfig(radius=(1.0, 5.0))   # radii below 2
    with pytest.raises(DataError):
        SynthConfig(n_nuclei=(5, 2))
    with pytest.raises(DataError):
        SynthConfig(clump_fraction=1.5)
    with pytest.raises(DataError):
        SynthConfig(clump_min_sep=0.0)


def test_image_round_trip_is_quantized_identity(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.random((16, 24, 3)).astype(np.float32)
    path = tmp_path / "img.png"
    write_image(img, path)
    back = read_image(path)
    assert back.shape == img.shape
    assert back.dtype == np.float32
    quantized = np.round(img * 255.0) / 255.0
    assert np.allclose(back, quantized, atol=1e-7)
    # a second round trip is exact
    write_image(back, path)
    assert np.array_equal(read_image(path), back)


def test_instance_map_round_trip_identity(tmp_path):
    rng = np.random.default_rng(1)
    for m in [rng.integers(0, 9, (20, 20)), np.zeros((8, 8), dtype=np.int64)]:
        path = tmp_path / "m.png"
        write_instance_map(m, path)
        back = read_instance_map(path)
        assert back.dtype == np.int32
        assert np.array_equal(back, m)


def test_instance_map_overflow_and_negative_errors(tmp_path):
    too_big = np.zeros((4, 4), dtype=np.int64)
    too_big[0, 0] = 65536
    with pytest.raises(DataError):
        write_instance_map(too_big, tmp_path / "x.png")
    negative = np.zeros((4, 4), dtype=np.int64)
    negative[0, 0] = -1
    with pytest.raises(DataError):
        write_instance_map(negative, tmp_path / "x.png")
    with pytest.raises(DataError):
        write_instance_map(np.zeros((4, 4, 2), dtype=np.int64), tmp_path / "x.png")
    # 65535 is the last representable id
    edge = np.full((4, 4), 65535, dtype=np.int64)
    write_instance_map(edge, tmp_path / "ok.png")
    assert read_instance_map(tmp_path / "ok.png").max() == 65535


def test_read_instance_map_rejects_8bit(tmp_path):
    Image.fromarray(np.zeros((4, 4), dtype=np.uint8)).save(tmp_path / "bad.png")
    with pytest.raises(DataError):
        read_instance_map(tmp_path / "bad.png")


def test_load_dataset_round_trips_written_samples(tmp_path):
    rng = np.random.default_rng(2)
    sample = Sample(
        image=rng.random((16, 16, 3)).astype(np.float32),
        instances=rng.integers(0, 3, (16, 16)).astype(np.int32),
        id="s01",
    )
    write_sample(sample, tmp_path)
    (tmp_path / "meta.csv").write_text("id,organ,split\ns01,breast,train\n")
    loaded = load_dataset(tmp_path)
    assert len(loaded) == 1
    assert loaded[0].id == "s01"
    assert loaded[0].organ_tag == "breast"
    assert np.array_equal(loaded[0].instances, sample.instances)


def test_load_dataset_empty_warns(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "masks").mkdir()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        assert load_dataset(tmp_path) == []
    assert any("no images" in str(w.message) for w in caught)


def test_load_dataset_errors_name_the_id(tmp_path):
    rng = np.random.default_rng(3)
    img = rng.random((8, 8, 3)).astype(np.float32)
    (tmp_path / "images").mkdir()
    (tmp_path / "masks").mkdir()
    write_image(img, tmp_path / "images" / "lonely.png")
    with pytest.raises(DataError, match="lonely"):
        load_dataset(tmp_path)
    write_instance_map(np.zeros((4, 4), dtype=np.int32), tmp_path / "masks" / "lonely.png")
    with pytest.raises(DataError, match="lonely"):
        load_dataset(tmp_path)   # shape mismatch


def test_load_dataset_requires_layout(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path / "missing")


def test_load_dataset_sorted_ids(tmp_path):
    rng = np.random.default_rng(4)
    for name in ("b", "a", "c"):
        write_sample(
            Sample(
                image=rng.random((8, 8, 3)).astype(np.float32),
                instances=np.zeros((8, 8), dtype=np.int32),
                id=name,
            ),
            tmp_path,
        )
    assert [s.id for s in load_dataset(tmp_path)] == ["a", "b", "c"]


def test_relabel_contiguous():
    m = np.array([[0, 5], [9, 5]])
    out = relabel_contiguous(m)
    assert out.tolist() == [[0, 1], [2, 1]]
    assert relabel_contiguous(np.zeros((3, 3), dtype=int)).tolist() == np.zeros((3, 3)).tolist()


def sample_with_grid(h, w, seed=0):
    rng = np.random.default_rng(seed)
    inst = np.zeros((h, w), dtype=np.int32)
    inst[2:6, 2:6] = 4
    inst[h - 6:h - 2, w - 6:w - 2] = 9
    return Sample(image=rng.random((h, w, 3)).astype(np.float32), instances=inst, id="g")


def test_extract_patches_window_count_1000():
    sample = sample_with_grid(1000, 1000)
    patches = extract_patches(sample, size=256, stride=256)
    assert len(patches) == 16


def test_extract_patches_covers_every_pixel():
    sample = sample_with_grid(40, 56)
    patches = extract_patches(sample, size=16, stride=8)
    hit = np.zeros((40, 56), dtype=bool)
    anchors_y = list(range(0, 40 - 16 + 1, 8)) + [40 - 16]
    anchors_x = list(range(0, 56 - 16 + 1, 8)) + [56 - 16]
    for y in anchors_y:
        for x in anchors_x:
            hit[y:y + 16, x:x + 16] = True
    assert hit.all()
    assert len(patches) == len(set(anchors_y)) * len(set(anchors_x))


def test_extract_patches_relabels_contiguously_and_keeps_empty():
    sample = sample_with_grid(64, 64)
    patches = extract_patches(sample, size=16, stride=16)
    saw_empty = False
    for img, inst in patches:
        assert img.shape == (16, 16, 3)
        ids = np.unique(inst)
        ids = ids[ids > 0]
        assert ids.tolist() == list(range(1, len(ids) + 1))
        saw_empty = saw_empty or not inst.any()
    assert saw_empty


def test_extract_patches_random_crops_need_rng():
    sample = sample_with_grid(64, 64)
    with pytest.raises(DataError):
        extract_patches(sample, size=16, n_random=2)
    rng = np.random.default_rng(5)
    patches = extract_patches(sample, size=16, n_random=3, rng=rng)
    assert len(patches) == len(extract_patches(sample, size=16)) + 3


def test_extract_patches_validation():
    sample = sample_with_grid(32, 32)
    with pytest.raises(DataError):
        extract_patches(sample, size=48)
    with pytest.raises(DataError):
        extract_patches(sample, size=12)   # not divisible by 8


def test_generate_synthetic_is_deterministic():
    a = generate_synthetic(SynthConfig(seed=11))
    b = generate_synthetic(SynthConfig(seed=11))
    assert np.array_equal(a.image, b.image)
    assert np.array_equal(a.instances, b.instances)
    assert a.id == b.id
    c = generate_synthetic(SynthConfig(seed=12))
    assert not np.array_equal(a.image, c.image)


def test_generate_synthetic_invariants():
    s = generate_synthetic(SynthConfig(seed=3))
    assert s.image.dtype == np.float32
    assert s.image.min() >= 0.0 and s.image.max() <= 1.0
    assert s.image.shape[:2] == s.instances.shape
    ids = np.unique(s.instances)
    ids = ids[ids > 0]
    assert ids.tolist() == list(range(1, len(ids) + 1))
    # every surviving instance clears the small-object floor
    for n in ids:
        assert (s.instances == n).sum() >= 5


def test_generate_synthetic_zero_fraction_keeps_nuclei_apart():
    cfg = SynthConfig(seed=7, clump_fraction=0.0)
    s = generate_synthetic(cfg)
    ids = np.unique(s.instances)
    ids = ids[ids > 0]
    assert len(ids) >= 2
    for n in ids:
        grown = ndimage.binary_dilation(s.instances == n, np.ones((3, 3), dtype=bool))
        others = (s.instances > 0) & (s.instances != n)
        assert not (grown & others).any()


def test_generate_synthetic_builds_touching_clumps():
    s = generate_synthetic(SynthConfig(seed=1, clump_fraction=1.0, n_nuclei=(10, 10)))
    mask = s.instances > 0
    labels, n_comp = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    n_inst = len(np.unique(s.instances)) - 1
    assert n_comp < n_inst   # at least one component holds several nuclei


def test_generate_synthetic_zero_nuclei():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        s = generate_synthetic(SynthConfig(seed=0, n_nuclei=(0, 0)))
    assert not s.instances.any()
    assert s.image.shape == (128, 128, 3)
