import math
import os

import numpy as np
import pytest
from oracles import naive_rle_encode

from shipgate.dataset import (
    AnnotationRecord, BBox, DatasetManifest, binary_label, dataset_stats, decode_rle,
    diagonal_histogram, downsample, encode_rle, format_rle, lower_median, mask_to_bbox,
    parse_rle, read_image, read_manifest, read_ppm, read_raw, rle_to_bbox, split, write_manifest,
    write_ppm,
)
from shipgate.exceptions import InvalidInputError, MissingFileError, RecordFormatError

DATA = os.environ.get("SHIPGATE_DATA")


def test_empty_rle_decodes_to_zero_mask():
    assert not decode_rle("", 4, 4).any()
    assert encode_rle(np.zeros((4, 4))) == ()


def test_hand_drawn_4x4():
    mask = decode_rle([(1, 3)], 4, 4)
    expected = np.zeros((4, 4), dtype=np.uint8)
    expected[0:3, 0] = 1
    np.testing.assert_array_equal(mask, expected)
    assert encode_rle(mask) == ((1, 3),)


def test_column_major_second_column():
    # pixel 5 on a 4-tall image is the top of column 1
    mask = decode_rle("5 2", 4, 4)
    assert mask[0, 1] == mask[1, 1] == 1
    assert mask.sum() == 2


def test_rle_round_trip_random_masks():
    rng = np.random.default_rng(0)
    for _ in range(500):
        h, w = rng.integers(1, 12, size=2)
        mask = (rng.random((h, w)) < rng.random()).astype(np.uint8)
        rle = encode_rle(mask)
        assert rle == naive_rle_encode(mask)
        np.testing.assert_array_equal(decode_rle(rle, w, h), mask)
        assert parse_rle(format_rle(rle)) == rle
        if mask.any():
            assert rle_to_bbox(rle, w, h) == mask_to_bbox(mask)


@pytest.mark.parametrize("text", ["1 3 2 2", "3 2 1 1", "15 3", "0 2", "1"])
def test_invalid_runs_rejected(text):
    with pytest.raises(InvalidInputError):
        decode_rle(text, 4, 4)


def test_rle_to_bbox_wrapping_run():
    # run covers the bottom of column 0 and the top of column 1
    assert rle_to_bbox("4 2", 4, 4) == BBox(0, 0, 1, 3)


def test_bbox_conventions():
    b = mask_to_bbox(decode_rle([(5 * 768 + 7 + 1, 1)]))
    assert b.as_tuple() == (5, 7, 5, 7)
    assert b.diagonal == pytest.approx(math.sqrt(2))
    full = mask_to_bbox(np.ones((768, 768)))
    assert full.diagonal == pytest.approx(math.hypot(768, 768))
    assert round(full.diagonal) == 1086
    assert BBox(0, 0, 27, 32).diagonal == pytest.approx(43.27, abs=1e-2)
    assert BBox(0, 0, 2, 3).diagonal == 5.0


def test_empty_mask_has_no_box():
    with pytest.raises(InvalidInputError):
        mask_to_bbox(np.zeros((3, 3)))


def test_union_bbox_contains_parts():
    rng = np.random.default_rng(5)
    for _ in range(100):
        a = rng.random((10, 10)) < 0.1
        b = rng.random((10, 10)) < 0.1
        if not (a.any() and b.any()):
            continue
        u = mask_to_bbox(a | b)
        for part in (mask_to_bbox(a), mask_to_bbox(b)):
            assert u.x_min <= part.x_min and u.y_min <= part.y_min
            assert u.x_max >= part.x_max and u.y_max >= part.y_max


def test_binary_label():
    assert binary_label([]) == 0
    assert binary_label([AnnotationRecord("a")]) == 0
    assert binary_label([AnnotationRecord("a"), AnnotationRecord("a", ((1, 2),))]) == 1


def _manifest(n, positives=0):
    recs = [AnnotationRecord(f"img{i:05d}.jpg", ((1, 12),) if i < positives else ()) for i in range(n)]
    return DatasetManifest(recs)


def test_split_exact_small():
    s = split(_manifest(10), 0.8, seed=3)
    parts = list(s.assignments.values())
    assert parts.count("train") == 8 and parts.count("val") == 2


def test_split_ignores_record_order():
    m = _manifest(200)
    shuffled = DatasetManifest(list(np.random.default_rng(1).permutation(m.records)))
    assert split(m, 0.8, 9).assignments == split(shuffled, 0.8, 9).assignments
    assert split(m, 0.8, 9).assignments != split(m, 0.8, 10).assignments


def test_split_full_scale():
    s = split(_manifest(192555), 0.8, seed=0)
    parts = list(s.assignments.values())
    assert abs(parts.count("val") - 38511) <= 1
    assert parts.count("train") + parts.count("val") == 192555


def test_split_rejects_bad_ratio():
    with pytest.raises(InvalidInputError):
        split(_manifest(3), 1.0)


def test_subset_requires_split():
    with pytest.raises(InvalidInputError):
        _manifest(3).subset("val")
    s = split(_manifest(10), 0.8, 0)
    assert len(s.subset("val").image_ids()) == 2


def test_stats_fraction():
    stats = dataset_stats(_manifest(1000, positives=221))
    assert stats["ship_fraction"] == pytest.approx(0.221)
    assert stats["n_boxes"] == 221


def test_stats_single_box_median():
    m = DatasetManifest([AnnotationRecord("a", ((1, 4), (769, 4), (1537, 4)))])
    stats = dataset_stats(m)
    assert stats["median_diagonal"] == 5.0
    assert stats["mean_area_ratio"] == pytest.approx(12 / 768**2)


def test_stats_empty_manifest():
    with pytest.raises(InvalidInputError):
        dataset_stats(DatasetManifest([]))


def test_lower_median():
    assert lower_median([4, 1, 3, 2]) == 2
    assert lower_median([5]) == 5


def test_histogram_counts_every_box():
    m = _manifest(30, positives=30)
    hist = diagonal_histogram(m, 10.0)
    assert sum(c for _, _, c in hist) == 30


def test_manifest_round_trip(tmp_path):
    m = split(_manifest(12, positives=4), 0.75, 2)
    path = write_manifest(m, tmp_path / "ann.csv")
    back = read_manifest(path)
    assert back.records == m.records
    assert back.assignments == m.assignments and back.seed == 2


def test_manifest_kaggle_header(tmp_path):
    p = tmp_path / "k.csv"
    p.write_text("ImageId,EncodedPixels\na.jpg,1 3\nb.jpg,\na.jpg,10 2\n")
    m = read_manifest(p)
    assert m.labels() == {"a.jpg": 1, "b.jpg": 0}
    assert len(m.boxes()["a.jpg"]) == 2


def test_manifest_errors(tmp_path):
    with pytest.raises(MissingFileError):
        read_manifest(tmp_path / "missing.csv")
    p = tmp_path / "bad.csv"
    p.write_text("image_id,encoded_pixels\na.jpg,1 3\nb.jpg,5 x\n")
    with pytest.raises(RecordFormatError) as err:
        read_manifest(p)
    assert err.value.line == 3


def test_ppm_and_raw_io(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(3, 6, 6), dtype=np.uint8)
    np.testing.assert_array_equal(read_ppm(write_ppm(tmp_path / "a.ppm", img)), img)
    (tmp_path / "b.raw").write_bytes(img.tobytes())
    np.testing.assert_array_equal(read_raw(tmp_path / "b.raw"), img)
    np.testing.assert_array_equal(read_image(tmp_path / "b.raw"), img)
    (tmp_path / "c.png").write_bytes(b"\x89PNG")
    with pytest.raises(InvalidInputError):
        read_image(tmp_path / "c.png")


def test_ppm_with_comment(tmp_path):
    p = tmp_path / "c.ppm"
    p.write_bytes(b"P6\n# made by hand\n2 1\n255\n" + bytes([1, 2, 3, 4, 5, 6]))
    assert read_ppm(p)[:, 0, 1].tolist() == [4, 5, 6]


def test_downsample_box_filter():
    img = np.arange(3 * 6 * 6, dtype=np.uint8).reshape(3, 6, 6)
    out = downsample(img, 3)
    assert out.shape == (3, 2, 2)
    assert out[0, 0, 0] == int(np.rint(img[0, :3, :3].mean()))
    # a block mean of 1.5 rounds half to even
    tie = np.zeros((1, 2, 2), dtype=np.uint8)
    tie[0, 0, :] = [1, 2]
    tie[0, 1, :] = [1, 2]
    assert downsample(tie, 2)[0, 0, 0] == 2
    with pytest.raises(InvalidInputError):
        downsample(np.zeros((3, 5, 5)), 3)


@pytest.mark.skipif(not DATA, reason="set SHIPGATE_DATA to the annotation CSV")
def test_real_dataset_table_values():
    stats = dataset_stats(read_manifest(DATA))
    assert stats["n_boxes"] == 81723
    assert round(stats["median_diagonal"], 2) == 43.19
