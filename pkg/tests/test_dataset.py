import logging
from collections import Counter

import numpy as np
import pytest

from photosketch.dataset import (AnnotationRecord, Benchmark, BenchmarkFormatError, BenchmarkPair, Corpus,
                                 ImagePair, load_benchmark, load_corpus, read_raw_annotations, sample_epoch_pairs,
                                 write_benchmark, write_raw_annotations)


def test_fixture_counts(fixture_corpus):
    root, _ = fixture_corpus
    corpus = load_corpus(root, "train")
    assert len(corpus) == 20
    assert corpus.categories == ["cat000", "cat001"]
    p = corpus[0]
    assert p.photo.shape == p.sketch.shape == (256, 256, 3)
    assert 0 <= p.photo.min() and p.photo.max() <= 1
    assert p.sketch_id.rpartition("-")[0] == p.photo_id
    assert p.pair_id == f"{p.category}/{p.sketch_id}"


def test_missing_split_is_fatal(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_corpus(tmp_path, "test")


def test_empty_corpus_warns(tmp_path, caplog):
    (tmp_path / "train" / "photo").mkdir(parents=True)
    (tmp_path / "train" / "sketch").mkdir(parents=True)
    with caplog.at_level(logging.WARNING):
        assert len(load_corpus(tmp_path, "train")) == 0
    assert "no photo/sketch pairs" in caplog.text


def test_orphan_sketch_skipped(fixture_corpus, tmp_path, caplog):
    import shutil
    root, _ = fixture_corpus
    shutil.copytree(root, tmp_path / "c")
    src = next((tmp_path / "c" / "train" / "sketch" / "cat000").glob("*.png"))
    shutil.copy(src, src.parent / "ghost_p999-1.png")
    with caplog.at_level(logging.WARNING):
        corpus = load_corpus(tmp_path / "c", "train")
    assert len(corpus) == 20 and "ghost_p999-1" in caplog.text


def test_exclusion_list(fixture_corpus, tmp_path):
    root, _ = fixture_corpus
    ex = tmp_path / "ex.txt"
    ex.write_text("# off-target\ncat000_p000-1\n")
    assert len(load_corpus(root, "train", exclude=ex)) == 19


def _fake(photo, k, cat="c"):
    return ImagePair(photo, f"{photo}-{k}", cat)


def test_epoch_sampler_frequencies():
    corpus = Corpus([_fake("a", k) for k in range(1, 6)])
    seen = Counter(sample_epoch_pairs(corpus, seed)[0].sketch_id for seed in range(100))
    assert len(seen) == 5 and min(seen.values()) > 0


def test_epoch_sampler_forced_and_length():
    corpus = Corpus([_fake("a", 1)])
    assert all(sample_epoch_pairs(corpus, 0, e)[0].sketch_id == "a-1" for e in range(5))
    big = Corpus([_fake(f"p{i}", k) for i in range(10) for k in (1, 2)])
    out = sample_epoch_pairs(big, 3, 7)
    assert len(out) == 10 and len({p.photo_id for p in out}) == 10
    assert [p.sketch_id for p in out] == [p.sketch_id for p in sample_epoch_pairs(big, 3, 7)]


def test_photo_without_sketch_excluded(caplog):
    corpus = Corpus([_fake("a", 1)], photos={"a": ("c", None), "b": ("c", None)})
    with caplog.at_level(logging.WARNING):
        assert len(sample_epoch_pairs(corpus, 0)) == 1
    assert "b" in caplog.text


def test_annotation_bounds():
    with pytest.raises(ValueError):
        AnnotationRecord("c/p-1", 0, (10, 10), (300, 3), "a")
    with pytest.raises(ValueError):
        AnnotationRecord("c/p-1", 8, (10, 10), (3, 3), "a")


def _bench(n=3, seed=0):
    rng = np.random.default_rng(seed)
    return [BenchmarkPair(f"c{i % 2}/p{i}-1", rng.uniform(0, 255, (8, 2)), rng.uniform(0, 255, (8, 2)))
            for i in range(n)]


def test_benchmark_roundtrip(tmp_path):
    pairs = _bench(5)
    write_benchmark(tmp_path / "b.csv", pairs)
    back = load_benchmark(tmp_path / "b.csv")
    assert len(back) == 5
    for p in pairs:
        assert np.array_equal(back[p.pair_id].sketch_keypoints, p.sketch_keypoints)
        assert np.array_equal(back[p.pair_id].photo_keypoints_gt, p.photo_keypoints_gt)


def test_malformed_row_isolated(tmp_path, caplog):
    pairs = _bench(3)
    path = tmp_path / "b.csv"
    write_benchmark(path, pairs)
    lines = path.read_text().splitlines()
    bad = lines[1].split(",")
    bad[2] = "oops"
    lines[1] = ",".join(bad)
    path.write_text("\n".join(lines) + "\n")
    with caplog.at_level(logging.ERROR):
        b = load_benchmark(path)
    assert len(b) == 2 and bad[0] in b.rejected and bad[0] in caplog.text


def test_wrong_keypoint_count_rejected(tmp_path):
    path = tmp_path / "b.csv"
    write_benchmark(path, _bench(2))
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-1]) + "\n")  # drop the last keypoint of the last pair
    b = load_benchmark(path)
    assert len(b) == 1 and len(b.rejected) == 1


def test_missing_columns(tmp_path):
    path = tmp_path / "b.csv"
    path.write_text("pair_id,x\n")
    with pytest.raises(BenchmarkFormatError):
        load_benchmark(path)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_benchmark(tmp_path / "nope.csv")


def test_raw_roundtrip(tmp_path):
    recs = [AnnotationRecord("c/p-1", k, (1.5, 2.25), (3.0 + a, 4.0), f"a{a}") for k in range(8) for a in range(3)]
    write_raw_annotations(tmp_path / "r.csv", recs)
    back, bad = read_raw_annotations(tmp_path / "r.csv")
    assert back == recs and not bad


def test_benchmark_restrict():
    b = Benchmark(_bench(4))
    assert b.categories == ["c0", "c1"]
    assert {p.category for p in b.restrict(["c1"])} == {"c1"}
