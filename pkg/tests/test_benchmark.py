import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image, ImageDraw
from scipy import ndimage

from oracles import aggregate_reference, flood_fill_count
from photosketch.benchmark import (PseudoPart, SegmentationError, aggregate_annotations, cluster_pseudo_parts,
                                   place_keypoints, propose_keypoints, segment_sketch)
from photosketch.dataset import AnnotationRecord


def _canvas(draw_fn, side=128):
    im = Image.new("L", (side, side), 255)
    draw_fn(ImageDraw.Draw(im))
    a = np.asarray(im, dtype=np.float32) / 255
    return np.repeat(a[..., None], 3, axis=2)


def test_closed_circle_fills_to_disk():
    sk = _canvas(lambda d: d.ellipse([30, 30, 90, 90], outline=0, width=2))
    m = segment_sketch(sk)
    assert m.dilation_rounds_used == 0
    yy, xx = np.mgrid[:128, :128]
    inside = (xx - 60) ** 2 + (yy - 60) ** 2 < 25**2
    assert m.mask[inside].all()
    assert flood_fill_count(m.mask) == 1


def test_gapped_circle_needs_dilation():
    # two arcs with 2-px gaps
    sk = _canvas(lambda d: (d.arc([30, 30, 90, 90], 3, 177, fill=0, width=2),
                            d.arc([30, 30, 90, 90], 183, 357, fill=0, width=2)))
    m = segment_sketch(sk)
    assert m.dilation_rounds_used >= 1
    assert flood_fill_count(m.mask) == 1
    # oracle: close the gaps by hand, then flood-fill
    closed = _canvas(lambda d: d.ellipse([30, 30, 90, 90], outline=0, width=2))[..., 0] < 0.5
    disk = ndimage.binary_fill_holes(closed)
    inter = (m.mask & disk).sum() / (m.mask | disk).sum()
    assert inter > 0.95


def test_blank_sketch_errors():
    with pytest.raises(SegmentationError):
        segment_sketch(np.ones((32, 32, 3)))


def test_round_cap_error_has_diagnostics():
    sk = _canvas(lambda d: (d.ellipse([5, 5, 20, 20], outline=0), d.ellipse([100, 100, 120, 120], outline=0)))
    with pytest.raises(SegmentationError, match="components"):
        segment_sketch(sk, max_rounds=3)


def _connected(part: PseudoPart, shape) -> bool:
    m = np.zeros(shape, bool)
    m[part.pixels[:, 1], part.pixels[:, 0]] = True
    return flood_fill_count(m) == 1


def test_square_parts_balanced_and_connected():
    mask = np.zeros((100, 100), bool)
    mask[18:82, 18:82] = True
    parts = cluster_pseudo_parts(mask, 8, seed=0)
    assert len(parts) == 8
    sizes = [len(p.pixels) for p in parts]
    assert max(sizes) / min(sizes) < 3
    assert all(_connected(p, mask.shape) for p in parts)
    allpx = np.concatenate([p.pixels for p in parts])
    assert len(allpx) == mask.sum() and len({tuple(x) for x in allpx}) == mask.sum()


def test_polyline_parts_are_arcs():
    mask = np.zeros((80, 80), bool)
    mask[10, 10:70] = True
    mask[10:70, 69] = True
    parts = cluster_pseudo_parts(mask, 8, seed=0)
    assert len(parts) == 8
    # order pixels along the path; each part must be one contiguous run
    path = [(x, 10) for x in range(10, 70)] + [(69, y) for y in range(11, 70)]
    index = {p: i for i, p in enumerate(path)}
    for part in parts:
        pos = sorted(index[tuple(px)] for px in part.pixels)
        assert pos[-1] - pos[0] + 1 == len(pos)


def test_eight_pixel_mask():
    mask = np.zeros((20, 20), bool)
    pts = [(1, 1), (5, 2), (9, 3), (13, 4), (2, 15), (6, 16), (10, 17), (14, 18)]
    for x, y in pts:
        mask[y, x] = True
    parts = cluster_pseudo_parts(mask, 8)
    assert sorted(len(p.pixels) for p in parts) == [1] * 8
    kps = place_keypoints(parts)
    assert {tuple(map(int, k)) for k in kps} == set(pts)


def test_too_few_pixels():
    mask = np.zeros((5, 5), bool)
    mask[0, :3] = True
    with pytest.raises(ValueError):
        cluster_pseudo_parts(mask, 8)


def test_clustering_deterministic():
    mask = np.zeros((60, 60), bool)
    mask[10:50, 5:55] = True
    a = place_keypoints(cluster_pseudo_parts(mask, 8, seed=4))
    b = place_keypoints(cluster_pseudo_parts(mask, 8, seed=4))
    assert np.array_equal(a, b)


def test_convex_part_centroid():
    px = np.array([(x, y) for x in range(4) for y in range(3)])
    kp = place_keypoints([PseudoPart(0, px, px.mean(0))])[0]
    assert np.allclose(kp, [1.5, 1.0])


def test_c_shape_snaps_to_part():
    px = [(x, 0) for x in range(10)] + [(0, y) for y in range(1, 10)] + [(x, 9) for x in range(1, 10)]
    px = np.array(px)
    c = px.mean(0)
    kp = place_keypoints([PseudoPart(0, px, c)])[0]
    d = ((px - c) ** 2).sum(1)
    assert tuple(kp) == tuple(px[np.argmin(d)])


def test_propose_on_synthetic_sketch():
    from photosketch.synthetic import make_pair
    _, sketches, _ = make_pair(np.random.default_rng(0), 256, 1)
    kps = propose_keypoints(sketches[0])
    assert kps.shape == (8, 2)
    m = segment_sketch(sketches[0]).mask
    assert all(m[int(round(y)), int(round(x))] for x, y in kps)


def _records(rng, n_pairs=20, noise=2.0):
    recs = []
    for p in range(n_pairs):
        for k in range(8):
            base = rng.uniform(40, 200, 2)
            for a in range(3):
                xy = base + rng.normal(0, noise, 2)
                recs.append(AnnotationRecord(f"c/p{p}-1", k, (10.0, 10.0), (float(xy[0]), float(xy[1])), f"a{a}"))
    return recs


def test_coincident_annotations():
    recs = [AnnotationRecord("c/p-1", k, (1, 1), (50.0 + k, 60.0), f"a{a}") for k in range(8) for a in range(3)]
    pairs, rep = aggregate_annotations(recs)
    assert not rep.rejections
    assert np.allclose(pairs[0].photo_keypoints_gt[:, 0], 50 + np.arange(8))


def test_planted_outlier_rejected_exactly():
    rng = np.random.default_rng(0)
    recs = _records(rng)
    victim = recs[37]
    recs[37] = AnnotationRecord(victim.pair_id, victim.keypoint_index, victim.sketch_xy,
                                (min(victim.annotator_xy[0] + 120, 255.0), victim.annotator_xy[1]), victim.annotator_id)
    pairs, rep = aggregate_annotations(recs)
    assert [r.record_id for r in rep.rejections] == [recs[37].record_id]
    ref_rejected, ref_gt = aggregate_reference(recs)
    assert ref_rejected == {recs[37].record_id}
    for p in pairs:
        for k in range(8):
            assert np.allclose(p.photo_keypoints_gt[k], ref_gt[(p.pair_id, k)])


def test_fewer_than_three_records():
    recs = [AnnotationRecord("c/p-1", 0, (1, 1), (5.0, 5.0), "a")] * 2
    with pytest.raises(ValueError, match="pair c/p-1"):
        aggregate_annotations(recs)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6))
def test_aggregation_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    recs = _records(rng, n_pairs=4, noise=5.0)
    a, ra = aggregate_annotations(recs)
    perm = [recs[i] for i in rng.permutation(len(recs))]
    b, rb = aggregate_annotations(perm)
    assert sorted(r.record_id for r in ra.rejections) == sorted(r.record_id for r in rb.rejections)
    for x, y in zip(a, b):
        assert np.allclose(x.photo_keypoints_gt, y.photo_keypoints_gt, atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6))
def test_rejection_monotone_in_threshold(seed):
    rng = np.random.default_rng(seed)
    recs = _records(rng, n_pairs=4, noise=8.0)
    counts = [len(aggregate_annotations(recs, s)[1].rejections) for s in (3.0, 2.0, 1.0, 0.5)]
    assert counts == sorted(counts)
