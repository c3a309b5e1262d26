"""Keypoint proposal for sketches and aggregation of raw keypoint annotations.

Proposal: fill the outer sketch contour (dilating until strokes connect), split
the mask into 8 pseudo-parts by spectral clustering on geodesic (k-NN shortest
path) affinities, and place one keypoint per part.
"""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, shortest_path
from scipy.spatial import cKDTree
from sklearn.cluster import SpectralClustering

from .dataset import AnnotationRecord, BenchmarkPair, NUM_KEYPOINTS

log = logging.getLogger(__name__)

INK_THRESHOLD = 0.5
FOUR_CONN = ndimage.generate_binary_structure(2, 1)
SQUARE = np.ones((3, 3), dtype=bool)


class SegmentationError(ValueError):
    pass


@dataclass
class SketchMask:
    mask: np.ndarray
    dilation_rounds_used: int


@dataclass
class PseudoPart:
    part_id: int
    pixels: np.ndarray  # (N, 2) integer (x, y)
    centroid: np.ndarray  # (2,) float (x, y)


def stroke_mask(sketch: np.ndarray) -> np.ndarray:
    img = np.asarray(sketch, dtype=np.float64)
    if img.ndim == 3:
        lum = img[..., :3] @ np.array([0.299, 0.587, 0.114])
    else:
        lum = img
    if lum.max() > 1.0:
        lum = lum / 255.0
    return lum < INK_THRESHOLD


def segment_sketch(sketch: np.ndarray, max_rounds: int = 10) -> SketchMask:
    """Filled object mask from a dark-on-white sketch."""
    strokes = stroke_mask(sketch)
    if not strokes.any():
        raise SegmentationError("blank sketch: no stroke pixels below the ink threshold")
    original = ndimage.binary_fill_holes(strokes)
    current = strokes
    for rounds in range(max_rounds + 1):
        filled = ndimage.binary_fill_holes(current)
        _, n = ndimage.label(filled, structure=FOUR_CONN)
        if n == 1:
            if rounds == 0:
                return SketchMask(filled, 0)
            # undo the dilation on the outer boundary, keep closed gaps
            restored = ndimage.binary_erosion(filled, SQUARE, iterations=rounds) | original
            restored = ndimage.binary_fill_holes(restored)
            _, m = ndimage.label(restored, structure=FOUR_CONN)
            return SketchMask(restored if m == 1 else filled, rounds)
        if rounds < max_rounds:
            current = ndimage.binary_dilation(current, SQUARE)
    sizes = sorted(np.bincount(ndimage.label(filled, structure=FOUR_CONN)[0].ravel())[1:].tolist(), reverse=True)
    raise SegmentationError(
        f"strokes still form {len(sizes)} components after {max_rounds} dilation rounds; sizes={sizes[:10]}")


def _subsample(pixels: np.ndarray, max_nodes: int, k_parts: int) -> np.ndarray:
    stride = max(1, int(np.ceil(np.sqrt(len(pixels) / max_nodes))))
    while True:
        keep = (pixels[:, 0] % stride == 0) & (pixels[:, 1] % stride == 0)
        if keep.sum() <= max_nodes and (keep.sum() >= k_parts or stride == 1):
            if keep.sum() >= k_parts:
                return pixels[keep]
            return pixels
        stride = stride + 1 if keep.sum() > max_nodes else stride - 1


def _knn_graph(nodes: np.ndarray, k: int) -> csr_matrix:
    k = min(k, len(nodes) - 1)
    dist, idx = cKDTree(nodes).query(nodes, k=k + 1)
    rows = np.repeat(np.arange(len(nodes)), k)
    g = csr_matrix((dist[:, 1:].ravel(), (rows, idx[:, 1:].ravel())), shape=(len(nodes),) * 2)
    return g.maximum(g.T)


def _enforce_connected(labels: np.ndarray, graph: csr_matrix, k_parts: int) -> np.ndarray:
    """Move stray fragments of a cluster to the neighbouring cluster they touch most."""
    labels = labels.copy()
    coo = graph.tocoo()
    for _ in range(4 * k_parts):
        changed = False
        for c in range(k_parts):
            members = np.flatnonzero(labels == c)
            if len(members) == 0:
                continue
            sub = graph[members][:, members]
            n, comp = connected_components(sub, directed=False)
            if n == 1:
                continue
            main = np.bincount(comp).argmax()
            for frag in range(n):
                if frag == main:
                    continue
                nodes = set(members[comp == frag].tolist())
                votes = defaultdict(float)
                for a, b in zip(coo.row, coo.col):
                    if a in nodes and b not in nodes:
                        votes[labels[b]] += 1.0
                votes.pop(c, None)
                if votes:
                    labels[list(nodes)] = max(sorted(votes), key=votes.get)
                    changed = True
        if not changed:
            break
    return labels


def _enforce_pixel_connectivity(label_img: np.ndarray, k_parts: int) -> np.ndarray:
    """Reassign 4-disconnected fragments of each part to the part they border most."""
    label_img = label_img.copy()
    for _ in range(4 * k_parts):
        changed = False
        for c in range(k_parts):
            comp, n = ndimage.label(label_img == c, structure=FOUR_CONN)
            if n <= 1:
                continue
            sizes = np.bincount(comp.ravel())[1:]
            main = int(np.argmax(sizes)) + 1
            for frag in range(1, n + 1):
                if frag == main:
                    continue
                region = comp == frag
                ring = ndimage.binary_dilation(region, FOUR_CONN) & ~region
                votes = label_img[ring]
                votes = votes[(votes >= 0) & (votes != c)]
                if len(votes):
                    label_img[region] = np.bincount(votes).argmax()
                    changed = True
        if not changed:
            break
    return label_img


def cluster_pseudo_parts(mask, k_parts: int = NUM_KEYPOINTS, seed: int = 0, knn: int = 8,
                         max_nodes: int = 2000) -> list[PseudoPart]:
    """Partition a mask into ``k_parts`` geodesically compact, connected parts.

    Parts are ordered by centroid (top to bottom, then left to right).
    """
    mask = mask.mask if isinstance(mask, SketchMask) else np.asarray(mask, dtype=bool)
    ys, xs = np.nonzero(mask)
    pixels = np.stack([xs, ys], axis=1)
    if len(pixels) < k_parts:
        raise ValueError(f"mask has {len(pixels)} pixels, fewer than {k_parts} parts")

    nodes = _subsample(pixels, max_nodes, k_parts)
    if len(nodes) == k_parts:
        node_labels = np.arange(k_parts)
    else:
        graph = _knn_graph(nodes.astype(np.float64), knn)
        geo = shortest_path(graph, method="D", directed=False)
        finite = np.isfinite(geo)
        sigma = np.median(geo[finite & (geo > 0)])
        aff = np.where(finite, np.exp(-(np.where(finite, geo, 0.0) ** 2) / sigma**2), 0.0)
        sc = SpectralClustering(n_clusters=k_parts, affinity="precomputed", random_state=seed,
                                assign_labels="kmeans", n_init=10)
        node_labels = sc.fit_predict(aff)
        node_labels = _enforce_connected(node_labels, graph, k_parts)

    _, nearest = cKDTree(nodes).query(pixels)
    label_img = np.full(mask.shape, -1, dtype=np.int64)
    label_img[pixels[:, 1], pixels[:, 0]] = node_labels[nearest]
    label_img = _enforce_pixel_connectivity(label_img, k_parts)
    pixel_labels = label_img[pixels[:, 1], pixels[:, 0]]
    parts = []
    for c in np.unique(pixel_labels):
        px = pixels[pixel_labels == c]
        parts.append((px.mean(axis=0), px))
    parts.sort(key=lambda t: (t[0][1], t[0][0]))
    return [PseudoPart(i, px, cen) for i, (cen, px) in enumerate(parts)]


def place_keypoints(parts: list[PseudoPart]) -> np.ndarray:
    """(k, 2) keypoints: part centroids, snapped onto the part when the centroid misses it."""
    out = []
    for part in parts:
        c = np.asarray(part.centroid, dtype=np.float64)
        px = np.asarray(part.pixels)
        rounded = np.round(c).astype(int)
        if not np.any(np.all(px == rounded, axis=1)):
            c = px[np.argmin(((px - c) ** 2).sum(axis=1))].astype(np.float64)
        out.append(c)
    return np.array(out)


def propose_keypoints(sketch: np.ndarray, seed: int = 0) -> np.ndarray:
    return place_keypoints(cluster_pseudo_parts(segment_sketch(sketch), NUM_KEYPOINTS, seed))


# ---------------------------------------------------------------------------
# annotation aggregation


@dataclass
class Rejection:
    record_id: str
    distance: float
    threshold: float


@dataclass
class AggregationReport:
    threshold: float
    mean: float
    std: float
    n_records: int
    rejections: list[Rejection] = field(default_factory=list)

    @property
    def rejection_rate(self) -> float:
        return len(self.rejections) / self.n_records if self.n_records else 0.0


def annotation_distances(records: list[AnnotationRecord]):
    """Group records per (pair, keypoint) and compute squared distance to the group median."""
    groups: dict[tuple[str, int], list[AnnotationRecord]] = defaultdict(list)
    for r in records:
        groups[(r.pair_id, r.keypoint_index)].append(r)
    for key, recs in groups.items():
        if len(recs) < 3:
            raise ValueError(f"keypoint {key[1]} of pair {key[0]} has {len(recs)} annotations, need 3")
    dists = {}
    for key, recs in groups.items():
        recs.sort(key=lambda r: (r.annotator_id, r.annotator_xy))
        xy = np.array([r.annotator_xy for r in recs], dtype=np.float64)
        med = np.median(xy, axis=0)
        dists[key] = ((xy - med) ** 2).sum(axis=1)
    return groups, dists


def aggregate_annotations(records: list[AnnotationRecord], n_sigma: float = 3.0):
    """Aggregate raw annotations into benchmark pairs with global outlier rejection.

    Each annotation's distance is its squared L2 distance to the median of its
    keypoint's annotations. Distances are pooled over the whole set; records
    with ``d > mean + n_sigma * std`` are rejected and the ground truth is the
    centroid of the survivors. Returns ``(pairs, report)``.
    """
    groups, dists = annotation_distances(records)
    pooled = np.concatenate([dists[k] for k in sorted(dists)]) if dists else np.zeros(0)
    mean, std = float(pooled.mean()) if len(pooled) else 0.0, float(pooled.std()) if len(pooled) else 0.0
    threshold = mean + n_sigma * std
    report = AggregationReport(threshold, mean, std, len(pooled))

    per_pair: dict[str, dict[int, tuple]] = defaultdict(dict)
    for key in sorted(groups):
        recs, d = groups[key], dists[key]
        keep = d <= threshold
        if not keep.any():
            keep[np.argmin(d)] = True
        for r, dd, k in zip(recs, d, keep):
            if not k:
                report.rejections.append(Rejection(r.record_id, float(dd), threshold))
        xy = np.array([r.annotator_xy for r in recs], dtype=np.float64)[keep]
        per_pair[key[0]][key[1]] = (np.array(recs[0].sketch_xy, dtype=np.float64), xy.mean(axis=0))

    pairs = []
    for pid in sorted(per_pair):
        kps = per_pair[pid]
        if sorted(kps) != list(range(NUM_KEYPOINTS)):
            raise ValueError(f"pair {pid} has keypoints {sorted(kps)}, expected 0..{NUM_KEYPOINTS - 1}")
        sk = np.stack([kps[i][0] for i in range(NUM_KEYPOINTS)])
        gt = np.stack([kps[i][1] for i in range(NUM_KEYPOINTS)])
        raw = [r for i in range(NUM_KEYPOINTS) for r in groups[(pid, i)]]
        pairs.append(BenchmarkPair(pid, sk, gt, raw))
    log.info("aggregated %d records, rejected %d (%.3f%%)", report.n_records, len(report.rejections),
             100 * report.rejection_rate)
    return pairs, report
