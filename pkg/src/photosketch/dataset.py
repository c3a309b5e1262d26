"""Photo/sketch corpus loading, epoch pair sampling and benchmark interchange files.

Corpus layout::

    <root>/<split>/photo/<category>/<photo_id>.<ext>
    <root>/<split>/sketch/<category>/<photo_id>-<k>.<ext>

Benchmark pair ids have the form ``<category>/<photo_id>-<k>``. Coordinates are
pixels of the 256x256 frame, origin top-left, x rightward, y downward.
"""
from __future__ import annotations

import csv
import hashlib
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np
from PIL import Image

from .augment import AugmentConfig, AugmentedView, augment  # noqa: F401  (re-exported)

log = logging.getLogger(__name__)

IMAGE_SIDE = 256
NUM_KEYPOINTS = 8
IMAGE_EXTS = {".png", ".jpg", ".jpeg", ".bmp"}

RAW_FIELDS = ["pair_id", "keypoint_index", "sketch_x", "sketch_y", "photo_x", "photo_y", "annotator_id"]
AGG_FIELDS = ["pair_id", "keypoint_index", "sketch_x", "sketch_y", "gt_x", "gt_y"]


class BenchmarkFormatError(ValueError):
    pass


def load_image(path, side: int = IMAGE_SIDE) -> np.ndarray:
    """RGB image as float32 (side, side, 3) in [0, 1]."""
    img = Image.open(path).convert("RGB")
    if img.size != (side, side):
        img = img.resize((side, side), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


@dataclass
class ImagePair:
    photo_id: str
    sketch_id: str
    category: str
    photo_path: Optional[Path] = None
    sketch_path: Optional[Path] = None
    _photo: Optional[np.ndarray] = field(default=None, repr=False)
    _sketch: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def pair_id(self) -> str:
        return f"{self.category}/{self.sketch_id}"

    @property
    def photo(self) -> np.ndarray:
        if self._photo is None:
            self._photo = load_image(self.photo_path)
        return self._photo

    @property
    def sketch(self) -> np.ndarray:
        if self._sketch is None:
            self._sketch = load_image(self.sketch_path)
        return self._sketch

    def release(self) -> None:
        self._photo = self._sketch = None


class Corpus(Sequence[ImagePair]):
    """All (photo, sketch) pairs of a split, plus the photo index."""

    def __init__(self, pairs: list[ImagePair], photos: dict[str, tuple[str, Optional[Path]]] | None = None):
        self.pairs = pairs
        if photos is None:
            photos = {p.photo_id: (p.category, p.photo_path) for p in pairs}
        self.photos = photos

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]

    def __iter__(self) -> Iterator[ImagePair]:
        return iter(self.pairs)

    @property
    def categories(self) -> list[str]:
        return sorted({c for c, _ in self.photos.values()})

    def sketches_by_photo(self) -> dict[str, list[ImagePair]]:
        out: dict[str, list[ImagePair]] = {pid: [] for pid in self.photos}
        for p in self.pairs:
            out.setdefault(p.photo_id, []).append(p)
        return out

    def restrict(self, categories: Iterable[str]) -> "Corpus":
        keep = set(categories)
        return Corpus([p for p in self.pairs if p.category in keep],
                      {k: v for k, v in self.photos.items() if v[0] in keep})


def _read_exclusions(path) -> set[str]:
    if path is None:
        return set()
    lines = Path(path).read_text().splitlines()
    return {ln.strip() for ln in lines if ln.strip() and not ln.startswith("#")}


def load_corpus(root, split: str = "train", exclude=None) -> Corpus:
    """Index a corpus split. ``exclude`` is an optional file of sketch ids to drop."""
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    base = Path(root) / split
    photo_dir, sketch_dir = base / "photo", base / "sketch"
    for d in (photo_dir, sketch_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"corpus directory missing: {d}")
    excluded = _read_exclusions(exclude)

    photos: dict[str, tuple[str, Path]] = {}
    for path in sorted(photo_dir.glob("*/*")):
        if path.suffix.lower() in IMAGE_EXTS:
            photos[path.stem] = (path.parent.name, path)

    pairs = []
    for path in sorted(sketch_dir.glob("*/*")):
        if path.suffix.lower() not in IMAGE_EXTS:
            continue
        sketch_id = path.stem
        if sketch_id in excluded:
            continue
        photo_id, sep, _ = sketch_id.rpartition("-")
        if not sep or photo_id not in photos:
            log.warning("sketch %s has no matching photo; skipped", path)
            continue
        category, photo_path = photos[photo_id]
        pairs.append(ImagePair(photo_id, sketch_id, category, photo_path, path))

    if not pairs:
        log.warning("no photo/sketch pairs found under %s", base)
    counts = Counter(p.category for p in pairs)
    for cat in sorted(counts):
        log.info("%s: %d pairs", cat, counts[cat])
    return Corpus(pairs, photos)


def _stable_index(photo_id: str, epoch: int, seed: int, n: int) -> int:
    digest = hashlib.blake2b(f"{photo_id}|{epoch}|{seed}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") % n


def sample_epoch_pairs(corpus, seed: int, epoch: int = 0) -> list[ImagePair]:
    """One pair per photo, sketch chosen by a stateless hash of (photo, epoch, seed)."""
    if not isinstance(corpus, Corpus):
        corpus = Corpus(list(corpus))
    out = []
    for photo_id, sketches in sorted(corpus.sketches_by_photo().items()):
        if not sketches:
            log.warning("photo %s has no sketches; excluded from epoch", photo_id)
            continue
        sketches = sorted(sketches, key=lambda p: p.sketch_id)
        out.append(sketches[_stable_index(photo_id, epoch, seed, len(sketches))])
    return out


# ---------------------------------------------------------------------------
# benchmark records


@dataclass(frozen=True)
class AnnotationRecord:
    pair_id: str
    keypoint_index: int
    sketch_xy: tuple[float, float]
    annotator_xy: tuple[float, float]
    annotator_id: str

    def __post_init__(self):
        if not 0 <= self.keypoint_index < NUM_KEYPOINTS:
            raise ValueError(f"keypoint_index {self.keypoint_index} out of range")
        for x, y in (self.sketch_xy, self.annotator_xy):
            if not (0 <= x <= IMAGE_SIDE and 0 <= y <= IMAGE_SIDE):
                raise ValueError(f"coordinate ({x}, {y}) outside the {IMAGE_SIDE}px frame")

    @property
    def record_id(self) -> str:
        return f"{self.pair_id}#{self.keypoint_index}#{self.annotator_id}"


@dataclass
class BenchmarkPair:
    pair_id: str
    sketch_keypoints: np.ndarray  # (8, 2)
    photo_keypoints_gt: np.ndarray  # (8, 2)
    raw: list[AnnotationRecord] = field(default_factory=list)

    @property
    def category(self) -> str:
        return self.pair_id.split("/", 1)[0]

    @property
    def sketch_id(self) -> str:
        return self.pair_id.split("/", 1)[-1]

    @property
    def photo_id(self) -> str:
        return self.sketch_id.rpartition("-")[0]


class Benchmark:
    """Benchmark pairs keyed by pair id; ``rejected`` maps pair id to the reason."""

    def __init__(self, pairs: Iterable[BenchmarkPair] = (), rejected: dict[str, str] | None = None):
        self.pairs = {p.pair_id: p for p in pairs}
        self.rejected = dict(rejected or {})

    def __len__(self):
        return len(self.pairs)

    def __iter__(self) -> Iterator[BenchmarkPair]:
        return iter(self.pairs[k] for k in sorted(self.pairs))

    def __getitem__(self, pair_id) -> BenchmarkPair:
        return self.pairs[pair_id]

    def __contains__(self, pair_id):
        return pair_id in self.pairs

    @property
    def categories(self) -> list[str]:
        return sorted({p.category for p in self.pairs.values()})

    def restrict(self, categories: Iterable[str]) -> "Benchmark":
        keep = set(categories)
        return Benchmark([p for p in self if p.category in keep])


def _read_rows(path, fields):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [f for f in fields if f not in (reader.fieldnames or [])]
        if missing:
            raise BenchmarkFormatError(f"{path}: missing columns {missing}")
        yield from reader


def read_raw_annotations(path) -> tuple[list[AnnotationRecord], dict[str, str]]:
    records, bad = [], {}
    for row in _read_rows(path, RAW_FIELDS):
        try:
            records.append(AnnotationRecord(
                row["pair_id"], int(row["keypoint_index"]),
                (float(row["sketch_x"]), float(row["sketch_y"])),
                (float(row["photo_x"]), float(row["photo_y"])),
                row["annotator_id"]))
        except (TypeError, ValueError) as exc:
            bad[row.get("pair_id") or "?"] = f"malformed raw row: {exc}"
    for pid in bad:
        log.error("benchmark pair %s rejected: %s", pid, bad[pid])
    return [r for r in records if r.pair_id not in bad], bad


def write_raw_annotations(path, records: Iterable[AnnotationRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RAW_FIELDS)
        for r in records:
            w.writerow([r.pair_id, r.keypoint_index, repr(float(r.sketch_xy[0])), repr(float(r.sketch_xy[1])),
                        repr(float(r.annotator_xy[0])), repr(float(r.annotator_xy[1])), r.annotator_id])


def write_benchmark(path, pairs: Iterable[BenchmarkPair]) -> None:
    """Aggregated companion file; floats written with ``repr`` so they round-trip exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(AGG_FIELDS)
        for p in sorted(pairs, key=lambda p: p.pair_id):
            for i in range(len(p.sketch_keypoints)):
                sx, sy = p.sketch_keypoints[i]
                gx, gy = p.photo_keypoints_gt[i]
                w.writerow([p.pair_id, i, repr(float(sx)), repr(float(sy)), repr(float(gx)), repr(float(gy))])


def load_benchmark(path, raw_path=None) -> Benchmark:
    """Read an aggregated benchmark file (and optionally attach raw records).

    Pairs with malformed rows or a keypoint count other than 8 are rejected,
    logged with their pair id, and listed in ``Benchmark.rejected``.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"benchmark file not found: {path}")
    rows: dict[str, dict[int, tuple]] = defaultdict(dict)
    rejected: dict[str, str] = {}
    for row in _read_rows(path, AGG_FIELDS):
        pid = row["pair_id"]
        try:
            k = int(row["keypoint_index"])
            vals = tuple(float(row[f]) for f in ("sketch_x", "sketch_y", "gt_x", "gt_y"))
            if not np.all(np.isfinite(vals)):
                raise ValueError("non-finite coordinate")
            if k in rows[pid]:
                raise ValueError(f"duplicate keypoint {k}")
            rows[pid][k] = vals
        except (TypeError, ValueError) as exc:
            rejected[pid] = f"malformed row: {exc}"

    raw_by_pair: dict[str, list[AnnotationRecord]] = defaultdict(list)
    if raw_path is not None:
        records, bad = read_raw_annotations(raw_path)
        rejected.update(bad)
        for r in records:
            raw_by_pair[r.pair_id].append(r)

    pairs = []
    for pid, kps in rows.items():
        if pid in rejected:
            continue
        if sorted(kps) != list(range(NUM_KEYPOINTS)):
            rejected[pid] = f"expected {NUM_KEYPOINTS} keypoints, found {len(kps)}"
            continue
        arr = np.array([kps[i] for i in range(NUM_KEYPOINTS)], dtype=np.float64)
        pairs.append(BenchmarkPair(pid, arr[:, :2], arr[:, 2:], raw_by_pair.get(pid, [])))
    for pid, reason in sorted(rejected.items()):
        log.error("benchmark pair %s rejected: %s", pid, reason)
    return Benchmark(pairs, rejected)
