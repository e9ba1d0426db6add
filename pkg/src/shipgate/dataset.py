"""Ship annotation ingestion: run-length masks, boxes, labels, splits and statistics.

Run-length encodings use the Kaggle layout: 1-based start pixel and run length
pairs, with pixels numbered top-to-bottom then left-to-right (column-major).
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import InvalidInputError, MissingFileError, RecordFormatError

IMAGE_SIZE = 768


@dataclass(frozen=True)
class BBox:
    """Inclusive pixel box; ``x`` is the column, ``y`` the row."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise InvalidInputError(f"degenerate box {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min + 1

    @property
    def height(self) -> float:
        return self.y_max - self.y_min + 1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    def area_fraction(self, width: int = IMAGE_SIZE, height: int = IMAGE_SIZE) -> float:
        return self.area / (width * height)

    def as_tuple(self) -> tuple:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def within(self, width: int, height: int) -> bool:
        return self.x_min >= 0 and self.y_min >= 0 and self.x_max <= width - 1 and self.y_max <= height - 1


@dataclass(frozen=True)
class AnnotationRecord:
    image_id: str
    rle: tuple[tuple[int, int], ...] = ()

    @property
    def has_ship(self) -> bool:
        return len(self.rle) > 0


def parse_rle(text: str | None) -> tuple[tuple[int, int], ...]:
    if text is None:
        return ()
    tokens = str(text).split()
    if len(tokens) % 2:
        raise InvalidInputError("run-length string has an odd number of tokens")
    try:
        nums = [int(t) for t in tokens]
    except ValueError:
        raise InvalidInputError(f"non-integer token in run-length string {text!r}") from None
    return tuple(zip(nums[0::2], nums[1::2]))


def format_rle(rle) -> str:
    return " ".join(f"{s} {n}" for s, n in rle)


def validate_rle(rle, n_pixels: int) -> None:
    prev_end = 0
    for start, length in rle:
        if start < 1 or length < 1:
            raise InvalidInputError(f"invalid run ({start}, {length})")
        if start <= prev_end:
            raise InvalidInputError(f"run starting at {start} overlaps or is out of order")
        prev_end = start + length - 1
        if prev_end > n_pixels:
            raise InvalidInputError(f"run ({start}, {length}) exceeds {n_pixels} pixels")


def decode_rle(rle, width: int = IMAGE_SIZE, height: int = IMAGE_SIZE) -> np.ndarray:
    """Binary ``(height, width)`` mask from runs, decoded column-major."""
    if isinstance(rle, str):
        rle = parse_rle(rle)
    validate_rle(rle, width * height)
    flat = np.zeros(width * height, dtype=np.uint8)
    for start, length in rle:
        flat[start - 1:start - 1 + length] = 1
    return flat.reshape(width, height).T


def encode_rle(mask: np.ndarray) -> tuple[tuple[int, int], ...]:
    pixels = np.concatenate([[0], np.asarray(mask).T.reshape(-1) != 0, [0]]).astype(np.int8)
    edges = np.flatnonzero(pixels[1:] != pixels[:-1]) + 1
    starts, ends = edges[0::2], edges[1::2]
    return tuple((int(s), int(e - s)) for s, e in zip(starts, ends))


def mask_to_bbox(mask: np.ndarray) -> BBox:
    rows = np.flatnonzero(np.any(mask, axis=1))
    cols = np.flatnonzero(np.any(mask, axis=0))
    if rows.size == 0:
        raise InvalidInputError("mask has no set pixels")
    return BBox(int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1]))


def rle_to_bbox(rle, width: int = IMAGE_SIZE, height: int = IMAGE_SIZE) -> BBox:
    """Tight box of a run-length mask without materializing the full mask."""
    if isinstance(rle, str):
        rle = parse_rle(rle)
    validate_rle(rle, width * height)
    if not rle:
        raise InvalidInputError("empty run-length mask has no box")
    starts = np.array([s - 1 for s, _ in rle])
    ends = np.array([s - 2 + n for s, n in rle])
    c0, r0 = np.divmod(starts, height)
    c1, r1 = np.divmod(ends, height)
    # a run that wraps past a column boundary covers the full column height in between
    wraps = c1 > c0
    y_min = int(np.where(wraps, 0, r0).min())
    y_max = int(np.where(wraps, height - 1, r1).max())
    return BBox(int(c0.min()), y_min, int(c1.max()), y_max)


def binary_label(records) -> int:
    return int(any(r.has_ship for r in records))


@dataclass
class DatasetManifest:
    records: list[AnnotationRecord]
    width: int = IMAGE_SIZE
    height: int = IMAGE_SIZE
    assignments: dict[str, str] = field(default_factory=dict)
    seed: int | None = None

    def image_ids(self) -> list[str]:
        return list(OrderedDict.fromkeys(r.image_id for r in self.records))

    def by_image(self) -> "OrderedDict[str, list[AnnotationRecord]]":
        groups: OrderedDict[str, list[AnnotationRecord]] = OrderedDict()
        for r in self.records:
            groups.setdefault(r.image_id, []).append(r)
        return groups

    def labels(self) -> dict[str, int]:
        return {k: binary_label(v) for k, v in self.by_image().items()}

    def boxes(self) -> dict[str, list[BBox]]:
        """One box per non-empty annotation record, grouped by image."""
        return {
            k: [rle_to_bbox(r.rle, self.width, self.height) for r in v if r.has_ship]
            for k, v in self.by_image().items()
        }

    def subset(self, part: str) -> "DatasetManifest":
        if not self.assignments:
            raise InvalidInputError("manifest has not been split")
        keep = [r for r in self.records if self.assignments.get(r.image_id) == part]
        return DatasetManifest(keep, self.width, self.height,
                               {k: v for k, v in self.assignments.items() if v == part}, self.seed)


def _split_key(image_id: str, seed: int) -> bytes:
    return hashlib.sha256(f"{seed}:{image_id}".encode("utf-8")).digest()


def split(manifest: DatasetManifest, ratio: float = 0.8, seed: int = 0) -> DatasetManifest:
    """Assign ``round(n * ratio)`` images to train and the rest to val.

    Images are ranked by a hash of ``(seed, image_id)``, so the assignment is
    independent of record order and exact in size.
    """
    if not 0 < ratio < 1:
        raise InvalidInputError("ratio must lie strictly between 0 and 1")
    ids = sorted(set(manifest.image_ids()), key=lambda i: (_split_key(i, seed), i))
    n_train = int(math.floor(len(ids) * ratio + 0.5))
    assignments = {i: ("train" if k < n_train else "val") for k, i in enumerate(ids)}
    return DatasetManifest(list(manifest.records), manifest.width, manifest.height, assignments, seed)


def lower_median(values) -> float:
    vals = sorted(values)
    if not vals:
        raise InvalidInputError("median of an empty sequence")
    return float(vals[(len(vals) - 1) // 2])


def dataset_stats(manifest: DatasetManifest) -> dict:
    groups = manifest.by_image()
    if not groups:
        raise InvalidInputError("manifest is empty")
    boxes = [b for bs in manifest.boxes().values() for b in bs]
    labels = [binary_label(v) for v in groups.values()]
    diagonals = [b.diagonal for b in boxes]
    return {
        "n_images": len(groups),
        "n_ship_images": int(sum(labels)),
        "ship_fraction": sum(labels) / len(groups),
        "n_boxes": len(boxes),
        "median_diagonal": lower_median(diagonals) if diagonals else None,
        "mean_area_ratio": float(np.mean([b.area_fraction(manifest.width, manifest.height) for b in boxes])) if boxes else None,
        "fraction_diagonal_le_40": float(np.mean([d <= 40 for d in diagonals])) if diagonals else None,
        "min_diagonal": min(diagonals) if diagonals else None,
        "max_diagonal": max(diagonals) if diagonals else None,
    }


def diagonal_histogram(manifest: DatasetManifest, bin_width: float = 10.0) -> list[tuple[float, float, int]]:
    diagonals = np.array([b.diagonal for bs in manifest.boxes().values() for b in bs])
    if diagonals.size == 0:
        return []
    top = bin_width * (math.floor(diagonals.max() / bin_width) + 1)
    edges = np.arange(0.0, top + bin_width / 2, bin_width)
    counts, _ = np.histogram(diagonals, bins=edges)
    return [(float(lo), float(hi), int(c)) for lo, hi, c in zip(edges[:-1], edges[1:], counts)]


# --- file formats ------------------------------------------------------------

_ID_COLUMNS = ("image_id", "ImageId")
_RLE_COLUMNS = ("encoded_pixels", "EncodedPixels")


def read_manifest(path, width: int = IMAGE_SIZE, height: int = IMAGE_SIZE) -> DatasetManifest:
    """Read an annotation CSV (``image_id,encoded_pixels`` or the Kaggle header names).

    A ``<path>.split.json`` sidecar, when present, restores split assignments.
    """
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"manifest not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        id_col = next((c for c in _ID_COLUMNS if c in fields), None)
        rle_col = next((c for c in _RLE_COLUMNS if c in fields), None)
        if id_col is None or rle_col is None:
            raise RecordFormatError(f"header must name image_id and encoded_pixels, got {fields}", 1)
        records = []
        for line, row in enumerate(reader, start=2):
            try:
                rle = parse_rle(row[rle_col])
                validate_rle(rle, width * height)
            except InvalidInputError as exc:
                raise RecordFormatError(str(exc), line) from None
            records.append(AnnotationRecord(row[id_col], rle))
    manifest = DatasetManifest(records, width, height)
    sidecar = split_sidecar_path(path)
    if sidecar.exists():
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        manifest.assignments = dict(meta["assignments"])
        manifest.seed = meta.get("seed")
    return manifest


def split_sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".split.json")


def write_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_id", "encoded_pixels"])
        for r in manifest.records:
            writer.writerow([r.image_id, format_rle(r.rle)])
    if manifest.assignments:
        split_sidecar_path(path).write_text(
            json.dumps({"seed": manifest.seed, "assignments": manifest.assignments}, sort_keys=True, indent=1),
            encoding="utf-8",
        )
    return path


def histogram_to_csv(hist) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["diagonal_lo", "diagonal_hi", "count"])
    writer.writerows(hist)
    return buf.getvalue()


# --- pixels ------------------------------------------------------------------

def read_ppm(path) -> np.ndarray:
    """Binary PPM (P6, maxval <= 255) as a ``(3, H, W)`` uint8 array."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise InvalidInputError(f"{path}: truncated PPM header")
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise InvalidInputError(f"{path}: only binary P6 PPM is supported")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise InvalidInputError(f"{path}: 16-bit PPM is not supported")
    pos += 1  # single whitespace byte before the raster
    raster = np.frombuffer(data, dtype=np.uint8, count=width * height * 3, offset=pos)
    return raster.reshape(height, width, 3).transpose(2, 0, 1).copy()


def write_ppm(path, image: np.ndarray) -> Path:
    image = np.asarray(image, dtype=np.uint8)
    c, h, w = image.shape
    path = Path(path)
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + image.transpose(1, 2, 0).tobytes())
    return path


def read_raw(path, channels: int = 3) -> np.ndarray:
    """Raw uint8 ``C x H x W`` dump of a square image; the side is inferred from the size."""
    data = np.fromfile(path, dtype=np.uint8)
    side = math.isqrt(data.size // channels)
    if side * side * channels != data.size:
        raise InvalidInputError(f"{path}: {data.size} bytes is not a square {channels}-channel image")
    return data.reshape(channels, side, side)


def read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"image not found: {path}")
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    if path.suffix.lower() == ".raw":
        return read_raw(path)
    raise InvalidInputError(f"{path}: unsupported image format (use .ppm or .raw)")


def downsample(image: np.ndarray, factor: int) -> np.ndarray:
    """Integer box-filter downsampling with round-half-even means."""
    image = np.asarray(image)
    c, h, w = image.shape
    if h % factor or w % factor:
        raise InvalidInputError(f"image {h}x{w} is not divisible by {factor}")
    blocks = image.reshape(c, h // factor, factor, w // factor, factor).astype(np.int64)
    return np.rint(blocks.sum(axis=(2, 4)) / factor**2).astype(np.uint8)
