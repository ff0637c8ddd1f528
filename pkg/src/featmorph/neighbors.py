"""Dataset index, neighbor selection, feature means, and the edit direction.

The index stores one record per image: an integer id, the image path, an
optional attribute bitset with per-bit validity (so unlabeled datasets share
the format), and the pool5 retrieval descriptor.

Index files use the DFIX container (little-endian):

    magic "DFIX" | version u32=1 | record count u32
    attribute-name count u16, then per name: len u16 + UTF-8
    per record: id u32, path len u16 + UTF-8,
                attr-bit count u16 + value bits + validity bits (byte-packed),
                pool5 length u32 + f32 data

Attribute tables come in as UTF-8 CSV: a header row whose first column is
the image path column and whose remaining columns name the attributes;
cells hold -1, 1, or empty (unknown).
"""

from __future__ import annotations

import csv
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .features import (
    FeatureVector,
    LayoutMismatchError,
    check_layouts_match,
    cosine_distance,
    phi,
    pool5_descriptor,
)
from .imgio import ImageDecodeError, load_image_rgb
from .network import Network

log = logging.getLogger(__name__)

DFIX_MAGIC = b"DFIX"
DFIX_VERSION = 1


class IndexFormatError(ValueError):
    """Raised for corrupt or truncated index files."""


class IndexBuildError(ValueError):
    """Raised for invalid build inputs (duplicate paths, bad tables)."""


@dataclass
class IndexRecord:
    id: int
    path: str
    attr_values: np.ndarray | None  # bool (n_attrs,) or None when unlabeled
    attr_valid: np.ndarray | None
    pool5: np.ndarray  # 1-d float32


@dataclass
class DatasetIndex:
    attribute_names: tuple[str, ...]
    records: list[IndexRecord]
    rejects: list[str] = field(default_factory=list)  # build-time only, not persisted

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise IndexBuildError("index records must have unique ids")

    def record(self, rec_id: int) -> IndexRecord:
        for r in self.records:
            if r.id == rec_id:
                return r
        raise KeyError(f"no record with id {rec_id}")

    def __len__(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class AttributeQuery:
    """Desired attribute values plus the mask of attributes that matter."""

    targets: np.ndarray  # bool (n_attrs,)
    care: np.ndarray  # bool (n_attrs,), at least one set

    def __post_init__(self):
        if self.targets.shape != self.care.shape:
            raise IndexBuildError("attribute query targets and care mask differ in length")
        if not self.care.any():
            raise IndexBuildError("attribute query care mask must select at least one attribute")

    def negated(self) -> "AttributeQuery":
        flipped = np.where(self.care, ~self.targets, self.targets)
        return AttributeQuery(flipped, self.care)


@dataclass
class AttributeVector:
    """Edit direction in feature space, with its resolved scaling."""

    w: FeatureVector
    k_used: int | None = None
    alpha: float | None = None


# ---------------------------------------------------------------------------
# Attribute tables


def load_attribute_table(path: str) -> tuple[tuple[str, ...], dict[str, tuple[np.ndarray, np.ndarray]]]:
    """Parse a CSV attribute table into per-path (values, validity) bitsets."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IndexBuildError(f"{path}: empty attribute table") from None
        if len(header) < 2:
            raise IndexBuildError(f"{path}: attribute table needs at least one attribute column")
        names = tuple(h.strip() for h in header[1:])
        table = {}
        for row_num, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise IndexBuildError(
                    f"{path}:{row_num}: expected {len(header)} cells, got {len(row)}"
                )
            key = row[0].strip()
            values = np.zeros(len(names), dtype=bool)
            valid = np.zeros(len(names), dtype=bool)
            for i, cell in enumerate(row[1:]):
                cell = cell.strip()
                if cell == "":
                    continue
                if cell in ("1", "+1"):
                    values[i] = True
                    valid[i] = True
                elif cell == "-1":
                    valid[i] = True
                else:
                    raise IndexBuildError(
                        f"{path}:{row_num}: cell {cell!r} for {names[i]} is not in {{-1, 1, empty}}"
                    )
            table[key] = (values, valid)
    return names, table


# ---------------------------------------------------------------------------
# Index construction


def build_index(
    image_paths: list[str],
    net: Network,
    attribute_table: tuple[tuple[str, ...], dict] | None = None,
    jobs: int = 1,
) -> DatasetIndex:
    """Compute one record per decodable image, in input order.

    Undecodable images are skipped with a warning and listed in
    index.rejects; duplicate paths are an error.
    """
    if len(set(image_paths)) != len(image_paths):
        dupes = sorted({p for p in image_paths if image_paths.count(p) > 1})
        raise IndexBuildError(f"duplicate image paths in index input: {dupes}")
    names = attribute_table[0] if attribute_table else ()
    table = attribute_table[1] if attribute_table else {}

    def descriptor(path):
        try:
            return pool5_descriptor(net, load_image_rgb(path))
        except ImageDecodeError:
            return None

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            descriptors = list(pool.map(descriptor, image_paths))
    else:
        descriptors = [descriptor(p) for p in image_paths]

    records = []
    rejects = []
    next_id = 0
    for path, desc in zip(image_paths, descriptors):
        if desc is None:
            log.warning("skipping undecodable image %s", path)
            rejects.append(path)
            continue
        values = valid = None
        if names:
            if path in table:
                values, valid = table[path]
            else:
                values = np.zeros(len(names), dtype=bool)
                valid = np.zeros(len(names), dtype=bool)
        records.append(IndexRecord(next_id, path, values, valid, desc.astype(np.float32)))
        next_id += 1
    return DatasetIndex(tuple(names), records, rejects)


# ---------------------------------------------------------------------------
# DFIX file I/O


def _pack_bits(bits: np.ndarray) -> bytes:
    return np.packbits(bits.astype(np.uint8), bitorder="little").tobytes()


def _unpack_bits(raw: bytes, count: int) -> np.ndarray:
    return np.unpackbits(np.frombuffer(raw, dtype=np.uint8), count=count, bitorder="little").astype(bool)


def save_index(index: DatasetIndex, path: str) -> None:
    parts = [DFIX_MAGIC, struct.pack("<I", DFIX_VERSION), struct.pack("<I", len(index.records))]
    parts.append(struct.pack("<H", len(index.attribute_names)))
    for name in index.attribute_names:
        enc = name.encode("utf-8")
        parts.append(struct.pack("<H", len(enc)))
        parts.append(enc)
    for rec in index.records:
        enc = rec.path.encode("utf-8")
        parts.append(struct.pack("<I", rec.id))
        parts.append(struct.pack("<H", len(enc)))
        parts.append(enc)
        if rec.attr_values is None:
            parts.append(struct.pack("<H", 0))
        else:
            nbits = rec.attr_values.shape[0]
            parts.append(struct.pack("<H", nbits))
            parts.append(_pack_bits(rec.attr_values))
            parts.append(_pack_bits(rec.attr_valid))
        parts.append(struct.pack("<I", rec.pool5.shape[0]))
        parts.append(np.ascontiguousarray(rec.pool5, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_index(path: str) -> DatasetIndex:
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def take(size, what):
        nonlocal pos
        if pos + size > len(data):
            raise IndexFormatError(f"{path}: truncated while reading {what}")
        chunk = data[pos : pos + size]
        pos += size
        return chunk

    if take(4, "magic") != DFIX_MAGIC:
        raise IndexFormatError(f"{path}: bad magic, not a DFIX file")
    version = struct.unpack("<I", take(4, "version"))[0]
    if version != DFIX_VERSION:
        raise IndexFormatError(f"{path}: unsupported version {version}")
    count = struct.unpack("<I", take(4, "record count"))[0]
    n_names = struct.unpack("<H", take(2, "attribute name count"))[0]
    names = []
    for i in range(n_names):
        ln = struct.unpack("<H", take(2, f"attribute name {i} length"))[0]
        names.append(take(ln, f"attribute name {i}").decode("utf-8"))

    records = []
    for i in range(count):
        rec_id = struct.unpack("<I", take(4, f"record {i} id"))[0]
        path_len = struct.unpack("<H", take(2, f"record {i} path length"))[0]
        rec_path = take(path_len, f"record {i} path").decode("utf-8")
        nbits = struct.unpack("<H", take(2, f"record {i} attr count"))[0]
        if nbits:
            nbytes = (nbits + 7) // 8
            values = _unpack_bits(take(nbytes, f"record {i} attr values"), nbits)
            valid = _unpack_bits(take(nbytes, f"record {i} attr validity"), nbits)
        else:
            values = valid = None
        p5_len = struct.unpack("<I", take(4, f"record {i} pool5 length"))[0]
        pool5 = np.frombuffer(take(4 * p5_len, f"record {i} pool5"), dtype="<f4").copy()
        records.append(IndexRecord(rec_id, rec_path, values, valid, pool5))
    if pos != len(data):
        raise IndexFormatError(f"{path}: {len(data) - pos} trailing bytes after last record")
    return DatasetIndex(tuple(names), records)


# ---------------------------------------------------------------------------
# Neighbor selection


def _check_k(k: int) -> None:
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")


def _log_shortfall(found: int, k: int, what: str) -> None:
    if found < k:
        log.warning("%s: only %d candidates available for K=%d", what, found, k)


def knn_by_attributes(
    index: DatasetIndex,
    query: AttributeQuery,
    k: int,
    exclude: tuple[int, ...] = (),
    query_pool5: np.ndarray | None = None,
) -> list[int]:
    """The K records with the most matching attributes under the care mask.

    Ties break by smaller pool5 cosine distance to the query descriptor
    (when one is given), then by id, so results are deterministic.
    """
    _check_k(k)
    if len(query.targets) != len(index.attribute_names):
        raise IndexBuildError(
            f"query has {len(query.targets)} attribute bits, index has "
            f"{len(index.attribute_names)}"
        )
    excluded = set(exclude)
    scored = []
    for rec in index.records:
        if rec.id in excluded:
            continue
        if rec.attr_values is None:
            matches = 0
        else:
            usable = query.care & rec.attr_valid
            matches = int(np.count_nonzero(usable & (rec.attr_values == query.targets)))
        dist = cosine_distance(query_pool5, rec.pool5) if query_pool5 is not None else 0.0
        scored.append((-matches, dist, rec.id))
    scored.sort()
    _log_shortfall(len(scored), k, "attribute K-NN")
    return [rec_id for _, _, rec_id in scored[:k]]


def knn_by_cosine(
    index: DatasetIndex,
    query_pool5: np.ndarray,
    k: int,
    exclude: tuple[int, ...] = (),
) -> list[int]:
    """The K records with smallest pool5 cosine distance, ties broken by id."""
    _check_k(k)
    excluded = set(exclude)
    scored = sorted(
        (cosine_distance(query_pool5, rec.pool5), rec.id)
        for rec in index.records
        if rec.id not in excluded
    )
    _log_shortfall(len(scored), k, "cosine K-NN")
    return [rec_id for _, rec_id in scored[:k]]


# ---------------------------------------------------------------------------
# Feature means and the edit direction


def mean_feature(
    net: Network,
    index: DatasetIndex,
    ids: list[int],
    image_transform=None,
) -> FeatureVector:
    """Elementwise mean of phi over the given records, streamed one image
    at a time with a 64-bit accumulator in id-sorted order.

    Unreadable images are a hard error: a mean must not silently drop
    members.  image_transform, when given, is applied to each decoded image
    before phi (the inpainting path masks candidates this way).
    """
    if not ids:
        raise ValueError("mean_feature needs at least one id")
    acc = None
    layout = None
    for rec_id in sorted(ids):
        rec = index.record(rec_id)
        img = load_image_rgb(rec.path)
        if image_transform is not None:
            img = image_transform(img)
        fv = phi(net, img)
        if acc is None:
            acc = fv.data.astype(np.float64)
            layout = fv.layout
        else:
            if fv.layout != layout:
                raise LayoutMismatchError(
                    f"record {rec.id} ({rec.path}) produced feature layout "
                    f"{fv.layout}, expected {layout}"
                )
            acc += fv.data
    return FeatureVector((acc / len(ids)).astype(np.float32), layout)


def attribute_vector(phibar_t: FeatureVector, phibar_s: FeatureVector) -> AttributeVector:
    """Edit direction: difference of target and source feature means."""
    check_layouts_match(phibar_t, phibar_s)
    w = FeatureVector(phibar_t.data - phibar_s.data, phibar_t.layout)
    return AttributeVector(w=w)


def scale_alpha(w: np.ndarray, strength_beta: float, d: int | None = None) -> float:
    """Step length along w: strength divided by w's mean squared activation.

    Replacing w by c*w yields alpha/c**2, so alpha*w shrinks by 1/c: the
    feature-space step is magnitude-normalised.
    """
    w = np.asarray(w).reshape(-1)
    if d is None:
        d = w.size
    mean_sq = float(w.astype(np.float64) @ w.astype(np.float64)) / d
    if mean_sq == 0.0:
        raise ValueError("attribute vector is zero: no transformation direction")
    return float(strength_beta) / mean_sq
