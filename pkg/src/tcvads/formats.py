"""On-disk formats: VFEA feature files, TCVT checkpoints, JSON-lines manifests.

VFEA layout (little-endian)::

    b"VFEA" | u32 version=1 | u32 n | u32 d | n*d float32, row-major

TCVT layout (little-endian)::

    b"TCVT" | u32 version=1 | 4-byte section tag | u32 n_dims | n_dims * u32
    | u32 n_blocks | per block: u32 ndim, ndim * u32 shape, float64 payload
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, LengthError, ShapeError

VFEA_MAGIC = b"VFEA"
VFEA_VERSION = 1
TCVT_MAGIC = b"TCVT"
TCVT_VERSION = 1

_F32 = np.dtype("<f4")
_F64 = np.dtype("<f8")


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------


def encode_features(matrix) -> bytes:
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"features must be 2-D, got shape {m.shape}")
    n, d = m.shape
    return VFEA_MAGIC + struct.pack("<III", VFEA_VERSION, n, d) + m.astype(_F32).tobytes()


def decode_features(buf: bytes) -> np.ndarray:
    if len(buf) < 16 or buf[:4] != VFEA_MAGIC:
        raise FormatError(f"bad feature-file magic at offset 0: {buf[:4]!r}")
    version, n, d = struct.unpack_from("<III", buf, 4)
    if version != VFEA_VERSION:
        raise FormatError(f"unsupported feature-file version {version} at offset 4")
    expected = 4 * n * d
    payload = buf[16:]
    if len(payload) != expected:
        raise LengthError(
            f"payload is {len(payload)} bytes but header n={n}, d={d} needs {expected}"
        )
    return np.frombuffer(payload, dtype=_F32).reshape(n, d).astype(np.float64)


def write_features(path, matrix) -> None:
    Path(path).write_bytes(encode_features(matrix))


def read_features(path) -> np.ndarray:
    return decode_features(Path(path).read_bytes())


def read_feature_header(path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        head = fh.read(16)
    if len(head) < 16 or head[:4] != VFEA_MAGIC:
        raise FormatError(f"bad feature-file magic at offset 0 in {path}")
    _, n, d = struct.unpack_from("<III", head, 4)
    return n, d


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


def encode_tcvt(tag: str, dims, blocks) -> bytes:
    tag_b = tag.encode("ascii")
    if len(tag_b) != 4:
        raise FormatError(f"section tag must be 4 ASCII bytes, got {tag!r}")
    out = [TCVT_MAGIC, struct.pack("<I", TCVT_VERSION), tag_b]
    dims = [int(x) for x in dims]
    out.append(struct.pack(f"<I{len(dims)}I", len(dims), *dims))
    out.append(struct.pack("<I", len(blocks)))
    for arr in blocks:
        a = np.asarray(arr, dtype=np.float64)
        out.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        out.append(a.astype(_F64).tobytes())
    return b"".join(out)


def decode_tcvt(buf: bytes, expect_tag: str | None = None):
    """Returns ``(tag, dims, blocks)``."""
    if buf[:4] != TCVT_MAGIC:
        raise FormatError(f"bad checkpoint magic at offset 0: {buf[:4]!r}")
    try:
        (version,) = struct.unpack_from("<I", buf, 4)
        if version != TCVT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        tag = buf[8:12].decode("ascii")
        if expect_tag is not None and tag != expect_tag:
            raise FormatError(f"checkpoint section {tag!r}, expected {expect_tag!r}")
        off = 12
        (n_dims,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = list(struct.unpack_from(f"<{n_dims}I", buf, off))
        off += 4 * n_dims
        (n_blocks,) = struct.unpack_from("<I", buf, off)
        off += 4
        blocks = []
        for _ in range(n_blocks):
            (ndim,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            if off + 8 * count > len(buf):
                raise LengthError("checkpoint payload truncated")
            blocks.append(np.frombuffer(buf, _F64, count, off).reshape(shape).astype(np.float64))
            off += 8 * count
    except struct.error as exc:
        raise LengthError(f"checkpoint truncated: {exc}") from None
    if off != len(buf):
        raise LengthError(f"{len(buf) - off} trailing bytes after checkpoint payload")
    return tag, dims, blocks


def write_tcvt(path, tag, dims, blocks) -> None:
    Path(path).write_bytes(encode_tcvt(tag, dims, blocks))


def read_tcvt(path, expect_tag: str | None = None):
    return decode_tcvt(Path(path).read_bytes(), expect_tag)


# ---------------------------------------------------------------------------
# class sets and manifests
# ---------------------------------------------------------------------------

DEFAULT_CLASSES = (
    "normal",
    "verbal abuse",
    "car accident",
    "explosion",
    "fighting",
    "riot",
    "shooting",
)


@dataclass(frozen=True)
class ClassSet:
    """Ordered class labels with exactly one normal class."""

    labels: tuple = DEFAULT_CLASSES
    normal: str = "normal"

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        if len(set(self.labels)) != len(self.labels):
            raise FormatError("class labels must be unique")
        if self.normal not in self.labels:
            raise FormatError(f"normal class {self.normal!r} missing from class set")

    @property
    def anomalies(self) -> tuple:
        return tuple(c for c in self.labels if c != self.normal)

    def index(self, label: str) -> int:
        return self.labels.index(label)

    def to_json(self) -> str:
        # the normal class is flagged with a leading '*'
        return json.dumps(["*" + c if c == self.normal else c for c in self.labels])

    @classmethod
    def from_json(cls, text: str) -> "ClassSet":
        raw = json.loads(text)
        if not isinstance(raw, list) or not all(isinstance(x, str) for x in raw):
            raise FormatError("class set must be a JSON array of strings")
        flagged = [x for x in raw if x.startswith("*")]
        if len(flagged) != 1:
            raise FormatError(f"class set must flag exactly one normal class, found {len(flagged)}")
        labels = [x[1:] if x.startswith("*") else x for x in raw]
        return cls(tuple(labels), flagged[0][1:])


@dataclass
class ManifestEntry:
    id: str
    feature_path: str
    video_label: int
    class_name: str
    frame_labels: list | None = None
    frame_spans: list | None = None  # [[start, end, class], ...], end exclusive
    text_embedding_path: str | None = None
    split: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class"] = d.pop("class_name")
        return {k: v for k, v in d.items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestEntry":
        try:
            return cls(
                id=str(d["id"]),
                feature_path=str(d["feature_path"]),
                video_label=d["video_label"],
                class_name=d["class"],
                frame_labels=d.get("frame_labels"),
                frame_spans=d.get("frame_spans"),
                text_embedding_path=d.get("text_embedding_path"),
                split=d.get("split"),
            )
        except KeyError as exc:
            raise FormatError(f"manifest entry {d.get('id', '?')!r} lacks field {exc}") from None


def validate_entry(entry: ManifestEntry, root=None, classes: ClassSet | None = None) -> None:
    """Raise :class:`FormatError` naming the entry id on any invariant violation."""
    classes = classes or ClassSet()
    eid = entry.id
    if entry.video_label not in (0, 1):
        raise FormatError(f"entry {eid}: video_label must be 0 or 1, got {entry.video_label!r}")
    if entry.class_name not in classes.labels:
        raise FormatError(f"entry {eid}: unknown class {entry.class_name!r}")
    if (entry.class_name == classes.normal) != (entry.video_label == 0):
        raise FormatError(
            f"entry {eid}: class {entry.class_name!r} inconsistent with video_label {entry.video_label}"
        )
    if entry.frame_labels is not None:
        if any(v not in (0, 1) for v in entry.frame_labels):
            raise FormatError(f"entry {eid}: frame_labels must be 0/1")
        path = Path(entry.feature_path)
        if root is not None and not path.is_absolute():
            path = Path(root) / path
        n, _ = read_feature_header(path)
        if len(entry.frame_labels) != n:
            raise FormatError(
                f"entry {eid}: {len(entry.frame_labels)} frame labels for {n} feature rows"
            )
    if entry.frame_spans is not None:
        for span in entry.frame_spans:
            if len(span) != 3 or not int(span[0]) < int(span[1]) or span[2] not in classes.labels:
                raise FormatError(f"entry {eid}: malformed frame span {span!r}")


def write_manifest(path, entries) -> None:
    with open(path, "w") as fh:
        for e in entries:
            fh.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")


def read_manifest(path, validate: bool = True, classes: ClassSet | None = None) -> list:
    path = Path(path)
    entries = []
    seen = set()
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
        e = ManifestEntry.from_dict(raw)
        if e.id in seen:
            raise FormatError(f"entry {e.id}: duplicate id")
        seen.add(e.id)
        if validate:
            validate_entry(e, path.parent, classes)
        entries.append(e)
    return entries


def resolve(entry: ManifestEntry, root) -> Path:
    p = Path(entry.feature_path)
    return p if p.is_absolute() else Path(root) / p
