"""Binary feature/embedding files and the JSON dataset manifest.

Feature file (little-endian)::

    b"UMDF" | u32 version=1 | u32 T | u32 D | f32 feats_per_sec | u16 n | n bytes video_id
    | T*D f32, row-major

Embedding file::

    b"UMDE" | u32 version=1 | u32 count | u32 D_txt
    | count x (u16 n | n bytes query_id | u8 task | D_txt f32)
"""
from __future__ import annotations

import json
import logging
import math
import struct
from pathlib import Path

import numpy as np

from .types import (
    Annotation,
    BadMagic,
    DataError,
    DatasetManifest,
    DimensionMismatch,
    DuplicateQueryId,
    EmptyCatalog,
    FeatureSequence,
    MissingFeatureFile,
    NonFiniteData,
    QueryCatalog,
    QueryEmbedding,
    Segment,
    SegmentOutOfRange,
    Task,
    TruncatedPayload,
    UnresolvedQuery,
    VideoRecord,
)

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"UMDF"
EMBEDDING_MAGIC = b"UMDE"
FORMAT_VERSION = 1
CLAMP_TOLERANCE_SEC = 0.5
PROPOSAL_QUERY_ID = "__proposal__"

_F32 = np.dtype("<f4")


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedPayload(f"{self.what}: needed {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * n), dtype=_F32).copy()


def _check_header(r: _Reader, magic: bytes) -> None:
    head = r.take(4)
    if head != magic:
        raise BadMagic(f"{r.what}: expected magic {magic!r}, found {head!r}")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise BadMagic(f"{r.what}: unsupported version {version}")


def write_feature_file(path, seq: FeatureSequence) -> None:
    feats = np.ascontiguousarray(seq.feats, dtype=_F32)
    vid = seq.video_id.encode("utf-8")
    t, d = feats.shape
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<IIIf", FORMAT_VERSION, t, d, seq.feats_per_sec))
        f.write(struct.pack("<H", len(vid)))
        f.write(vid)
        f.write(feats.tobytes())


def read_feature_file(path) -> FeatureSequence:
    r = _Reader(Path(path).read_bytes(), str(path))
    _check_header(r, FEATURE_MAGIC)
    t, d, fps = r.unpack("<IIf")
    (n,) = r.unpack("<H")
    video_id = r.take(n).decode("utf-8")
    if t < 1 or d < 1:
        raise DataError(f"{path}: empty feature matrix T={t} D={d}")
    feats = r.floats(t * d).reshape(t, d)
    if not np.all(np.isfinite(feats)):
        raise NonFiniteData(f"{path}: non-finite feature values")
    return FeatureSequence(video_id=video_id, feats=feats, feats_per_sec=float(fps))


def write_embedding_file(path, queries: list[QueryEmbedding]) -> None:
    dims = {q.dim for q in queries}
    if len(dims) > 1:
        raise DimensionMismatch(f"mixed embedding dimensions {sorted(dims)}")
    d = dims.pop() if dims else 0
    ids = [q.query_id for q in queries]
    if len(set(ids)) != len(ids):
        raise DuplicateQueryId("duplicate query ids in embedding set")
    with open(path, "wb") as f:
        f.write(EMBEDDING_MAGIC)
        f.write(struct.pack("<III", FORMAT_VERSION, len(queries), d))
        for q in queries:
            qid = q.query_id.encode("utf-8")
            f.write(struct.pack("<H", len(qid)))
            f.write(qid)
            f.write(struct.pack("<B", int(q.task)))
            f.write(np.ascontiguousarray(q.vec, dtype=_F32).tobytes())


def l2_normalize(vec: np.ndarray) -> np.ndarray:
    v = np.asarray(vec, dtype=np.float64)
    norm = math.sqrt(math.fsum(v * v))
    if norm == 0.0:
        raise DataError("cannot normalize a zero embedding")
    return v / norm


def read_embedding_file(path, normalize: bool = False) -> list[QueryEmbedding]:
    buf = Path(path).read_bytes()
    r = _Reader(buf, str(path))
    _check_header(r, EMBEDDING_MAGIC)
    count, d = r.unpack("<II")
    out: list[QueryEmbedding] = []
    seen: set[str] = set()
    for _ in range(count):
        (n,) = r.unpack("<H")
        qid = r.take(n).decode("utf-8")
        (tag,) = r.unpack("<B")
        try:
            task = Task(tag)
        except ValueError:
            raise DataError(f"{path}: unknown task tag {tag} for {qid}") from None
        if qid in seen:
            raise DuplicateQueryId(f"{path}: {qid}")
        seen.add(qid)
        vec = r.floats(d)
        if not np.all(np.isfinite(vec)):
            raise NonFiniteData(f"{path}: non-finite embedding for {qid}")
        if normalize:
            out.append(QueryEmbedding(qid, task, l2_normalize(vec), text=None, l2_normalized=True))
        else:
            out.append(QueryEmbedding(qid, task, vec, text=None, l2_normalized=False))
    if r.pos != len(buf):
        raise DimensionMismatch(f"{path}: {len(buf) - r.pos} trailing bytes; records disagree with D_txt={d}")
    return out


def build_proposal_query(catalog: QueryCatalog | list[QueryEmbedding]) -> QueryEmbedding:
    """Class-agnostic query: mean of the unit-normalized action embeddings, renormalized.

    Column sums use ``math.fsum`` so the result is bit-identical under any
    ordering of the inputs.
    """
    queries = catalog.tad_queries if isinstance(catalog, QueryCatalog) else list(catalog)
    if not queries:
        raise EmptyCatalog("no action queries to average")
    dims = {q.dim for q in queries}
    if len(dims) != 1:
        raise DimensionMismatch(f"mixed embedding dimensions {sorted(dims)}")
    units = np.stack([l2_normalize(q.vec) for q in queries])
    mean = np.array([math.fsum(col) for col in units.T]) / len(queries)
    return QueryEmbedding(PROPOSAL_QUERY_ID, Task.TAD, l2_normalize(mean), text="action proposal", l2_normalized=True)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


def _clamp_segment(video_id: str, query_id: str, start: float, end: float, duration: float) -> Segment:
    if start < -CLAMP_TOLERANCE_SEC or end > duration + CLAMP_TOLERANCE_SEC:
        raise SegmentOutOfRange(
            f"{video_id}/{query_id}: ({start}, {end}) exceeds duration {duration} by more than {CLAMP_TOLERANCE_SEC}s"
        )
    s, e = max(0.0, float(start)), min(float(duration), float(end))
    if not s < e:
        raise SegmentOutOfRange(f"{video_id}/{query_id}: empty segment ({start}, {end}) after clamping")
    return Segment(s, e)


def _manifest_dict(manifest: DatasetManifest) -> dict:
    videos = []
    for v in manifest.videos:
        videos.append({
            "id": v.video_id,
            "feature_file": v.feature_file,
            "duration_sec": v.duration_sec,
            "split": v.split,
            "tad": [{"query_id": a.query_id, "start_sec": a.segment.start_sec, "end_sec": a.segment.end_sec} for a in v.tad],
            "mr": [{"query_id": a.query_id, "start_sec": a.segment.start_sec, "end_sec": a.segment.end_sec} for a in v.mr],
        })
    return {"videos": videos}


def write_manifest(path, manifest: DatasetManifest) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_manifest_dict(manifest), f, indent=1)
        f.write("\n")


def read_manifest(path) -> DatasetManifest:
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict) or not isinstance(raw.get("videos"), list):
        raise DataError(f"{path}: manifest must be an object with a 'videos' list")
    videos = []
    seen: set[str] = set()
    for item in raw["videos"]:
        try:
            vid = str(item["id"])
            duration = float(item["duration_sec"])
            feature_file = str(item["feature_file"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: malformed video record {item!r}") from exc
        if vid in seen:
            raise DataError(f"{path}: duplicate video id {vid}")
        seen.add(vid)
        rec = VideoRecord(vid, feature_file, duration, split=str(item.get("split", "train")))
        for key, bucket in (("tad", rec.tad), ("mr", rec.mr)):
            for ann in item.get(key, []):
                try:
                    qid, s, e = str(ann["query_id"]), float(ann["start_sec"]), float(ann["end_sec"])
                except (KeyError, TypeError, ValueError) as exc:
                    raise DataError(f"{path}: malformed annotation {ann!r}") from exc
                bucket.append(Annotation(vid, qid, _clamp_segment(vid, qid, s, e, duration)))
        videos.append(rec)
    return DatasetManifest(videos, root=str(Path(path).parent))


def load_dataset(manifest_path, embeddings_path, features_dir=None, normalize_embeddings: bool = False):
    """Read and cross-validate manifest, embeddings and every feature file.

    Returns ``(manifest, catalog)``; each video record carries its loaded features.
    """
    manifest = read_manifest(manifest_path)
    features_dir = Path(features_dir) if features_dir is not None else Path(manifest.root)
    queries = read_embedding_file(embeddings_path, normalize=normalize_embeddings)
    by_id = {q.query_id: q for q in queries}
    tad_queries = [q for q in queries if q.task == Task.TAD]
    tad_ids = {q.query_id for q in tad_queries}

    mr_by_video: dict[str, list[QueryEmbedding]] = {}
    dim = None
    for rec in manifest.videos:
        path = features_dir / rec.feature_file
        if not path.is_file():
            raise MissingFeatureFile(str(path))
        seq = read_feature_file(path)
        if seq.video_id != rec.video_id:
            raise DataError(f"{path}: feature file belongs to {seq.video_id!r}, manifest says {rec.video_id!r}")
        if dim is None:
            dim = seq.dim
        elif seq.dim != dim:
            raise DimensionMismatch(f"{path}: feature dim {seq.dim} != {dim}")
        rec.features = seq
        for ann in rec.tad:
            if ann.query_id not in tad_ids:
                raise UnresolvedQuery(f"{rec.video_id}: action query {ann.query_id!r} not in embedding file")
        mr_list: list[QueryEmbedding] = []
        mr_seen: set[str] = set()
        for ann in rec.mr:
            q = by_id.get(ann.query_id)
            if q is None or q.task != Task.MR:
                raise UnresolvedQuery(f"{rec.video_id}: event query {ann.query_id!r} not in embedding file")
            if q.query_id not in mr_seen:
                mr_seen.add(q.query_id)
                mr_list.append(q)
        if mr_list:
            mr_by_video[rec.video_id] = mr_list
    catalog = QueryCatalog(tad_queries, mr_by_video)
    log.debug("loaded %d videos, %d action queries, %d event queries",
              len(manifest.videos), len(tad_queries), sum(len(v) for v in mr_by_video.values()))
    return manifest, catalog
