from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class DataError(Exception):
    """Base class for every ingestion / validation failure."""


class BadMagic(DataError):
    pass


class TruncatedPayload(DataError):
    pass


class NonFiniteData(DataError):
    pass


class DuplicateQueryId(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class UnresolvedQuery(DataError):
    pass


class MissingFeatureFile(DataError):
    pass


class SegmentOutOfRange(DataError):
    pass


class EmptyCatalog(DataError):
    pass


class InsufficientDimension(DataError):
    pass


class Task(enum.IntEnum):
    TAD = 0
    MR = 1

    @classmethod
    def parse(cls, value) -> "Task":
        if isinstance(value, Task):
            return value
        if isinstance(value, str):
            return cls[value.upper()]
        return cls(int(value))


@dataclass
class FeatureSequence:
    video_id: str
    feats: np.ndarray  # (T, D)
    feats_per_sec: float

    def __post_init__(self):
        if self.feats.ndim != 2 or self.feats.shape[0] < 1:
            raise DataError(f"{self.video_id}: features must be a non-empty T x D matrix")
        if self.feats_per_sec <= 0:
            raise DataError(f"{self.video_id}: feats_per_sec must be positive")

    @property
    def num_steps(self) -> int:
        return self.feats.shape[0]

    @property
    def dim(self) -> int:
        return self.feats.shape[1]

    @property
    def duration(self) -> float:
        return self.num_steps / self.feats_per_sec


@dataclass
class QueryEmbedding:
    query_id: str
    task: Task
    vec: np.ndarray
    text: str | None = None
    l2_normalized: bool = False

    @property
    def dim(self) -> int:
        return self.vec.shape[0]


@dataclass(frozen=True)
class Segment:
    start_sec: float
    end_sec: float

    def __post_init__(self):
        if not (0.0 <= self.start_sec < self.end_sec):
            raise ValueError(f"invalid segment ({self.start_sec}, {self.end_sec})")

    @property
    def length(self) -> float:
        return self.end_sec - self.start_sec


@dataclass(frozen=True)
class Annotation:
    video_id: str
    query_id: str
    segment: Segment


@dataclass
class VideoRecord:
    video_id: str
    feature_file: str
    duration_sec: float
    tad: list[Annotation] = field(default_factory=list)
    mr: list[Annotation] = field(default_factory=list)
    split: str = "train"
    features: FeatureSequence | None = None

    @property
    def has_tad(self) -> bool:
        return bool(self.tad)

    @property
    def has_mr(self) -> bool:
        return bool(self.mr)

    def annotations(self, task: Task) -> list[Annotation]:
        return self.tad if task == Task.TAD else self.mr


@dataclass
class DatasetManifest:
    videos: list[VideoRecord]
    root: str = "."

    def by_id(self) -> dict[str, VideoRecord]:
        return {v.video_id: v for v in self.videos}

    def split(self, name: str) -> "DatasetManifest":
        return DatasetManifest([v for v in self.videos if v.split == name], self.root)

    def with_videos(self, videos: list[VideoRecord]) -> "DatasetManifest":
        return DatasetManifest(videos, self.root)


@dataclass
class QueryCatalog:
    tad_queries: list[QueryEmbedding]
    mr_queries_by_video: dict[str, list[QueryEmbedding]] = field(default_factory=dict)

    def __post_init__(self):
        seen: set[str] = set()
        for q in self.all_queries():
            if q.query_id in seen:
                raise DuplicateQueryId(q.query_id)
            seen.add(q.query_id)

    def all_queries(self) -> list[QueryEmbedding]:
        out = list(self.tad_queries)
        for qs in self.mr_queries_by_video.values():
            out.extend(qs)
        return out

    @property
    def num_classes(self) -> int:
        return len(self.tad_queries)

    @property
    def dim(self) -> int | None:
        qs = self.all_queries()
        return qs[0].dim if qs else None

    def unified_index(self, query_id: str) -> int:
        """1-based index into the joint space of C actions followed by N event descriptions."""
        for i, q in enumerate(self.all_queries(), start=1):
            if q.query_id == query_id:
                return i
        raise UnresolvedQuery(query_id)

    def tad_index(self) -> dict[str, int]:
        return {q.query_id: i for i, q in enumerate(self.tad_queries)}
