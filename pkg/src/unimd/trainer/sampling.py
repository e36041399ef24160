"""Dataset subsampling and the per-epoch batch samplers used for task fusion.

A work item is a ``(video_id, task)`` pair: one forward pass over the video
scored against every query of that task. Items of one video that land in the
same batch share a single forward pass.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from ..datamodel.types import DataError, DatasetManifest, Task, VideoRecord


class SamplerMode(str, enum.Enum):
    SYNC = "sync"
    ALT = "alt"
    RANDOM = "random"
    TAD_ONLY = "tad_only"
    MR_ONLY = "mr_only"

    @classmethod
    def parse(cls, value) -> "SamplerMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            return cls[str(value).upper()]


@dataclass(frozen=True)
class WorkItem:
    video_id: str
    task: Task


@dataclass
class SamplerSpec:
    mode: SamplerMode = SamplerMode.SYNC
    batch_size: int = 2
    seed: int = 0

    def __post_init__(self):
        self.mode = SamplerMode.parse(self.mode)
        if self.batch_size < 1:
            raise ValueError("sampler.batch_size must be >= 1")
        if self.mode is SamplerMode.SYNC and self.batch_size < 2:
            raise ValueError("SYNC sampling needs batch_size >= 2 to hold both tasks")

    def tasks(self) -> tuple[Task, ...]:
        if self.mode is SamplerMode.TAD_ONLY:
            return (Task.TAD,)
        if self.mode is SamplerMode.MR_ONLY:
            return (Task.MR,)
        return (Task.TAD, Task.MR)


class EmptyTaskError(DataError):
    """The sampler needs a task that has no videos."""


def subsample(manifest: DatasetManifest, ratio_tad: float = 1.0, ratio_mr: float = 1.0,
              seed: int = 0) -> DatasetManifest:
    """Keep ``floor(ratio * count)`` videos per task, chosen by a seeded shuffle.

    A video kept for only one task loses the other task's annotations; videos
    kept for neither are dropped.
    """
    for name, r in (("ratio_tad", ratio_tad), ("ratio_mr", ratio_mr)):
        if not 0 < r <= 1:
            raise ValueError(f"{name} must be in (0, 1], got {r}")
    rng = np.random.default_rng(seed)
    keep: dict[Task, set[str]] = {}
    for task, ratio in ((Task.TAD, ratio_tad), (Task.MR, ratio_mr)):
        ids = [v.video_id for v in manifest.videos if v.annotations(task)]
        n = math.floor(ratio * len(ids) + 1e-9)
        if ids and n == 0:
            raise EmptyTaskError(f"ratio {ratio} leaves no {task.name} videos out of {len(ids)}")
        perm = rng.permutation(len(ids))
        keep[task] = {ids[i] for i in perm[:n]}
    out = []
    for v in manifest.videos:
        tad = v.tad if v.video_id in keep[Task.TAD] else []
        mr = v.mr if v.video_id in keep[Task.MR] else []
        if tad or mr:
            out.append(VideoRecord(v.video_id, v.feature_file, v.duration_sec, list(tad), list(mr), v.split, v.features))
    return manifest.with_videos(out)


def _chunks(items: list, size: int) -> list[list]:
    return [items[i : i + size] for i in range(0, len(items), size)]


def epoch_batches(spec: SamplerSpec, videos: list[VideoRecord], epoch: int) -> list[list[WorkItem]]:
    """All batches of one epoch, in order. The shuffle depends only on (seed, epoch)."""
    rng = np.random.default_rng([spec.seed, epoch])
    tad = [WorkItem(v.video_id, Task.TAD) for v in videos if v.has_tad]
    mr = [WorkItem(v.video_id, Task.MR) for v in videos if v.has_mr]
    mode = spec.mode
    B = spec.batch_size

    def shuffled(items):
        return [items[i] for i in rng.permutation(len(items))]

    if mode is SamplerMode.TAD_ONLY:
        if not tad:
            raise EmptyTaskError("TAD_ONLY sampling on a dataset without TAD annotations")
        return _chunks(shuffled(tad), B)
    if mode is SamplerMode.MR_ONLY:
        if not mr:
            raise EmptyTaskError("MR_ONLY sampling on a dataset without MR annotations")
        return _chunks(shuffled(mr), B)
    if not tad and not mr:
        raise EmptyTaskError("no annotations to sample")
    if mode is SamplerMode.RANDOM:
        return _chunks(shuffled(tad + mr), B)
    if mode is SamplerMode.ALT:
        return _alternate(shuffled(tad), shuffled(mr), B, rng)
    if not tad or not mr:
        raise EmptyTaskError("SYNC sampling needs both TAD and MR annotations")
    return _synchronized(videos, B, rng)


def _alternate(tad: list[WorkItem], mr: list[WorkItem], B: int, rng) -> list[list[WorkItem]]:
    # Strict parity: TAD on even batches, MR on odd. The shorter task is topped up
    # with a fresh permutation of its own pool so the parity never breaks.
    tb, mb = _chunks(tad, B), _chunks(mr, B)
    if not tb or not mb:
        return tb or mb
    n = max(len(tb), len(mb))

    def extend(batches, pool):
        stream = [it for b in batches for it in b]
        while len(stream) < n * B:
            stream += [pool[i] for i in rng.permutation(len(pool))]
        return _chunks(stream[: n * B], B) if len(batches) < n else batches

    tb, mb = extend(tb, tad), extend(mb, mr)
    out = []
    for a, b in zip(tb, mb):
        out += [a, b]
    return out


def _synchronized(videos: list[VideoRecord], B: int, rng) -> list[list[WorkItem]]:
    # Dual-task videos go first and bring both of their items; the rest is filled by
    # alternating single-task draws, so every batch holds both tasks while both pools last.
    dual = [v.video_id for v in videos if v.has_tad and v.has_mr]
    tad_only = [v.video_id for v in videos if v.has_tad and not v.has_mr]
    mr_only = [v.video_id for v in videos if v.has_mr and not v.has_tad]
    dual = [dual[i] for i in rng.permutation(len(dual))]
    tq = [WorkItem(tad_only[i], Task.TAD) for i in rng.permutation(len(tad_only))]
    mq = [WorkItem(mr_only[i], Task.MR) for i in rng.permutation(len(mr_only))]
    batches = []
    while dual or tq or mq:
        batch: list[WorkItem] = []
        while dual and B - len(batch) >= 2:
            vid = dual.pop(0)
            batch += [WorkItem(vid, Task.TAD), WorkItem(vid, Task.MR)]
        turn = Task.TAD
        if batch:
            turn = Task.TAD if len(tq) >= len(mq) else Task.MR
        while len(batch) < B and (tq or mq):
            pool = tq if (turn is Task.TAD and tq) or not mq else mq
            batch.append(pool.pop(0))
            turn = Task.MR if turn is Task.TAD else Task.TAD
        if not batch:
            # batch_size leaves no room for a dual video next to single items
            vid = dual.pop(0)
            batch = [WorkItem(vid, Task.TAD), WorkItem(vid, Task.MR)]
        batches.append(batch)
    return batches


def batch_task_tag(batch: list[WorkItem]) -> str:
    tasks = {it.task for it in batch}
    return "+".join(t.name.lower() for t in sorted(tasks))


def iterate_batches(spec: SamplerSpec, videos: list[VideoRecord], start_epoch: int = 0) -> Iterator[tuple[int, list[WorkItem]]]:
    epoch = start_epoch
    while True:
        for batch in epoch_batches(spec, videos, epoch):
            yield epoch, batch
        epoch += 1


def sync_violations(batches: list[list[WorkItem]], videos: list[VideoRecord]) -> int:
    """Batches holding a single task while items of both tasks were still pending in the epoch."""
    remaining = {Task.TAD: sum(v.has_tad for v in videos), Task.MR: sum(v.has_mr for v in videos)}
    bad = 0
    for b in batches:
        tasks = {it.task for it in b}
        if remaining[Task.TAD] > 0 and remaining[Task.MR] > 0 and len(tasks) < 2:
            bad += 1
        for it in b:
            remaining[it.task] -= 1
    return bad
