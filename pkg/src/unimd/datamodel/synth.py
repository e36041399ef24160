"""Synthetic video/query datasets with exactly known ground truth.

Each action class ``c`` owns a one-hot text embedding ``e_c`` and a unit pattern
vector ``p_c`` (the patterns are mutually orthogonal). An action instance adds
``p_c`` to the features inside its span; Gaussian noise covers every step. An
event is two adjacent (possibly slightly overlapping) instances of different
classes; its description embedding is ``normalize(e_a + e_b)`` and its segment
is the union span.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .io import write_embedding_file, write_feature_file, write_manifest
from .types import (
    Annotation,
    DatasetManifest,
    FeatureSequence,
    InsufficientDimension,
    QueryEmbedding,
    Segment,
    Task,
    VideoRecord,
)


@dataclass(frozen=True)
class PlantedInstance:
    video_id: str
    class_id: int
    start: int  # feature-step index, inclusive
    end: int  # exclusive


@dataclass(frozen=True)
class PlantedEvent:
    video_id: str
    query_id: str
    first: PlantedInstance
    second: PlantedInstance

    @property
    def start(self) -> int:
        return min(self.first.start, self.second.start)

    @property
    def end(self) -> int:
        return max(self.first.end, self.second.end)


@dataclass
class SyntheticTruth:
    patterns: np.ndarray  # (C, D)
    instances: list[PlantedInstance] = field(default_factory=list)
    events: list[PlantedEvent] = field(default_factory=list)
    manifest: DatasetManifest | None = None


def action_name(c: int) -> str:
    return f"action_{c}"


def gen_synthetic(
    out_dir,
    seed: int = 7,
    n_videos: int = 16,
    T: int = 256,
    D: int = 64,
    C: int = 4,
    events_per_video: int = 2,
    extra_actions: int = 1,
    feats_per_sec: float = 2.0,
    noise: float = 0.1,
    min_len: int = 8,
    max_len: int = 24,
    max_overlap: int = 2,
    min_gap: int = 4,
    tad_only: int = 0,
    mr_only: int = 0,
    val_videos: int = 0,
) -> SyntheticTruth:
    """Write ``features/*.umdf``, ``embeddings.umde`` and ``manifest.json`` under ``out_dir``.

    ``tad_only`` / ``mr_only`` videos keep only one task's annotations;
    the last ``val_videos`` videos are tagged ``split="val"``.
    """
    if min(n_videos, T, D, C, events_per_video) < 1:
        raise ValueError("all counts must be >= 1")
    if D < C + events_per_video:
        raise InsufficientDimension(f"D={D} < C + events_per_video = {C + events_per_video}")
    pairs = list(combinations(range(C), 2))
    if len(pairs) < events_per_video:
        raise ValueError(f"C={C} admits only {len(pairs)} distinct event pairs per video")
    if tad_only + mr_only > n_videos:
        raise ValueError("tad_only + mr_only exceeds n_videos")

    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(D, C)))
    patterns = q.T.copy()  # rows are orthonormal
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)

    eye = np.eye(D)
    tad_queries = [QueryEmbedding(action_name(c), Task.TAD, eye[c].copy(), text=action_name(c)) for c in range(C)]
    mr_queries: list[QueryEmbedding] = []
    truth = SyntheticTruth(patterns=patterns)
    order = rng.permutation(n_videos)
    tad_only_set = set(order[:tad_only].tolist())
    mr_only_set = set(order[tad_only : tad_only + mr_only].tolist())
    videos: list[VideoRecord] = []

    for v in range(n_videos):
        vid = f"vid_{v:03d}"
        blocks = []  # (kind, payload) where payload lists (class, length, offset)
        chosen = rng.choice(len(pairs), size=events_per_video, replace=False)
        for k in chosen:
            a, b = pairs[int(k)]
            if rng.random() < 0.5:
                a, b = b, a
            la, lb = rng.integers(min_len, max_len + 1, size=2)
            ov = int(rng.integers(0, max_overlap + 1))
            blocks.append(("event", [(a, int(la), 0), (b, int(lb), int(la) - ov)]))
        for _ in range(extra_actions):
            c = int(rng.integers(C))
            blocks.append(("action", [(c, int(rng.integers(min_len, max_len + 1)), 0)]))
        blocks = [blocks[i] for i in rng.permutation(len(blocks))]
        spans = [max(off + ln for _, ln, off in parts) for _, parts in blocks]
        slack = T - sum(spans) - min_gap * (len(blocks) + 1)
        if slack < 0:
            raise ValueError(f"T={T} too short for {len(blocks)} planted blocks")
        gaps = rng.multinomial(slack, np.full(len(blocks) + 1, 1.0 / (len(blocks) + 1))) + min_gap

        feats = noise * rng.normal(size=(T, D))
        tad_anns: list[Annotation] = []
        mr_anns: list[Annotation] = []
        pos = int(gaps[0])
        ev_no = 0
        for (kind, parts), span, gap in zip(blocks, spans, gaps[1:]):
            insts = []
            for c, ln, off in parts:
                inst = PlantedInstance(vid, c, pos + off, pos + off + ln)
                feats[inst.start : inst.end] += patterns[c]
                insts.append(inst)
                truth.instances.append(inst)
                tad_anns.append(Annotation(vid, action_name(c), Segment(inst.start / feats_per_sec, inst.end / feats_per_sec)))
            if kind == "event":
                qid = f"{vid}_ev{ev_no}"
                ev_no += 1
                ev = PlantedEvent(vid, qid, insts[0], insts[1])
                truth.events.append(ev)
                vec = eye[insts[0].class_id] + eye[insts[1].class_id]
                text = f"{action_name(insts[0].class_id)} then {action_name(insts[1].class_id)}"
                if v not in tad_only_set:
                    mr_queries.append(QueryEmbedding(qid, Task.MR, vec / np.linalg.norm(vec), text=text))
                mr_anns.append(Annotation(vid, qid, Segment(ev.start / feats_per_sec, ev.end / feats_per_sec)))
            pos += span + int(gap)

        tad_anns.sort(key=lambda a: (a.segment.start_sec, a.query_id))
        if v in tad_only_set:
            mr_anns = []
        if v in mr_only_set:
            tad_anns = []
        fname = f"{vid}.umdf"
        write_feature_file(out / "features" / fname, FeatureSequence(vid, feats.astype(np.float32), feats_per_sec))
        split = "val" if v >= n_videos - val_videos else "train"
        videos.append(VideoRecord(vid, f"features/{fname}", T / feats_per_sec, tad_anns, mr_anns, split))

    write_embedding_file(out / "embeddings.umde", tad_queries + mr_queries)
    manifest = DatasetManifest(videos, root=str(out))
    write_manifest(out / "manifest.json", manifest)
    truth.manifest = manifest
    return truth
