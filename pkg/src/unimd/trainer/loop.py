"""Training loops: one optimizer step per batch, periodic evaluation, checkpoints."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..datamodel.types import DataError, DatasetManifest, QueryCatalog, QueryEmbedding, Task, VideoRecord
from ..evalkit import EvalConfig, evaluate_model
from ..model import DenseOutput, ModelConfig, UniMD, build_model, load_checkpoint, save_checkpoint
from ..numcore import AdamW, NonFiniteError, Tensor, backward, cosine_lr, ops
from ..objective import LossWeights, TargetSegment, assign_targets, task_loss, total_loss
from .sampling import SamplerMode, SamplerSpec, WorkItem, batch_task_tag, epoch_batches, subsample

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    """A non-finite loss or gradient stopped the run."""


@dataclass
class TrainConfig:
    epochs: int = 10
    max_steps: int | None = None  # stop early once this many optimizer steps ran
    lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_steps: int = 0
    min_lr_ratio: float = 0.0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    data_ratio_tad: float = 1.0
    data_ratio_mr: float = 1.0
    init: str = "random"  # or a checkpoint path
    eval_every: int = 1  # epochs; 0 disables periodic evaluation (a final one still runs)
    eval_split: str = "val"  # falls back to the training split when empty
    train_split: str = "train"
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    center_radius: float = 1.5

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        elif isinstance(self.loss_weights, (list, tuple)):
            self.loss_weights = LossWeights(*self.loss_weights)
        if self.epochs < 1:
            raise ValueError("train.epochs must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("train.max_steps must be >= 1")
        for name in ("data_ratio_tad", "data_ratio_mr"):
            if not 0 < getattr(self, name) <= 1:
                raise ValueError(f"train.{name} must be in (0, 1]")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("train.lr must be positive and weight_decay non-negative")
        if self.eval_every < 0:
            raise ValueError("train.eval_every must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# one step
# ---------------------------------------------------------------------------


@dataclass
class StepLosses:
    total: float
    tad: float | None
    mr: float | None
    tag: str


def _columns(dense: DenseOutput, lo: int, hi: int) -> DenseOutput:
    if lo == 0 and hi == dense.conf[0].shape[1]:
        return dense
    cols = slice(lo, hi)
    return DenseOutput(
        [ops.index(c, (slice(None), cols)) for c in dense.conf],
        [ops.index(o, (slice(None), cols)) for o in dense.offsets],
        dense.strides,
        [ops.index(s, (slice(None), cols)) for s in dense.logits],
    )


def _targets(video: VideoRecord, task: Task, queries: list[QueryEmbedding], fps: float) -> list[TargetSegment]:
    col = {q.query_id: i for i, q in enumerate(queries)}
    out = []
    for k, a in enumerate(video.annotations(task)):
        out.append(TargetSegment(col[a.query_id], a.segment.start_sec * fps, a.segment.end_sec * fps, k))
    return out


def video_task_losses(model: UniMD, video: VideoRecord, tasks: list[Task], catalog: QueryCatalog,
                      cfg: TrainConfig) -> dict[Task, Tensor]:
    """Per-task losses of one video from a single shared forward pass."""
    seq = video.features
    if seq is None:
        raise DataError(f"{video.video_id}: features not loaded")
    groups: list[tuple[Task, list[QueryEmbedding]]] = []
    for task in tasks:
        qs = catalog.tad_queries if task is Task.TAD else catalog.mr_queries_by_video.get(video.video_id, [])
        if not qs:
            raise DataError(f"{video.video_id}: no {task.name} queries")
        groups.append((task, qs))
    g = np.stack([q.vec for _, qs in groups for q in qs])
    dense = model(seq.feats, g)
    lengths = dense.lengths
    out = {}
    lo = 0
    for task, qs in groups:
        hi = lo + len(qs)
        mask = assign_targets(_targets(video, task, qs, seq.feats_per_sec), lengths, dense.strides,
                              model.cfg.reg_ranges, len(qs), cfg.center_radius)
        out[task] = task_loss(_columns(dense, lo, hi), mask, cfg.focal_alpha, cfg.focal_gamma).total
        lo = hi
    return out


def batch_losses(model: UniMD, batch: list[WorkItem], videos: dict[str, VideoRecord], catalog: QueryCatalog,
                 cfg: TrainConfig) -> tuple[Tensor | None, Tensor | None]:
    """Mean TAD loss and mean MR loss over the batch items (None when a task is absent)."""
    if not batch:
        raise ValueError("empty batch")
    by_video: dict[str, list[Task]] = {}
    for it in batch:
        by_video.setdefault(it.video_id, [])
        if it.task not in by_video[it.video_id]:
            by_video[it.video_id].append(it.task)
    per_task: dict[Task, list[Tensor]] = {Task.TAD: [], Task.MR: []}
    for vid, tasks in by_video.items():
        for task, loss in video_task_losses(model, videos[vid], tasks, catalog, cfg).items():
            per_task[task].append(loss)

    def mean(ts):
        if not ts:
            return None
        acc = ts[0]
        for t in ts[1:]:
            acc = ops.add(acc, t)
        return ops.mul(acc, 1.0 / len(ts))

    return mean(per_task[Task.TAD]), mean(per_task[Task.MR])


def train_step(model: UniMD, batch: list[WorkItem], videos: dict[str, VideoRecord], catalog: QueryCatalog,
               cfg: TrainConfig, optim: AdamW) -> StepLosses:
    """Forward every item, weight the task losses, one backward pass and one AdamW update."""
    try:
        l_tad, l_mr = batch_losses(model, batch, videos, catalog, cfg)
        total = total_loss(l_tad, l_mr, cfg.loss_weights)
        optim.zero_grad()
        backward(total)
    except NonFiniteError as exc:
        raise TrainingDiverged(f"non-finite value in batch {[(i.video_id, i.task.name) for i in batch]}: {exc}") from exc
    for p in optim.params:
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise TrainingDiverged(f"non-finite gradient in {p.name}")
    optim.step()
    return StepLosses(total.item(), None if l_tad is None else l_tad.item(),
                      None if l_mr is None else l_mr.item(), batch_task_tag(batch))


def make_optimizer(model: UniMD, cfg: TrainConfig) -> AdamW:
    no_decay = {id(p) for p in model.no_decay_parameters()}
    return AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay, no_decay=no_decay)


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def headline(report: dict, tasks) -> float | None:
    """Model-selection score: mAP for TAD, R1@0.5 for MR, their mean when both are trained."""
    vals = []
    if Task.TAD in tasks and report.get("tad"):
        vals.append(report["tad"]["mAP"])
    if Task.MR in tasks and report.get("mr"):
        vals.append(report["mr"]["R1@0.5"])
    return float(np.mean(vals)) if vals else None


class MetricLog:
    """Append-only JSON-lines log of {epoch, split, task, metric, value} records."""

    def __init__(self, path: Path | None):
        self.path = path
        self.records: list[dict] = []
        if path is not None:
            path.write_text("")

    def add(self, epoch: int, split: str, task: str, metric: str, value, **extra) -> None:
        rec = {"epoch": epoch, "split": split, "task": task, "metric": metric, "value": value, **extra}
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(rec) + "\n")


@dataclass
class FitResult:
    model: UniMD
    steps: int
    epochs: int
    losses: list[StepLosses]
    reports: list[dict]
    best_score: float | None
    best_report: dict | None
    final_report: dict | None
    best_path: Path | None = None
    last_path: Path | None = None
    seconds: float = 0.0

    @property
    def loss_trace(self) -> list[float]:
        return [s.total for s in self.losses]


def _eval_videos(manifest: DatasetManifest, cfg: TrainConfig, train: list[VideoRecord]) -> tuple[str, list[VideoRecord]]:
    vids = [v for v in manifest.videos if v.split == cfg.eval_split]
    if vids:
        return cfg.eval_split, vids
    log.info("split %r is empty; evaluating on the training videos", cfg.eval_split)
    return cfg.train_split, train


def _log_report(mlog: MetricLog, epoch: int, split: str, report: dict, tasks) -> None:
    for task in (Task.TAD, Task.MR):
        key = task.name.lower()
        if task not in tasks or report.get(key) is None:
            mlog.add(epoch, split, key, "absent", None)
            continue
        for name, value in report[key].items():
            mlog.add(epoch, split, key, name, value)


def fit(cfg: TrainConfig, sampler: SamplerSpec, manifest: DatasetManifest, catalog: QueryCatalog,
        model_cfg: ModelConfig, eval_cfg: EvalConfig | None = None, out_dir=None,
        model: UniMD | None = None) -> FitResult:
    """Train one model under ``sampler``; write ``metrics.jsonl``, ``best.ckpt`` and ``last.ckpt`` to ``out_dir``."""
    t0 = time.perf_counter()
    eval_cfg = eval_cfg or EvalConfig()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    tasks = sampler.tasks()

    train_manifest = subsample(manifest.split(cfg.train_split), cfg.data_ratio_tad, cfg.data_ratio_mr, sampler.seed)
    if sampler.mode is SamplerMode.TAD_ONLY:
        train_videos = [v for v in train_manifest.videos if v.has_tad]
    elif sampler.mode is SamplerMode.MR_ONLY:
        train_videos = [v for v in train_manifest.videos if v.has_mr]
    else:
        train_videos = list(train_manifest.videos)
    if not train_videos:
        raise DataError(f"no training videos for {sampler.mode.value}")
    by_id = {v.video_id: v for v in train_videos}
    eval_split, eval_videos = _eval_videos(manifest, cfg, train_videos)

    if model is None:
        model = build_model(model_cfg)
        if cfg.init != "random":
            load_checkpoint(model, cfg.init)
    optim = make_optimizer(model, cfg)
    per_epoch = len(epoch_batches(sampler, train_videos, 0))
    total_steps = per_epoch * cfg.epochs
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)

    mlog = MetricLog(out / "metrics.jsonl" if out is not None else None)
    losses: list[StepLosses] = []
    reports: list[dict] = []
    best_score, best_report = None, None
    best_path = out / "best.ckpt" if out is not None else None
    step = 0
    epoch = 0
    report = None
    for epoch in range(cfg.epochs):
        for batch in epoch_batches(sampler, train_videos, epoch):
            if step >= total_steps:
                break
            optim.state.lr = cosine_lr(step, total_steps, cfg.lr, cfg.warmup_steps, cfg.min_lr_ratio)
            sl = train_step(model, batch, by_id, catalog, cfg, optim)
            losses.append(sl)
            mlog.add(epoch, "train", sl.tag, "loss", sl.total, step=step)
            step += 1
        done = step >= total_steps or epoch == cfg.epochs - 1
        if (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0) or done:
            report = evaluate_model(model, eval_videos, catalog, eval_cfg, tasks)
            reports.append(report)
            _log_report(mlog, epoch, eval_split, report, tasks)
            score = headline(report, tasks)
            if score is not None and (best_score is None or score > best_score):
                best_score, best_report = score, report
                if best_path is not None:
                    save_checkpoint(model, best_path)
            log.info("epoch %d step %d loss %.4f score %s", epoch, step, losses[-1].total if losses else math.nan, score)
        if done:
            break
    last_path = None
    if out is not None:
        last_path = out / "last.ckpt"
        save_checkpoint(model, last_path)
        if best_score is None:
            save_checkpoint(model, best_path)
        (out / "loss_trace.json").write_text(json.dumps([s.total for s in losses]))
    return FitResult(model, step, epoch + 1, losses, reports, best_score, best_report, report,
                     best_path, last_path, time.perf_counter() - t0)


def pretrain_finetune(cfg_a: TrainConfig, sampler_a: SamplerSpec, cfg_b: TrainConfig, sampler_b: SamplerSpec,
                      manifest: DatasetManifest, catalog: QueryCatalog, model_cfg: ModelConfig,
                      eval_cfg: EvalConfig | None = None, out_dir=None) -> tuple[FitResult, FitResult]:
    """Fit task A from scratch, then continue from its best checkpoint on task B."""
    out = Path(out_dir) if out_dir is not None else None
    res_a = fit(cfg_a, sampler_a, manifest, catalog, model_cfg, eval_cfg, out / "stage_a" if out else None)
    model_b = build_model(model_cfg)
    if res_a.best_path is not None:
        load_checkpoint(model_b, res_a.best_path)
    else:
        for p, q in zip(model_b.parameters(), res_a.model.parameters()):
            p.data[...] = q.data
    res_b = fit(cfg_b, sampler_b, manifest, catalog, model_cfg, eval_cfg, out, model=model_b)
    return res_a, res_b
