"""Command-line entry point: ``unimd {train,eval,detect,synth,gradcheck}``.

Exit codes: 0 success, 1 gradient check failed, 2 configuration error,
3 data error, 4 numeric failure (non-finite loss or gradient).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from .datamodel import DataError, gen_synthetic, load_dataset, read_embedding_file, read_feature_file
from .evalkit import EvalConfig, detect, evaluate_model, write_detections
from .model import ArchitectureMismatch, CheckpointError, ModelConfig, build_model, load_checkpoint
from .numcore import NonFiniteError, ShapeError, set_default_dtype
from .trainer import EmptyTaskError, SamplerMode, SamplerSpec, TrainConfig, TrainingDiverged, fit, pretrain_finetune

log = logging.getLogger("unimd")

EXIT_OK = 0
EXIT_GRADCHECK = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

POLICIES = ("dedicated-tad", "dedicated-mr", "pretrain-tad2mr", "pretrain-mr2tad", "sync", "alt", "random")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# run config
# ---------------------------------------------------------------------------

SECTIONS = {"model": ModelConfig, "train": TrainConfig, "sampler": SamplerSpec, "eval": EvalConfig}
# the top-level seed drives every random stream and the policy picks the sampler mode,
# so neither is accepted inside a section
RESERVED = {"model": ("seed",), "sampler": ("seed", "mode")}


@dataclasses.dataclass
class DataPaths:
    manifest: str | None = None
    embeddings: str | None = None
    features_dir: str | None = None
    normalize_embeddings: bool = False


def _defaults() -> dict:
    out = {}
    for name, cls in SECTIONS.items():
        d = dataclasses.asdict(cls())
        for key in RESERVED.get(name, ()):
            d.pop(key)
        out[name] = d
    out["model"]["reg_ranges"] = None  # derived from n_down unless given
    out["train"]["loss_weights"] = [3.0, 1.0]
    out["data"] = dataclasses.asdict(DataPaths())
    out["policy"] = "sync"
    out["output_dir"] = "runs/default"
    out["seed"] = 0
    out["dtype"] = "float64"
    return out


def _check_type(path: str, default, value) -> None:
    if default is None or value is None:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, (list, tuple)):
        ok = isinstance(value, (list, tuple))
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {value!r}")


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path} must be an object")
            _merge(base[key], value, path + ".")
        else:
            _check_type(path, base[key], value)
            base[key] = value


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(tokens: list[str]) -> dict:
    """``["--model.K", "3", "--train.lr=0.01"]`` -> nested dict."""
    out: dict = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(f"unrecognized argument {tok!r}")
        key, eq, val = tok[2:].partition("=")
        if not eq:
            if i + 1 >= len(tokens):
                raise ConfigError(f"override {tok} needs a value")
            val = tokens[i + 1]
            i += 1
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(val)
        i += 1
    return out


def split_overrides(argv: list[str]) -> tuple[list[str], list[str]]:
    """Separate dotted ``--a.b v`` overrides from the argparse arguments.

    Done before argparse so a value like ``6`` is never taken as a positional.
    """
    rest, extra = [], []
    i = 0
    while i < len(argv):
        tok = argv[i]
        if tok.startswith("--") and "." in tok.partition("=")[0]:
            extra.append(tok)
            if "=" not in tok and i + 1 < len(argv):
                extra.append(argv[i + 1])
                i += 1
        else:
            rest.append(tok)
        i += 1
    return rest, extra


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    sampler: SamplerSpec
    eval: EvalConfig
    data: DataPaths
    policy: str
    output_dir: Path
    seed: int
    dtype: str
    raw: dict

    def echo(self) -> dict:
        return self.raw


def resolve_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    """Defaults <- config file <- overrides, validated before anything runs."""
    raw = _defaults()
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be an object")
        _merge(raw, loaded)
    if overrides:
        _merge(raw, overrides)
    if raw["dtype"] not in ("float32", "float64"):
        raise ConfigError(f"dtype must be float32 or float64, got {raw['dtype']!r}")
    if raw["policy"] not in POLICIES:
        raise ConfigError(f"policy must be one of {POLICIES}, got {raw['policy']!r}")
    base = Path(path).parent if path is not None else Path(".")
    for key in ("manifest", "embeddings", "features_dir"):
        v = raw["data"][key]
        if v is not None and not Path(v).is_absolute():
            raw["data"][key] = str(base / v)
    seed = raw["seed"]
    try:
        model = ModelConfig(**raw["model"], seed=seed)
        train = TrainConfig(**raw["train"])
        sampler = SamplerSpec(**raw["sampler"], seed=seed)
        ev = EvalConfig(**raw["eval"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    raw["model"] = {k: v for k, v in model.to_dict().items() if k != "seed"}
    raw["model"]["reg_ranges"] = [[lo, "inf" if math.isinf(hi) else hi] for lo, hi in model.reg_ranges]
    raw["train"]["loss_weights"] = [train.loss_weights.lambda_tad, train.loss_weights.lambda_mr]
    return RunConfig(model, train, sampler, ev, DataPaths(**raw["data"]), raw["policy"],
                     Path(raw["output_dir"]), seed, raw["dtype"], raw)


def write_echo(rc: RunConfig, name: str = "config.resolved.json") -> Path:
    rc.output_dir.mkdir(parents=True, exist_ok=True)
    p = rc.output_dir / name
    p.write_text(json.dumps(rc.echo(), indent=2, sort_keys=True))
    return p


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _load(rc: RunConfig):
    if not rc.data.manifest or not rc.data.embeddings:
        raise ConfigError("data.manifest and data.embeddings are required")
    manifest, catalog = load_dataset(rc.data.manifest, rc.data.embeddings, rc.data.features_dir,
                                     rc.data.normalize_embeddings)
    dims = {v.features.dim for v in manifest.videos if v.features is not None}
    if dims and dims != {rc.model.d_in}:
        raise ConfigError(f"features have dimension {sorted(dims)}, model.d_in is {rc.model.d_in}")
    if catalog.dim is not None and catalog.dim != rc.model.d_txt:
        raise ConfigError(f"query embeddings have dimension {catalog.dim}, model.d_txt is {rc.model.d_txt}")
    return manifest, catalog


def _policy_sampler(rc: RunConfig, mode: SamplerMode) -> SamplerSpec:
    return SamplerSpec(mode, rc.sampler.batch_size, rc.sampler.seed)


def cmd_train(rc: RunConfig) -> int:
    write_echo(rc)
    manifest, catalog = _load(rc)
    out = rc.output_dir
    policy = rc.policy
    t0 = time.perf_counter()
    if policy.startswith("pretrain-"):
        a, b = (SamplerMode.TAD_ONLY, SamplerMode.MR_ONLY) if policy == "pretrain-tad2mr" else (SamplerMode.MR_ONLY, SamplerMode.TAD_ONLY)
        _, res = pretrain_finetune(rc.train, _policy_sampler(rc, a), rc.train, _policy_sampler(rc, b),
                                   manifest, catalog, rc.model, rc.eval, out)
    else:
        mode = {"dedicated-tad": SamplerMode.TAD_ONLY, "dedicated-mr": SamplerMode.MR_ONLY,
                "sync": SamplerMode.SYNC, "alt": SamplerMode.ALT, "random": SamplerMode.RANDOM}[policy]
        res = fit(rc.train, _policy_sampler(rc, mode), manifest, catalog, rc.model, rc.eval, out)
    print(f"policy {policy}: {res.steps} steps in {time.perf_counter() - t0:.1f}s")
    if res.final_report is not None:
        _print_report(res.final_report)
    print(f"checkpoints: {res.best_path} {res.last_path}")
    return EXIT_OK


def _print_report(report: dict) -> None:
    for task in ("tad", "mr"):
        r = report.get(task)
        if r is None:
            print(f"  {task}: absent")
            continue
        print(f"  {task}: " + "  ".join(f"{k}={v:.4f}" for k, v in r.items()))


def cmd_eval(rc: RunConfig, checkpoint: str, split: str) -> int:
    write_echo(rc, "config.eval.json")
    manifest, catalog = _load(rc)
    videos = manifest.split(split).videos
    if not videos:
        raise DataError(f"split {split!r} has no videos")
    model = build_model(rc.model)
    load_checkpoint(model, checkpoint)
    report = evaluate_model(model, videos, catalog, rc.eval)
    if report["tad"] is None and report["mr"] is None:
        raise DataError(f"split {split!r} has no annotations")
    _print_report(report)
    path = rc.output_dir / f"eval_{split}.json"
    path.write_text(json.dumps(report, indent=2))
    print(f"report: {path}")
    return EXIT_OK


def cmd_detect(rc: RunConfig, checkpoint: str, video: str | None, features: str | None, queries: str,
               out_path: str | None) -> int:
    write_echo(rc, "config.detect.json")
    if (video is None) == (features is None):
        raise ConfigError("give exactly one of --video or --features")
    qs = read_embedding_file(queries, normalize=rc.data.normalize_embeddings)
    if qs and qs[0].dim != rc.model.d_txt:
        raise ConfigError(f"query embeddings have dimension {qs[0].dim}, model.d_txt is {rc.model.d_txt}")
    if features is not None:
        seq = read_feature_file(features)
        duration = None
    else:
        if not rc.data.manifest or not rc.data.embeddings:
            raise ConfigError("--video needs data.manifest and data.embeddings")
        manifest, _ = load_dataset(rc.data.manifest, rc.data.embeddings, rc.data.features_dir)
        rec = manifest.by_id().get(video)
        if rec is None:
            raise DataError(f"unknown video {video!r}")
        seq, duration = rec.features, rec.duration_sec
    if seq.dim != rc.model.d_in:
        raise ConfigError(f"features have dimension {seq.dim}, model.d_in is {rc.model.d_in}")
    model = build_model(rc.model)
    load_checkpoint(model, checkpoint)
    dets = detect(model, seq.feats, seq.feats_per_sec, qs, rc.eval, seq.video_id, duration)
    path = Path(out_path) if out_path else rc.output_dir / f"detections_{seq.video_id}.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_detections(path, dets)
    print(f"{len(dets)} detections for {len(qs)} queries -> {path}")
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        truth = gen_synthetic(args.out, seed=args.seed, n_videos=args.videos, T=args.T, D=args.D, C=args.C,
                              events_per_video=args.events, extra_actions=args.extra_actions, noise=args.noise,
                              min_len=args.min_len, max_len=args.max_len, tad_only=args.tad_only,
                              mr_only=args.mr_only, val_videos=args.val_videos)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    n_mr = sum(len(v.mr) for v in truth.manifest.videos)
    print(f"wrote {args.videos} videos, {args.C} action classes, {n_mr} event queries to {args.out}")
    return EXIT_OK


def cmd_gradcheck(rc: RunConfig, T: int, queries: int, probes: int, tol: float, corrupt: str | None) -> int:
    from .diagnostics import gradcheck_all

    write_echo(rc, "config.gradcheck.json")
    results = gradcheck_all(rc.model, T=T, num_queries=queries, probe_count=probes, seed=rc.seed, corrupt=corrupt)
    worst = 0.0
    for name, err in results.items():
        flag = "ok" if err < tol else "FAIL"
        print(f"{name:<28s} {err:.3e}  {flag}")
        worst = max(worst, err)
    print(f"worst relative error {worst:.3e} (tolerance {tol:g})")
    return EXIT_OK if worst < tol else EXIT_GRADCHECK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="unimd", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="fit a model under one task-fusion policy")
    tr.add_argument("config")
    tr.add_argument("--policy", choices=POLICIES)
    tr.add_argument("--loss-weights", help="lambda_tad,lambda_mr")
    tr.add_argument("--output-dir")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    ev.add_argument("config")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--split", default="val")
    ev.add_argument("--output-dir")

    de = sub.add_parser("detect", help="run a checkpoint on one video for a set of query embeddings")
    de.add_argument("config")
    de.add_argument("--checkpoint", required=True)
    de.add_argument("--video")
    de.add_argument("--features")
    de.add_argument("--queries", required=True)
    de.add_argument("--out")
    de.add_argument("--output-dir")

    sy = sub.add_parser("synth", help="write a synthetic dataset")
    sy.add_argument("--out", required=True)
    sy.add_argument("--seed", type=int, default=7)
    sy.add_argument("--videos", type=int, default=16)
    sy.add_argument("--T", type=int, default=256)
    sy.add_argument("--D", type=int, default=64)
    sy.add_argument("--C", type=int, default=4)
    sy.add_argument("--events", type=int, default=2)
    sy.add_argument("--extra-actions", type=int, default=1)
    sy.add_argument("--noise", type=float, default=0.1)
    sy.add_argument("--min-len", type=int, default=8)
    sy.add_argument("--max-len", type=int, default=24)
    sy.add_argument("--tad-only", type=int, default=0)
    sy.add_argument("--mr-only", type=int, default=0)
    sy.add_argument("--val-videos", type=int, default=0)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every layer and the composed model")
    gc.add_argument("config", nargs="?")
    gc.add_argument("--T", type=int, default=64)
    gc.add_argument("--queries", type=int, default=3)
    gc.add_argument("--probes", type=int, default=3)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.add_argument("--output-dir")
    gc.add_argument("--corrupt-backward", default=None, help=argparse.SUPPRESS)
    return ap


def _limit_threads() -> None:
    n = os.environ.get("UNIMD_THREADS")
    if not n:
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        log.warning("threadpoolctl not installed; UNIMD_THREADS ignored")
        return
    threadpool_limits(int(n))


def main(argv: list[str] | None = None) -> int:
    # overflow surfaces as NonFiniteError from the op that produced it
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        return _main(argv)


def _main(argv: list[str] | None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    rest, extra = split_overrides(argv)
    args = parser.parse_args(rest)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    _limit_threads()
    try:
        if args.command == "synth":
            if extra:
                raise ConfigError(f"unrecognized arguments {extra}")
            return cmd_synth(args)
        overrides = parse_overrides(extra)
        top = overrides
        if getattr(args, "policy", None):
            top["policy"] = args.policy
        if getattr(args, "loss_weights", None):
            try:
                lw = [float(x) for x in args.loss_weights.split(",")]
            except ValueError:
                raise ConfigError(f"--loss-weights expects two numbers, got {args.loss_weights!r}") from None
            if len(lw) != 2:
                raise ConfigError("--loss-weights expects lambda_tad,lambda_mr")
            top.setdefault("train", {})["loss_weights"] = lw
        if getattr(args, "output_dir", None):
            top["output_dir"] = args.output_dir
        rc = resolve_config(args.config, top)
        set_default_dtype(rc.dtype)
        if args.command == "train":
            return cmd_train(rc)
        if args.command == "eval":
            return cmd_eval(rc, args.checkpoint, args.split)
        if args.command == "detect":
            return cmd_detect(rc, args.checkpoint, args.video, args.features, args.queries, args.out)
        if args.command == "gradcheck":
            return cmd_gradcheck(rc, args.T, args.queries, args.probes, args.tol, args.corrupt_backward)
    except (ConfigError, ArchitectureMismatch, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, EmptyTaskError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    parser.error(f"unknown command {args.command}")
    return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
