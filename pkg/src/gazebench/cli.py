"""Command-line entry point: generate | annotate | train | eval | stats."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import tensorio
from .annotation import AnnotationConfig, annotate_session, make_heatmap_target, pair_clips
from .errors import ConfigInvalid, GazebenchError, NoSessions
from .evaluation import DEFAULT_THRESHOLDS, dataset_stats, evaluate_model
from .model import LossWeights, ModelConfig
from .report import emit_report, emit_stats
from .synthworld import SceneConfig, generate_session, read_session, write_session
from .training import (
    VARIANTS,
    TrainConfig,
    history_csv,
    load_checkpoint,
    save_checkpoint,
    train,
)

log = logging.getLogger("gazebench")


class UsageError(Exception):
    pass


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("GAZEBENCH_THREADS", "1")))
    except ValueError:
        return 1


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    unknown = set(cfg) - {"scene", "annotation", "train", "eval"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _annotation_config(cfg: dict) -> AnnotationConfig:
    return AnnotationConfig.from_dict(cfg.get("annotation", {}))


def _session_dirs(data: Path) -> list[Path]:
    manifest = data / "manifest.json"
    if manifest.exists():
        names = json.loads(manifest.read_text())["sessions"]
        dirs = [data / n for n in names]
    else:
        dirs = sorted(p.parent for p in data.glob("*/meta.json"))
    if not dirs:
        raise NoSessions(f"no sessions found in {data}")
    return dirs


def split_sessions(names: list[str]) -> dict:
    """Every third session (by sorted id) is held out: a 2:1 train/test split."""
    names = sorted(names)
    test = [n for i, n in enumerate(names) if i % 3 == 2]
    train_ = [n for n in names if n not in test]
    return {"train": train_, "test": test}


# ------------------------------------------------------------ commands

def cmd_generate(args, cfg: dict) -> int:
    scene = dict(cfg.get("scene", {}))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [args.seed + i for i in range(args.sessions)]

    def one(seed):
        sc = SceneConfig.from_dict({**scene, "seed": seed})
        rec = generate_session(sc, render=not args.no_frames)
        write_session(rec, out / rec.session_id)
        return rec.session_id

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        names = list(pool.map(one, seeds))
    manifest = {"sessions": names, "seeds": seeds}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"generated {len(names)} session(s) in {out}")
    return 0


def _annotate_all(data: Path, ann: AnnotationConfig, names=None, with_frames=True):
    results = {}
    for d in _session_dirs(data):
        if names is not None and d.name not in names:
            continue
        rec = read_session(d)
        results[d.name] = (rec, annotate_session(rec, ann, with_frames=with_frames))
    return results


def cmd_annotate(args, cfg: dict) -> int:
    data = Path(args.data)
    ann = _annotation_config(cfg)
    results = _annotate_all(data, ann, with_frames=False)
    lines = []
    for name in sorted(results):
        _, a = results[name]
        for c in a.clips:
            lines.append(json.dumps({
                "session": c.session_id, "view": c.view, "start": c.start, "length": c.length,
                "offset": a.offset, "labels": [s.label for s in c.samples],
            }))
    (data / "clips.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))
    split = split_sessions(list(results))
    (data / "split.json").write_text(json.dumps(split, indent=2) + "\n")
    if args.write_targets:
        for name, (rec, a) in sorted(results.items()):
            h, w = rec.config.height, rec.config.width
            for v, samples in a.labels.items():
                maps = np.stack([make_heatmap_target(smp, h, w, ann.sigma) for smp in samples])
                tensorio.save(data / name / f"targets_{v}.gzt", maps.astype(np.float32))
    worst = max((a.mapping_error for _, a in results.values()), default=0.0)
    print(f"annotated {len(results)} session(s), {len(lines)} clip(s); "
          f"max cross-view mapping error {worst:.2e} px")
    return 0


def _load_split(data: Path) -> dict:
    p = data / "split.json"
    if not p.exists():
        raise NoSessions(f"{p} missing; run annotate first")
    return json.loads(p.read_text())


def _clips_for(data: Path, ann: AnnotationConfig, names) -> list:
    results = _annotate_all(data, ann, names=set(names))
    clips = []
    for name in sorted(results):
        clips.extend(results[name][1].clips)
    return clips


def cmd_train(args, cfg: dict) -> int:
    data = Path(args.data)
    ann = _annotation_config(cfg)
    tcfg = dict(cfg.get("train", {}))
    tcfg["variant"] = args.variant
    for flag, key in (("seed", "seed"), ("epochs", "epochs"), ("lr", "lr"), ("batch_size", "batch_size")):
        if getattr(args, flag) is not None:
            tcfg[key] = getattr(args, flag)
    if "seed" not in tcfg:
        raise UsageError("a seed is required: pass --seed or set train.seed in the config")
    if "weights" in tcfg and isinstance(tcfg["weights"], dict):
        tcfg["weights"] = LossWeights(**tcfg["weights"])
    try:
        config = TrainConfig.from_dict(tcfg)
    except TypeError as exc:
        raise UsageError(str(exc)) from exc
    split = _load_split(data)
    clips = _clips_for(data, ann, split["train"])
    if config.variant == "colearn":
        dataset = pair_clips(clips)
    else:
        dataset = [c for c in clips if c.view == config.view]
    if args.max_clips is not None:
        dataset = dataset[:args.max_clips]
    log.info("training %s on %d item(s)", config.variant, len(dataset))
    result = train(dataset, config, ann=ann,
                   log=lambda row: log.info("epoch %d: %s", row["epoch"], row))
    sample = dataset[0].neck if config.variant == "colearn" else dataset[0]
    model_cfg = ModelConfig(sample.frames.shape[1], ann.crop_w or sample.frames.shape[2])
    echo = {"train": _jsonable(config), "annotation": dataclasses.asdict(ann),
            "model": model_cfg.to_dict()}
    params = dict(result.params)
    if result.head_params is not None:
        params.update({f"head/{k}": v for k, v in result.head_params.items()})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    state = result.state
    if result.head_state is not None:
        # colearn: both optimizer states travel in one file under prefixed names
        state = dataclasses.replace(
            state,
            m={**state.m, **{f"head/{k}": v for k, v in result.head_state.m.items()}},
            v={**state.v, **{f"head/{k}": v for k, v in result.head_state.v.items()}},
        )
    save_checkpoint(params, state, echo, out)
    out.with_suffix(".history.csv").write_text(history_csv(result.history))
    last = result.history[-1]
    print(f"trained {config.variant}: final epoch loss {last['total']:.4f}; checkpoint {out}")
    return 0


def _jsonable(config: TrainConfig) -> dict:
    d = dataclasses.asdict(config)
    return json.loads(json.dumps(d))


def cmd_eval(args, cfg: dict) -> int:
    data = Path(args.data)
    ckpt = Path(args.ckpt)
    if not ckpt.exists():
        print(f"error: checkpoint {ckpt} not found", file=sys.stderr)
        return 1
    params, _, echo = load_checkpoint(ckpt)
    params = {k: v for k, v in params.items() if not k.startswith("head/")}
    ann = AnnotationConfig.from_dict(echo.get("annotation", {}))
    tcfg = echo.get("train", {})
    variant = tcfg.get("variant", "")
    view = tcfg.get("view", "neck")
    ecfg = cfg.get("eval", {})
    thresholds = tuple(ecfg.get("thresholds", DEFAULT_THRESHOLDS))
    relative = bool(ecfg.get("relative", True))
    split = _load_split(data)
    if args.split not in split:
        raise UsageError(f"unknown split {args.split!r}")
    clips = [c for c in _clips_for(data, ann, split[args.split]) if c.view == view]
    report = evaluate_model(params, clips, ann, variant=variant, thresholds=thresholds,
                            relative=relative, with_classifier=(variant == "aux"))
    hist_path = ckpt.with_suffix(".history.csv")
    histories = {}
    if hist_path.exists():
        import csv
        rows = list(csv.DictReader(hist_path.read_text().splitlines()))
        histories[variant or "model"] = [
            {k: (int(v) if k == "epoch" else float(v)) for k, v in r.items() if k != "wall_time"}
            for r in rows
        ]
    emit_report([report], args.report, histories)
    print(f"{variant} adaptive F1 {100 * report.f1:.1f} (P {100 * report.precision:.1f}, "
          f"R {100 * report.recall:.1f}) at threshold {report.threshold}")
    if report.classifier:
        c = report.classifier
        print(f"in-view classifier F1 {100 * c['f1']:.1f} (P {100 * c['precision']:.1f}, "
              f"R {100 * c['recall']:.1f})")
    return 0


def cmd_stats(args, cfg: dict) -> int:
    data = Path(args.data)
    ann = _annotation_config(cfg)
    sessions = [read_session(d) for d in _session_dirs(data)]
    stats = dataset_stats(sessions, ann)
    emit_stats(stats, args.report)
    for v in stats:
        s = stats[v]
        print(f"{v}: out-of-bound {100 * s['out_of_bound_rate']:.1f}% of {s['valid']} valid points; "
              f"mean gaze ({s['mean_gaze'][0]:.3f}, {s['mean_gaze'][1]:.3f})")
    return 0


# ------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gazebench", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate synthetic sessions")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--sessions", type=int, default=1)
    g.add_argument("--no-frames", action="store_true", help="skip rendering (gaze and poses only)")
    g.set_defaults(func=cmd_generate)

    a = sub.add_parser("annotate", help="synchronize, label and segment sessions")
    a.add_argument("--data", required=True)
    a.add_argument("--config")
    a.add_argument("--write-targets", action="store_true",
                   help="also write per-session targets_<view>.gzt heatmap tensors")
    a.set_defaults(func=cmd_annotate)

    t = sub.add_parser("train", help="train one model variant")
    t.add_argument("--data", required=True)
    t.add_argument("--variant", required=True, choices=VARIANTS)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--max-clips", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--report", required=True)
    e.add_argument("--config")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("stats", help="dataset statistics")
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_stats)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(getattr(args, "config", None))
        return args.func(args, cfg)
    except (UsageError, ConfigInvalid) as exc:
        parser.print_usage(sys.stderr)
        print(f"gazebench: error: {exc}", file=sys.stderr)
        return 2
    except GazebenchError as exc:
        print(f"gazebench: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
