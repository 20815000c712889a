"""Command-line entry point: gen-data, train, eval, demo, ablate."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import PRESETS, ConfigError, RunConfig, preset

log = logging.getLogger("fgn")


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(args, base: RunConfig | None = None) -> RunConfig:
    """Defaults (or ``base``), then the config file, then ``--set`` overrides, then flags."""
    if getattr(args, "config", None) in PRESETS:
        cfg = preset(args.config)
    elif getattr(args, "config", None):
        cfg = RunConfig.load(args.config)
    else:
        cfg = (base or RunConfig()).validate()
    over = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        over[k.strip()] = _parse_value(v)
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    for name in ("n", "k"):
        val = getattr(args, name, None)
        if val is not None:
            over["eval.n_way" if name == "n" else "eval.k_shot"] = val
    return cfg.override(over) if over else cfg


def _require_dir(path, what):
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"{what} directory not found: {p}")
    return p


def _load_data(path):
    from .dataset import load_corpus

    p = _require_dir(path, "data")
    if not (p / "annotations.json").exists():
        raise FileNotFoundError(f"no annotations.json under {p}; run gen-data first")
    return load_corpus(p)


def _checkpoint_config(path, fallback: RunConfig):
    """The run config echoed next to a checkpoint, if any, else ``fallback``."""
    for cand in (Path(path) / "config.json", Path(path).parent / "config.json"):
        if cand.exists():
            return RunConfig.load(cand)
    return fallback


def cmd_gen_data(args):
    from .dataset import generate_shapes_corpus

    cfg = resolve_config(args)
    over = {}
    if args.base_classes is not None:
        over["data.base_classes"] = args.base_classes
    if args.novel_classes is not None:
        over["data.novel_classes"] = args.novel_classes
    if args.num_images is not None:
        over["data.num_images"] = args.num_images
    cfg = cfg.override(over) if over else cfg
    out = Path(args.out)
    index = generate_shapes_corpus(cfg.data, cfg.seed, out_dir=out)
    print(f"wrote {len(index.images)} images, {len(index)} instances to {out}")


def cmd_train(args):
    from .pipeline import build_protocol, train_two_stage
    from .training import TrainState

    cfg = resolve_config(args)
    index = _load_data(args.data)
    stages = {"1": (1,), "2": (2,), "both": (1, 2)}[args.stage]
    state = None
    if 2 in stages and 1 not in stages:
        resume = Path(args.resume) if args.resume else Path(args.out) / "stage1_final"
        if not (resume / "manifest.json").exists():
            raise FileNotFoundError(f"stage 2 needs a stage-1 checkpoint; none at {resume}")
        state = TrainState.load(resume, expect=cfg.model)
    protocol = build_protocol(index, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    state = train_two_stage(cfg, protocol, out, stages, state=state)
    for stage in stages:
        cfg.save(out / f"stage{stage}_final" / "config.json")
    print(f"trained stages {list(stages)}; {state.skipped} episodes skipped; checkpoints in {out}")


def _load_for_eval(args):
    from .backbone import ModelParameters

    ck = Path(args.checkpoint)
    if not (ck / "manifest.json").exists():
        raise FileNotFoundError(f"no checkpoint at {ck}")
    cfg = resolve_config(args, _checkpoint_config(ck, RunConfig()))
    params = ModelParameters.load(ck, expect=cfg.model)
    return cfg, params


def _eval_with_overlays(params, cfg, tasks, args):
    from .evaluation import evaluate, make_predictor
    from .viz import save_panel

    out = Path(args.overlays)
    out.mkdir(parents=True, exist_ok=True)
    predict = make_predictor(params, cfg.proposals)
    counter = iter(range(len(tasks)))

    def predictor(task):
        pred = predict(task)
        save_panel(out / f"task{next(counter):04d}.png", task, pred)
        return pred

    return evaluate(predictor, tasks, cfg.eval.ar_cap, cfg.to_dict(), str(args.checkpoint))


def cmd_eval(args):
    from .pipeline import build_protocol, evaluate_params

    cfg, params = _load_for_eval(args)
    protocol = build_protocol(_load_data(args.tasks), cfg)
    if args.overlays:
        report = _eval_with_overlays(params, cfg, protocol.tasks, args)
    else:
        report = evaluate_params(params, cfg, protocol.tasks, str(args.checkpoint))
    report.save(args.out)
    agg = report.aggregates
    print(f"tasks {agg['num_tasks']}: det mAP50 {100 * agg['det_map50']:.1f}  "
          f"seg mAP50 {100 * agg['seg_map50']:.1f}  AR50 {100 * agg['ar50']:.1f}")


def cmd_demo(args):
    from .evaluation import write_detections_csv
    from .guidance_rpn import write_proposals_csv
    from .model import predict
    from .pipeline import build_protocol
    from .viz import save_masks, save_panel

    cfg, params = _load_for_eval(args)
    tasks = build_protocol(_load_data(args.data), cfg).tasks
    if not 0 <= args.task < len(tasks):
        raise ConfigError(f"--task {args.task} outside 0..{len(tasks) - 1}")
    task = tasks[args.task]
    pred = predict(params, task, cfg.proposals)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    shape = save_panel(out, task, pred)
    stem = out.with_suffix("")
    write_detections_csv(f"{stem}_detections.csv", pred, task.class_map)
    write_proposals_csv(f"{stem}_proposals.csv", pred.proposals)
    save_masks(str(stem), pred)
    print(f"wrote {out} ({shape[1]}x{shape[0]}) with {len(pred.boxes)} detections")


def cmd_ablate(args):
    from .pipeline import VARIANTS, ablation_tables, build_protocol, format_tables, run_ablation

    cfg = resolve_config(args)
    index = _load_data(args.data)
    names = args.variants or list(VARIANTS)
    unknown = [n for n in names if n not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variants {unknown}; choose from {list(VARIANTS)}")
    protocol = build_protocol(index, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    reports = run_ablation(cfg, protocol, names, out)
    rows, rpn = ablation_tables(reports)
    (out / "ablation.json").write_text(json.dumps({"table4": rows, "table5": rpn, "config": cfg.to_dict()},
                                                  indent=2))
    print(format_tables(rows, rpn))


def build_parser():
    p = argparse.ArgumentParser(prog="fgn", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON run config, or a preset name (desk)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key, e.g. train.stage1_steps=50 (repeatable)")
        sp.add_argument("--seed", type=int)

    g = sub.add_parser("gen-data", help="render the synthetic shapes corpus")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--base-classes", nargs="+", metavar="SHAPE")
    g.add_argument("--novel-classes", nargs="+", metavar="SHAPE")
    g.add_argument("--num-images", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="two-stage training")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--stage", choices=("1", "2", "both"), default="both")
    t.add_argument("--resume", help="stage-1 checkpoint for --stage 2")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on novel-class test tasks")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--tasks", required=True, help="corpus directory the test tasks are built from")
    e.add_argument("--n", type=int)
    e.add_argument("--k", type=int)
    e.add_argument("--out", required=True)
    e.add_argument("--overlays", help="directory for per-task PNG panels")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("demo", help="render support / query / truth / prediction panels")
    common(d)
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--task", type=int, default=0)
    d.add_argument("--out", required=True, help="PNG path")
    d.set_defaults(func=cmd_demo)

    a = sub.add_parser("ablate", help="retrain and compare the guidance variants")
    common(a)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--variants", nargs="*", help="subset of FGN-P FGN-DS FGN-PS FGN-PD FGN")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    level = os.environ.get("FGN_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        args.func(args)
    except (ConfigError, FileNotFoundError, ValueError, KeyError) as e:
        print(f"fgn {args.command}: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
