"""Experiment protocol: data splits, two-stage training, evaluation and the ablation grid."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import ModelParameters, init_parameters
from .config import GUIDED, UNGUIDED, RunConfig
from .dataset import (
    AnnotationIndex,
    build_finetune_set,
    build_test_tasks,
    generate_shapes_corpus,
    load_corpus,
    select_novel_support,
)
from .evaluation import EvalReport, evaluate, make_predictor
from .training import TrainState, run_stage

log = logging.getLogger(__name__)

# Table-4 rows: which modules keep their guidance
VARIANTS = {
    "FGN-P": (GUIDED, UNGUIDED, UNGUIDED),
    "FGN-DS": (UNGUIDED, GUIDED, GUIDED),
    "FGN-PS": (GUIDED, UNGUIDED, GUIDED),
    "FGN-PD": (GUIDED, GUIDED, UNGUIDED),
    "FGN": (GUIDED, GUIDED, GUIDED),
}


@dataclass
class Protocol:
    base: AnnotationIndex  # stage-1 data
    finetune: AnnotationIndex  # stage-2 data
    tasks: list  # novel-class test tasks
    novel_support_images: tuple


def load_or_generate(cfg: RunConfig, data_dir=None) -> AnnotationIndex:
    if data_dir is not None and (Path(data_dir) / "annotations.json").exists():
        return load_corpus(data_dir)
    return generate_shapes_corpus(cfg.data, cfg.seed, out_dir=data_dir)


def build_protocol(index: AnnotationIndex, cfg: RunConfig) -> Protocol:
    """Base training data, the K-shot fine-tune set and the test tasks.

    The images that supply the fine-tune novel supports are held out of the
    test tasks so that no test query was seen during fine-tuning.
    """
    rng = np.random.default_rng([cfg.seed, 2])
    base = index.base_view()
    novel = index.novel_view()
    support = select_novel_support(novel, cfg.train.k_shot, rng, cfg.model.margin_px)
    finetune = build_finetune_set(base, support, len(novel.classes), cfg.train.k_shot, rng)
    held = tuple(sorted({s.source.image_id for s in support}))
    test = novel.restrict(image_ids=[m for m in novel.image_ids if m not in held])
    tasks = build_test_tasks(test, cfg.eval.n_way, cfg.eval.k_shot, rng, cfg.model.margin_px)
    return Protocol(base, finetune, tasks, held)


def train_two_stage(cfg: RunConfig, protocol: Protocol, out_dir=None, stages=(1, 2), observer=None,
                    state: TrainState | None = None) -> TrainState:
    if state is None:
        state = TrainState.fresh(init_parameters(cfg.model, cfg.seed), cfg.seed)
    for stage in stages:
        t0 = time.time()
        data = protocol.base if stage == 1 else protocol.finetune
        obs = observer if stage == 1 else None
        state = run_stage(state, data, cfg, stage, out_dir, observer=obs)
        log.info("stage %d: %d steps in %.1fs (%d episodes skipped)", stage, state.step, time.time() - t0,
                 state.skipped)
    return state


def evaluate_params(params: ModelParameters, cfg: RunConfig, tasks, checkpoint="") -> EvalReport:
    return evaluate(make_predictor(params, cfg.proposals), tasks, cfg.eval.ar_cap, cfg.to_dict(), checkpoint)


def variant_config(cfg: RunConfig, name: str) -> RunConfig:
    rpn, det, fcn = VARIANTS[name]
    return cfg.override({"model.ag_rpn": rpn, "model.rg_det": det, "model.ag_fcn": fcn,
                         "model.n_way": cfg.train.n_way})


def run_ablation(cfg: RunConfig, protocol: Protocol, names=tuple(VARIANTS), out_dir=None):
    """Retrain and evaluate every variant; returns {name: EvalReport}."""
    reports = {}
    for name in names:
        vcfg = variant_config(cfg, name)
        vout = Path(out_dir) / name if out_dir is not None else None
        state = train_two_stage(vcfg, protocol, vout)
        reports[name] = evaluate_params(state.params, vcfg, protocol.tasks, str(vout or ""))
        if vout is not None:
            reports[name].save(vout)
        log.info("%s: %s", name, reports[name].aggregates)
    return reports


def ablation_tables(reports):
    """Table-4 rows (seg / det mAP50 x100) and the Table-5 RPN vs AG-RPN AR50 pair."""
    rows = []
    for name in VARIANTS:
        if name in reports:
            agg = reports[name].aggregates
            flags = VARIANTS[name]
            rows.append({"variant": name, "ag_rpn": flags[0] == GUIDED, "rg_det": flags[1] == GUIDED,
                         "ag_fcn": flags[2] == GUIDED, "seg_map50": 100 * agg["seg_map50"],
                         "det_map50": 100 * agg["det_map50"], "ar50": 100 * agg["ar50"]})
    rpn = {}
    if "FGN-DS" in reports:
        rpn["RPN"] = 100 * reports["FGN-DS"].aggregates["ar50"]
    if "FGN" in reports:
        rpn["AG-RPN"] = 100 * reports["FGN"].aggregates["ar50"]
    return rows, rpn


def format_tables(rows, rpn):
    lines = [f"{'variant':8s} {'AG-RPN':>6s} {'RG-DET':>6s} {'AG-FCN':>6s} {'seg':>6s} {'det':>6s}"]
    mark = {True: "x", False: ""}
    for r in rows:
        lines.append(f"{r['variant']:8s} {mark[r['ag_rpn']]:>6s} {mark[r['rg_det']]:>6s} "
                     f"{mark[r['ag_fcn']]:>6s} {r['seg_map50']:6.1f} {r['det_map50']:6.1f}")
    if rpn:
        lines.append("")
        lines.append("  ".join(f"{k}: AR50 {v:.1f}" for k, v in rpn.items()))
    return "\n".join(lines)
