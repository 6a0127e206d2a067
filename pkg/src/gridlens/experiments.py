"""One function per CLI subcommand; each fills a runner Context."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Callable

import numpy as np

from gridlens import ablation, causal, gridworld, metrics, planted, probes, training
from gridlens.evaluation import (Example, binary_classification, examples_from_scenes, generate_answers,
                                 list_classification, localization, query_inputs)
from gridlens.model import prompts
from gridlens.model.config import ModelConfig
from gridlens.model.weights import ModelWeights, checkpoint_bytes, load_checkpoint
from gridlens.runner import ConfigError, Context, RunRecord, read_csv

PARAM_DEFAULTS: dict[str, dict] = {
    "gen": {"n_scenes": 500, "n_pairs": 50,
            "scene": {"grid_size": 8, "n_classes": 10, "d_vis": 32, "n_objects": [1, 3], "min_side": 1,
                      "max_side": 4, "noise_scale": 0.002}},
    "plant": {"model": {}, "temperature": None},
    "train": {"model": {}, "n_scenes": None, "steps": 400, "batch_size": 16, "lr": 0.05, "momentum": 0.9,
              "init_scale": 0.3, "clip_norm": 5.0},
    "eval": {"n_examples": None, "list": True},
    "ablate": {"n_examples": 100, "parts": ["table", "containerization", "shuffle"],
               "paddings": [-2, -1, 0, 1, 2], "n_random_seeds": 3, "ig_objective": "box_coordinates",
               "ig_steps": 64, "include_register": True,
               "containerization": {"n_examples": 500, "paddings": [0, 1, 2], "scalings": [0, 1, 2], "n_seeds": 10},
               "n_shuffle_seeds": 3},
    "probe": {"n_train": 200, "n_test": 100, "epochs": probes.DEFAULT_EPOCHS, "tags": None,
              "shuffle_labels": False},
    "knockout": {"n_examples": 100, "group_size": 4, "include_all_layers": True},
    "cma": {"task": "localization", "n_examples": 50, "apply_filter": True},
    "head-ablate": {"n_examples": 100, "n_pairs": 50, "fractions": list(causal.DEFAULT_FRACTIONS),
                    "classification": True},
    "report": {"runs": []},
}


def _need(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def _model(ctx: Context) -> ModelWeights:
    return load_checkpoint(ctx.config.model)


def _manifest(ctx: Context, weights: ModelWeights | None = None):
    scenes, pairs = gridworld.read_manifest(ctx.config.scenes)
    if weights is not None:
        g = weights.config.grid_size
        bad = [s for s in scenes + [p.source for p in pairs] if s.grid_size != g]
        _need(not bad, f"manifest has grid size {bad[0].grid_size if bad else g}, model expects {g}")
    return scenes, pairs


def _examples(ctx: Context, weights: ModelWeights, n: int | None) -> list[Example]:
    scenes, _ = _manifest(ctx, weights)
    ex = examples_from_scenes(scenes)
    _need(bool(ex), "scene manifest contains no scenes")
    return ex if n is None else ex[:n]


def _model_config(overrides: dict) -> ModelConfig:
    try:
        return ModelConfig.from_dict(dict(overrides))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"params.model: {e}") from e


# --------------------------------------------------------------------------


def run_gen(ctx: Context) -> None:
    p = ctx.params
    sp = dict(p["scene"])
    sp["n_objects"] = tuple(sp["n_objects"])
    params = gridworld.SceneParams(**sp)
    scenes = gridworld.generate_scenes(p["n_scenes"], ctx.derive_seed("scenes"), params)
    pair_scenes = gridworld.generate_scenes(p["n_pairs"], ctx.derive_seed("pair_scenes"), params)
    rng = np.random.default_rng(ctx.derive_seed("pair_targets"))
    pairs = [gridworld.make_control_pair(s, s.objects[int(rng.integers(len(s.objects)))].class_id)
             for s in pair_scenes]
    ctx.sink.text("scenes.jsonl", gridworld.manifest_text(scenes, pairs))
    ctx.sink.csv("scenes.csv", ["index", "n_objects", "classes", "boxes"],
                 [[i, len(s.objects), [o.class_id for o in s.objects], [v for o in s.objects for v in o.box]]
                  for i, s in enumerate(scenes)])
    ctx.summary.update(n_scenes=len(scenes), n_pairs=len(pairs), n_objects=sum(len(s.objects) for s in scenes))


def run_plant(ctx: Context) -> None:
    cfg = _model_config(ctx.params["model"])
    weights, manifest = planted.plant_model(cfg, temperature=ctx.params["temperature"])
    ctx.sink.binary("model.glck", checkpoint_bytes(weights))
    ctx.sink.text("circuit.json", manifest.to_json() + "\n")
    ctx.summary.update(temperature=manifest.temperature, approximation_error=manifest.approximation_error,
                       cls_head=list(manifest.cls_head), loc_heads=[list(h) for h in manifest.loc_head_list])


def run_train(ctx: Context) -> None:
    p = ctx.params
    cfg = _model_config(p["model"])
    scenes, _ = _manifest(ctx)
    _need(all(s.grid_size == cfg.grid_size for s in scenes), "manifest grid size does not match params.model")
    if p["n_scenes"] is not None:
        scenes = scenes[:p["n_scenes"]]
    data = [e for s in scenes for e in training.examples_for_scene(s, cfg)]
    hp = training.Hyperparams(steps=p["steps"], batch_size=p["batch_size"], lr=p["lr"], momentum=p["momentum"],
                              init_scale=p["init_scale"], clip_norm=p["clip_norm"])
    history = training.TrainingLog()
    try:
        weights = training.train_model(cfg, data, hp, ctx.derive_seed("train"), history)
    except training.TrainingError as e:
        ctx.sink.binary("model.last_finite.glck", checkpoint_bytes(e.checkpoint))
        ctx.sink.csv("loss.csv", ["step", "loss"], list(enumerate(history.losses)))
        raise
    ctx.sink.binary("model.glck", checkpoint_bytes(weights))
    ctx.sink.csv("loss.csv", ["step", "loss"], list(enumerate(history.losses)))
    ctx.summary.update(n_examples=len(data), initial_loss=history.initial_loss, final_loss=history.losses[-1],
                       final_answer_accuracy=history.final_accuracy)


def run_eval(ctx: Context) -> None:
    weights = _model(ctx)
    ex = _examples(ctx, weights, ctx.params["n_examples"])
    score, boxes, ious = localization(weights, ex)
    cls = binary_classification(weights, ex)
    rows = [[i, e.target_class, e.box, b.as_tuple() if b else "", "" if b else b.reason, iou]
            for i, (e, b, iou) in enumerate(zip(ex, boxes, ious))]
    ctx.sink.csv("eval.csv", ["index", "target_class", "box", "predicted", "parse_failure", "iou"], rows)
    rates = metrics.success_rates(ious)
    ctx.summary.update(n_examples=len(ex), localization_score=score, success_at_0_5=rates[0],
                       success_at_0_7=rates[1], success_at_0_9=rates[2], binary_accuracy=cls)
    if ctx.params["list"]:
        ctx.summary["list_accuracy"] = list_classification(weights, ex)
    _, pairs = _manifest(ctx, weights)
    if pairs:
        inp = query_inputs(weights, [q.base for q in pairs], [q.target_class for q in pairs], prompts.CLASSIFY_BINARY)
        ctx.summary["false_positive_rate"] = metrics.false_positive_rate(generate_answers(weights, inp))


def run_ablate(ctx: Context) -> None:
    p = ctx.params
    weights = _model(ctx)
    unknown = set(p["parts"]) - {"table", "containerization", "shuffle"}
    _need(not unknown, f"unknown ablate parts {sorted(unknown)}")
    ex = _examples(ctx, weights, p["n_examples"])
    if "table" in p["parts"]:
        seeds = [ctx.derive_seed("random_ablation", i) for i in range(p["n_random_seeds"])]
        table = ablation.ablation_table(weights, ex, paddings=tuple(p["paddings"]), random_seeds=seeds,
                                        ig_objective_name=p["ig_objective"], ig_steps=p["ig_steps"],
                                        include_register=p["include_register"])
        cols = list(ablation.AblationRow.CSV_COLUMNS) + ["n_flagged_empty", "mean_object_overlap", "ig_residual_max"]
        ctx.sink.csv("ablation.csv", cols, [[getattr(r, c) for c in cols] for r in table.rows])
        ctx.summary.update(baseline_loc=table.baseline_loc, baseline_cls=table.baseline_cls)
        for r in table.rows:
            ctx.summary[f"loc[{r.strategy}]"] = r.loc_acc
    if "containerization" in p["parts"]:
        c = p["containerization"]
        cex = _examples(ctx, weights, c["n_examples"])
        seeds = [ctx.derive_seed("containerization", i) for i in range(c["n_seeds"])]
        res = ablation.containerization_sweep(weights, cex, tuple(c["paddings"]), tuple(c["scalings"]), seeds)
        ctx.sink.grid("containerization_mean.csv", res.mean, res.paddings, res.scalings, "padding\\scaling")
        ctx.sink.grid("containerization_std.csv", res.std, res.paddings, res.scalings, "padding\\scaling")
        ctx.sink.json("containerization.json", {"seeds": list(res.seeds), "n_used": res.n_used,
                                                "n_skipped": res.n_skipped, "paddings": list(res.paddings),
                                                "scalings": list(res.scalings)})
        ctx.summary.update(containerization_used=res.n_used, containerization_skipped=res.n_skipped,
                           diagonal_is_row_max=bool(all(res.mean[i, i] >= res.mean[i].max()
                                                        for i in range(min(res.mean.shape)))))
    if "shuffle" in p["parts"]:
        rows = []
        for mode in ("object", "full"):
            seeds = [ctx.derive_seed(f"shuffle_{mode}", i) for i in range(p["n_shuffle_seeds"])]
            r = ablation.shuffle_experiment(weights, ex, mode, seeds)
            rows.append([mode, r.loc_mean, r.loc_std, r.cls_mean, r.cls_std, r.baseline_loc, r.baseline_cls])
            ctx.summary[f"shuffle_{mode}_loc"] = r.loc_mean
            ctx.summary[f"shuffle_{mode}_cls"] = r.cls_mean
        ctx.sink.csv("shuffle.csv", ["mode", "loc_mean", "loc_std", "cls_mean", "cls_std", "baseline_loc",
                                     "baseline_cls"], rows)


def run_probe(ctx: Context) -> None:
    p = ctx.params
    weights = _model(ctx)
    scenes, _ = _manifest(ctx, weights)
    _need(len(scenes) >= p["n_train"] + p["n_test"],
          f"probe needs {p['n_train'] + p['n_test']} scenes, manifest has {len(scenes)}")
    train, test = scenes[:p["n_train"]], scenes[p["n_train"]:p["n_train"] + p["n_test"]]
    curve = probes.probe_curve(weights, train, test, tags=p["tags"], epochs=p["epochs"],
                               rng_seed=ctx.derive_seed("probe"), shuffle_labels=p["shuffle_labels"])
    ctx.sink.csv("probe.csv", ["tag", "row_acc", "column_acc", "joint_acc"],
                 [[lp.tag, lp.row_acc, lp.column_acc, lp.joint_acc] for lp in curve.layers])
    g = weights.config.grid_size
    ctx.sink.grid("heatmap.csv", curve.heatmap, range(g), range(g), "row\\column")
    ctx.sink.json("probe.json", {"best_tag": curve.best_tag, "metadata": curve.metadata})
    ctx.summary.update(best_tag=curve.best_tag, best_joint=max(curve.joint))
    for lp in curve.layers:
        ctx.summary[f"joint[{lp.tag}]"] = lp.joint_acc


def run_knockout(ctx: Context) -> None:
    p = ctx.params
    weights = _model(ctx)
    ex = _examples(ctx, weights, p["n_examples"])
    spec = causal.KnockoutSpec.consecutive(weights.config.n_layers, p["group_size"], p["include_all_layers"])
    base_loc, base_cls, rows = causal.attention_knockout_sweep(weights, ex, spec)
    ctx.sink.csv("knockout.csv", ["group", "layers", "loc_acc", "cls_acc", "loc_delta", "cls_delta"],
                 [["baseline", "", base_loc, base_cls, 0.0, 0.0]]
                 + [[r.group, r.layers, r.loc_acc, r.cls_acc, r.loc_delta, r.cls_delta] for r in rows])
    ctx.summary.update(baseline_loc=base_loc, baseline_cls=base_cls)
    for r in rows:
        ctx.summary[f"loc[{r.group}]"] = r.loc_acc


def _pairs(ctx: Context, weights: ModelWeights, n: int | None = None):
    _, pairs = _manifest(ctx, weights)
    _need(bool(pairs), "scene manifest contains no control pairs")
    return pairs if n is None else pairs[:n]


def _write_mediation(ctx: Context, report: causal.MediationReport) -> causal.HeadRanking:
    L, H = report.mf.shape
    t = report.task
    ctx.sink.grid(f"mf_{t}.csv", report.mf, range(L), range(H), "layer\\head")
    ranking = causal.HeadRanking.from_report(report)
    ctx.sink.csv(f"ranking_{t}.csv", ["rank", "layer", "head", "mean_mf"],
                 [[i, layer, head, v] for i, (layer, head, v) in enumerate(ranking.entries)])
    ctx.sink.json(f"cma_{t}.json", {"n_examples": report.n_examples, "n_excluded": report.n_excluded,
                                    "n_filtered": report.n_filtered, "metadata": report.metadata})
    return ranking


def run_cma(ctx: Context) -> None:
    p = ctx.params
    weights = _model(ctx)
    report = causal.cma_sweep(weights, _pairs(ctx, weights), p["task"], p["n_examples"], apply_filter=p["apply_filter"])
    ranking = _write_mediation(ctx, report)
    small = float(np.mean(np.abs(report.mf) < 0.05))
    ctx.summary.update(task=p["task"], n_examples=report.n_examples, n_excluded=report.n_excluded,
                       n_filtered=report.n_filtered, frac_heads_small_mf=small,
                       top_heads=[list(h) for h in ranking.top(4)])


def run_head_ablate(ctx: Context) -> None:
    p = ctx.params
    weights = _model(ctx)
    pairs = _pairs(ctx, weights)
    ex = _examples(ctx, weights, p["n_examples"])
    rankings = {}
    for task in causal.TASKS:
        rankings[task] = _write_mediation(ctx, causal.cma_sweep(weights, pairs, task, p["n_pairs"]))
    rows = []
    for group in ("task_critical", "low_importance"):
        curve = causal.head_ablation_curve(weights, ex, rankings["localization"], group, tuple(p["fractions"]),
                                           p["classification"])
        rows += [[group, f, n, loc, cls] for f, n, loc, cls in zip(curve.fractions, curve.n_heads, curve.loc_acc,
                                                                     curve.cls_acc)]
        ctx.summary[f"auc[{group}]"] = curve.auc
    cross = causal.cross_task_ablation(weights, ex, rankings["classification_binary"], rankings["localization"],
                                       tuple(p["fractions"]))
    rows += [["classification_critical", f, n, loc, cls] for f, n, loc, cls in
             zip(cross.curve.fractions, cross.curve.n_heads, cross.curve.loc_acc, cross.curve.cls_acc)]
    ctx.sink.csv("head_ablation.csv", ["group", "fraction", "n_heads", "loc_acc", "cls_acc"], rows)
    ctx.summary.update(cross_task_auc=cross.curve.auc, overlap_top10=cross.overlap_top10,
                       shared_heads=[list(h) for h in cross.shared_heads])


def run_report(ctx: Context) -> None:
    rows = []
    for i, run in enumerate(ctx.params["runs"]):
        d = Path(run)
        summary = json.loads((d / "summary.json").read_text())
        record = RunRecord.load(d / "run.json") if (d / "run.json").is_file() else None
        for k, v in summary["summary"].items():
            rows.append([i, summary["kind"], record.config_hash[:12] if record else "",
                         bool(record.complete) if record else False, k, json.dumps(v, sort_keys=True)])
        for name in sorted(p.name for p in d.glob("*.csv")):
            read_csv(d / name)  # fails loudly on a malformed result file
    ctx.sink.csv("report.csv", ["run", "kind", "config_hash", "complete", "key", "value"], rows)
    ctx.summary.update(n_runs=len(ctx.params["runs"]), n_rows=len(rows))


EXPERIMENTS: dict[str, Callable[[Context], None]] = {
    "gen": run_gen, "plant": run_plant, "train": run_train, "eval": run_eval, "ablate": run_ablate,
    "probe": run_probe, "knockout": run_knockout, "cma": run_cma, "head-ablate": run_head_ablate,
    "report": run_report,
}
