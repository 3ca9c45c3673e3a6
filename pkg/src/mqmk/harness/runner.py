"""Pretraining, continual runs, ablation sweeps and cost reports."""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import jsonschema
import numpy as np

from ..backbone import VisionTransformer
from ..data import LabeledSet, Task, TaskStream, generate, read_dataset, split_stream
from ..evaluation import (
    AccuracyMatrix,
    average_accuracy,
    classify_with,
    confusion_csv,
    confusion_table,
    cost_model,
    evaluate,
    forgetting,
    ncm_prototypes,
    oracle_analysis,
)
from ..matching import Paradigm, records_csv
from ..promptpool import formula_counts
from ..promptpool import PromptPool
from ..training import Learner, pretrain, config_dict
from .config import ConfigError, ExperimentConfig, check_pretext_disjoint
from .schema import SUMMARY_SCHEMA

log = logging.getLogger(__name__)

ABLATION_AXES = ("paradigm", "key_granularity", "K", "prompt_depth", "prompt_length")


def dumps(obj) -> str:
    """Canonical JSON: sorted keys, NaN mapped to null, trailing newline."""
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return None if not np.isfinite(obj) else float(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


# ---------------------------------------------------------------- data + backbone

def benchmark_data(cfg: ExperimentConfig) -> tuple[LabeledSet, LabeledSet, int]:
    if cfg.dataset_path is not None:
        train, nc = read_dataset(cfg.dataset_path / "train.pcld")
        test, nc_test = read_dataset(cfg.dataset_path / "test.pcld")
        return train, test, max(nc, nc_test)
    ds = generate(cfg.data)
    return ds.train, ds.test, cfg.data.num_classes


def build_stream(cfg: ExperimentConfig, seed: int) -> TaskStream:
    """The run seed decides the class order; the images are fixed by the data section."""
    train, test, nc = benchmark_data(cfg)
    return split_stream(train, test, cfg.num_tasks, seed, nc)


def cmd_pretrain(cfg: ExperimentConfig) -> dict:
    problem = check_pretext_disjoint(cfg)
    if problem:
        raise ConfigError([problem])
    p = cfg.pretext
    ds = generate(cfg.pretext_spec)
    vit = VisionTransformer(cfg.backbone, cfg.plan, seed=p.seed)
    train = LabeledSet(ds.train.images, ds.train.labels)
    info = pretrain(vit, train, ds.test, epochs=p.epochs, lr=p.learning_rate, batch_size=p.batch_size, seed=p.seed)
    cfg.checkpoint.parent.mkdir(parents=True, exist_ok=True)
    vit.save(cfg.checkpoint)
    log.info("pretext accuracy %.4f, checkpoint %s", info["accuracy"], cfg.checkpoint)
    return {"checkpoint": str(cfg.checkpoint), "pretext_accuracy": info["accuracy"],
            "loss_history": info["loss_history"]}


def load_backbone(cfg: ExperimentConfig) -> VisionTransformer:
    if not cfg.checkpoint.exists():
        raise ConfigError([f"backbone checkpoint not found: {cfg.checkpoint} (run `pretrain` first)"])
    vit = VisionTransformer.load(cfg.checkpoint, cfg.plan)
    if vit.config != cfg.backbone:
        raise ConfigError([f"checkpoint {cfg.checkpoint} holds {vit.config}, config asks for {cfg.backbone}"])
    return vit


# ---------------------------------------------------------------- one continual run

@dataclass
class RunResult:
    summary: dict
    artifacts: dict[str, str | bytes] = field(default_factory=dict)

    def write(self, directory: str | Path):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        jsonschema.validate(self.summary, SUMMARY_SCHEMA)
        (directory / "summary.json").write_text(dumps(self.summary))
        for name, content in sorted(self.artifacts.items()):
            path = directory / name
            if isinstance(content, bytes):
                path.write_bytes(content)
            else:
                path.write_text(content)


def _loss_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task", "step", "loss_prompts", "loss_keys", "loss_total"])
    for rep in reports:
        for row in rep.losses:
            w.writerow([row.task, row.step, repr(row.loss_prompts), repr(row.loss_keys), repr(row.loss_total)])
    return buf.getvalue()


def _per_task_accuracy(ev, stream: TaskStream, upto: int) -> list[float]:
    owner = stream.task_of_class()
    tasks = np.array([owner[int(y)] for y in ev.labels])
    return [float(np.mean(ev.predictions[tasks == t] == ev.labels[tasks == t])) for t in range(1, upto + 1)]


def run_continual(cfg: ExperimentConfig, seed: int, backbone: VisionTransformer | None = None,
                  with_records: bool = True) -> RunResult:
    """Learn the stream task by task; evaluate every seen task after each one."""
    backbone = backbone if backbone is not None else load_backbone(cfg)
    if backbone.plan != cfg.plan:
        backbone = backbone.with_plan(cfg.plan)
    train_cfg = replace(cfg.train, seed=seed)
    stream = build_stream(cfg, seed)
    T = len(stream)
    pool = PromptPool(cfg.backbone.embed_dim, cfg.plan, stream.num_classes, seed=seed)
    learner = Learner(backbone, pool, train_cfg)
    matrix = AccuracyMatrix(T)
    reports, steps = [], []
    seen_test: list[LabeledSet] = []
    ev = None
    for task in stream:
        reports.append(learner.train_task(task))
        seen_test.append(task.test)
        data = LabeledSet(np.concatenate([s.images for s in seen_test]),
                          np.concatenate([s.labels for s in seen_test]))
        before = backbone.counter.snapshot()
        ev = evaluate(learner, data)
        after = backbone.counter.snapshot()
        for t, acc in enumerate(_per_task_accuracy(ev, stream, task.task_id), start=1):
            matrix.set(t, task.task_id, acc)
        steps.append({
            "task": task.task_id,
            "A": average_accuracy(matrix, task.task_id),
            "F": forgetting(matrix, task.task_id),
            "matching_rate": ev.matching_rate,
            "accuracy": ev.accuracy,
        })
        log.info("seed %d task %d: A=%.4f F=%.4f match=%.4f", seed, task.task_id, steps[-1]["A"],
                 steps[-1]["F"], steps[-1]["matching_rate"])
    inference = {"samples": len(ev.labels),
                 "forwards": after["forwards"] - before["forwards"],
                 "forward_samples": after["forward_samples"] - before["forward_samples"],
                 "backwards": after["backwards"] - before["backwards"]}
    inference["forwards_per_sample"] = inference["forward_samples"] / max(inference["samples"], 1)

    oracle = oracle_analysis(learner, data, ev)
    classifiers = {"FC": ev.accuracy}
    if "NCM" in cfg.extra_classifiers:
        protos = ncm_prototypes(learner, [t.train for t in stream])
        classifiers["NCM"] = float(np.mean(classify_with("NCM", ev.batch, pool, protos) == ev.labels))
    if "KM" in cfg.extra_classifiers:
        class_keys = all(e.key_granularity == len(e.class_ids) for e in pool.entries)
        classifiers["KM"] = (float(np.mean(classify_with("KM", ev.batch, pool) == ev.labels))
                             if class_keys else None)

    train_counts = {k: sum(getattr(r, k) for r in reports) for k in ("batches", "forwards", "backwards",
                                                                        "forward_samples")}
    train_counts["forwards_per_batch"] = train_counts["forwards"] / max(train_counts["batches"], 1)
    train_counts["backwards_per_batch"] = train_counts["backwards"] / max(train_counts["batches"], 1)
    model_train = cost_model(train_cfg.paradigm, T, "training")
    model_inf = cost_model(train_cfg.paradigm, T, "inference")
    counts = pool.parameter_counts()
    table = confusion_table(ev.batch.true_tasks, ev.batch.selected, T)

    summary = {
        "schema_version": 1,
        "seed": seed,
        "paradigm": train_cfg.paradigm.value,
        "K": train_cfg.K,
        "key_granularity": [e.key_granularity for e in pool.entries],
        "num_tasks": T,
        "class_order": [int(c) for c in stream.permutation],
        "task_classes": [list(t.class_ids) for t in stream],
        "accuracy_matrix": [[None if np.isnan(v) else float(v) for v in row] for row in matrix.values],
        "steps": steps,
        "final": {"A": steps[-1]["A"], "F": steps[-1]["F"], "matching_rate": steps[-1]["matching_rate"]},
        "oracle": {**oracle.to_dict(), "recombined_accuracy": oracle.recombined_accuracy()},
        "classifiers": classifiers,
        "confusion": table.tolist(),
        "pass_counters": {"training": train_counts, "inference": inference},
        "cost_model": {"training": asdict(model_train), "inference": asdict(model_inf)},
        "parameter_counts": {**asdict(counts), "total": counts.total},
        "config": {**cfg.to_dict(), "train": config_dict(train_cfg), "seeds": [seed]},
    }
    artifacts = {
        "accuracy_matrix.csv": matrix.to_csv(),
        "confusion.csv": confusion_csv(table),
        "losses.csv": _loss_csv(reports),
        "pool.pclp": pool.to_bytes(),
    }
    if with_records:
        artifacts["match_records.csv"] = records_csv(ev.batch.records(), None)
    return RunResult(summary, artifacts)


def _run_job(args):
    cfg, seed, with_records = args
    return run_continual(cfg, seed, with_records=with_records)


def map_runs(jobs: list[tuple], workers: int = 1) -> list[RunResult]:
    """Each job is (config, seed, with_records); results come back in job order."""
    if workers <= 1 or len(jobs) <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_run_job, jobs))


def aggregate(summaries: list[dict]) -> dict:
    rows = sorted(summaries, key=lambda s: s["seed"])
    finals = {k: [s["final"][k] for s in rows] for k in ("A", "F", "matching_rate")}
    return {
        "seeds": [s["seed"] for s in rows],
        "paradigm": rows[0]["paradigm"],
        "per_seed": [{"seed": s["seed"], **s["final"]} for s in rows],
        "median": {k: float(np.median(v)) for k, v in finals.items()},
        "mean": {k: float(np.mean(v)) for k, v in finals.items()},
    }


def runs_csv(summaries: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "paradigm", "A_T", "F_T", "matching_rate", "forced_true_accuracy", "KM", "NCM"])
    for s in sorted(summaries, key=lambda s: s["seed"]):
        c = s["classifiers"]
        w.writerow([s["seed"], s["paradigm"], _fmt(s["final"]["A"]), _fmt(s["final"]["F"]),
                    _fmt(s["final"]["matching_rate"]), _fmt(s["oracle"]["acc_all_forced_true"]),
                    _fmt(c.get("KM")), _fmt(c.get("NCM"))])
    return buf.getvalue()


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def cmd_run(cfg: ExperimentConfig, workers: int = 1) -> dict:
    load_backbone(cfg)  # fail early on a missing or mismatched checkpoint
    results = map_runs([(cfg, s, True) for s in cfg.seeds], workers)
    for r in results:
        r.write(cfg.output_dir / f"seed_{r.summary['seed']}")
    summaries = [r.summary for r in results]
    agg = aggregate(summaries)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    (cfg.output_dir / "aggregate.json").write_text(dumps(agg))
    (cfg.output_dir / "runs.csv").write_text(runs_csv(summaries))
    return agg


# ---------------------------------------------------------------- report

def cmd_report(run_dir: str | Path) -> dict:
    """Re-render CSV/JSON artifacts from the summaries stored in a run directory."""
    run_dir = Path(run_dir)
    paths = sorted(run_dir.glob("seed_*/summary.json"))
    if (run_dir / "summary.json").exists():
        paths.append(run_dir / "summary.json")
    if not paths:
        raise ConfigError([f"no summary.json found under {run_dir}"])
    summaries = []
    for path in paths:
        try:
            s = json.loads(path.read_text())
            jsonschema.validate(s, SUMMARY_SCHEMA)
        except (json.JSONDecodeError, jsonschema.ValidationError) as exc:
            raise ConfigError([f"{path}: {getattr(exc, 'message', exc)}"]) from None
        summaries.append(s)
        m = AccuracyMatrix.from_array([[np.nan if v is None else v for v in row] for row in s["accuracy_matrix"]])
        path.with_name("accuracy_matrix.csv").write_text(m.to_csv())
        path.with_name("confusion.csv").write_text(confusion_csv(np.array(s["confusion"], dtype=np.int64)))
        path.write_text(dumps(s))
    if len(paths) > 1 or paths[0].parent != run_dir:
        agg = aggregate(summaries)
        (run_dir / "aggregate.json").write_text(dumps(agg))
        (run_dir / "runs.csv").write_text(runs_csv(summaries))
        return agg
    return aggregate(summaries)


# ---------------------------------------------------------------- ablation

def axis_values(cfg: ExperimentConfig, axis: str, values: list[str] | None = None) -> list:
    """Parse (or default) the values of an ablation axis and check each is runnable."""
    if axis not in ABLATION_AXES:
        raise ConfigError([f"unknown axis {axis!r}; expected one of {list(ABLATION_AXES)}"])
    per_task = (cfg.data.num_classes // cfg.num_tasks) if cfg.dataset_path is None else None
    if values is not None and not values:
        raise ConfigError([f"axis {axis!r} has no values"])
    problems: list[str] = []
    if axis == "paradigm":
        out = []
        for v in values or [p.value for p in Paradigm]:
            try:
                out.append(Paradigm.parse(v))
            except ValueError as exc:
                problems.append(str(exc))
    else:
        if values is None:
            if axis == "key_granularity":
                values = list(range(1, (per_task or 1) + 1))
            elif axis == "K":
                values = sorted({1, 2, per_task or 1} & set(range(1, (per_task or 1) + 1)))
            elif axis == "prompt_depth":
                values = list(range(1, cfg.backbone.num_layers + 1))
            else:
                values = [1, 4, 8, 16]
        out = []
        for v in values:
            try:
                out.append(int(v))
            except ValueError:
                problems.append(f"{axis} value {v!r} is not an integer")
    if not out and not problems:
        problems.append(f"axis {axis!r} has no values")
    for v in out:
        try:
            variant(cfg, axis, v)
        except (ValueError, ConfigError) as exc:
            problems.append(f"{axis}={getattr(v, 'value', v)}: {exc}")
    if problems:
        raise ConfigError(problems)
    return out


def variant(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    """The config with one axis overridden; raises ValueError when the combination is invalid."""
    train, plan = cfg.train, cfg.plan
    if axis == "paradigm":
        p = Paradigm.parse(value)
        train = replace(train, paradigm=p, key_granularity=train.key_granularity if p.multi_key else None)
    elif axis == "key_granularity":
        if not train.paradigm.multi_key and value != 1:
            train = replace(train, paradigm=Paradigm.MQMK)
        train = replace(train, key_granularity=value)
    elif axis == "K":
        train = replace(train, K=value)
    elif axis == "prompt_depth":
        if not 0 <= value <= cfg.backbone.num_layers:
            raise ValueError(f"depth must lie in [0, {cfg.backbone.num_layers}]")
        plan = replace(plan, e_layers=tuple(range(value)))
    elif axis == "prompt_length":
        if value < 0:
            raise ValueError("length must be >= 0")
        plan = replace(plan, e_length=value)
    plan.validate(cfg.backbone)
    if cfg.dataset_path is None:
        n = train.granularity_for(cfg.data.num_classes // cfg.num_tasks)
        if train.K > n:
            raise ValueError(f"K={train.K} exceeds the {n} keys per task")
    return replace(cfg, train=train, plan=plan)


ABLATION_COLUMNS = ["axis", "value", "paradigm", "runs", "A_T_mean", "A_T_std", "F_T_mean", "F_T_std",
                    "matching_rate_mean", "matching_rate_std"]


def cmd_ablate(cfg: ExperimentConfig, axis: str, values: list[str] | None = None, workers: int = 1) -> list[dict]:
    parsed = axis_values(cfg, axis, values)
    load_backbone(cfg)  # every variant shares this one checkpoint
    jobs = [(variant(cfg, axis, v), s, False) for v in parsed for s in cfg.seeds]
    results = map_runs(jobs, workers)
    rows = []
    for i, v in enumerate(parsed):
        block = [r.summary for r in results[i * len(cfg.seeds):(i + 1) * len(cfg.seeds)]]
        block.sort(key=lambda s: s["seed"])
        row = {"axis": axis, "value": getattr(v, "value", v), "paradigm": block[0]["paradigm"], "runs": len(block)}
        for key, name in (("A", "A_T"), ("F", "F_T"), ("matching_rate", "matching_rate")):
            vals = np.array([s["final"][key] for s in block])
            row[f"{name}_mean"] = float(vals.mean())
            row[f"{name}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        rows.append(row)
    out = cfg.output_dir / f"ablate_{axis}"
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.DictWriter(buf, ABLATION_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    (out / "table.csv").write_text(buf.getvalue())
    per_run = sorted((r.summary for r in results), key=lambda s: (json.dumps(s["config"], sort_keys=True), s["seed"]))
    (out / "runs.json").write_text(dumps([{"value": _axis_value(s, axis), "seed": s["seed"], **s["final"]}
                                          for s in per_run]))
    return rows


def _axis_value(summary: dict, axis: str):
    c = summary["config"]
    return {"paradigm": summary["paradigm"], "K": summary["K"],
            "key_granularity": summary["key_granularity"][0],
            "prompt_depth": len(c["prompts"]["e_layers"]),
            "prompt_length": c["prompts"]["e_length"]}[axis]


# ---------------------------------------------------------------- cost

def _truncate(stream: TaskStream, train_n: int, test_n: int) -> list[Task]:
    return [Task(t.task_id, t.class_ids,
                 LabeledSet(t.train.images[:train_n], t.train.labels[:train_n]),
                 LabeledSet(t.test.images[:test_n], t.test.labels[:test_n])) for t in stream]


def instrumented_counts(cfg: ExperimentConfig, paradigm: Paradigm, backbone: VisionTransformer,
                        batches_per_task: int = 2, test_per_task: int = 16) -> dict:
    """One epoch over a few batches of every task; counter deltas per batch and per test sample."""
    train_cfg = replace(cfg.train, paradigm=paradigm, epochs_per_task=1,
                        key_granularity=cfg.train.key_granularity if paradigm.multi_key else None, K=1)
    stream = build_stream(cfg, cfg.seeds[0])
    tasks = _truncate(stream, batches_per_task * train_cfg.batch_size, test_per_task)
    pool = PromptPool(cfg.backbone.embed_dim, cfg.plan, stream.num_classes, seed=cfg.seeds[0])
    learner = Learner(backbone, pool, train_cfg)
    batches = fwd = bwd = 0
    for task in tasks:
        rep = learner.train_task(task)
        batches, fwd, bwd = batches + rep.batches, fwd + rep.forwards, bwd + rep.backwards
    data = LabeledSet(np.concatenate([t.test.images for t in tasks]), np.concatenate([t.test.labels for t in tasks]))
    before = backbone.counter.snapshot()
    evaluate(learner, data)
    after = backbone.counter.snapshot()
    return {"training_forwards_per_batch": fwd / batches, "training_backwards_per_batch": bwd / batches,
            "inference_forwards_per_sample": (after["forward_samples"] - before["forward_samples"]) / len(data)}


def cmd_cost(cfg: ExperimentConfig, reference: tuple[int, int, int] = (768, 10, 100)) -> dict:
    """Parameter counts (configured and reference scale) plus model-vs-counter pass counts."""
    M = cfg.num_tasks
    total = cfg.data.num_classes
    counts = {}
    for name, d, m, c in (("config", cfg.backbone.embed_dim, M, total), ("reference", *reference)):
        sk = formula_counts(d, m, c, cfg.plan, multi_key=False)
        mk = formula_counts(d, m, c, cfg.plan, multi_key=True)
        counts[name] = {"embed_dim": d, "num_tasks": m, "total_classes": c,
                        "SK": {**asdict(sk), "total": sk.total}, "MK": {**asdict(mk), "total": mk.total},
                        "MK_minus_SK_keys": mk.key_params - sk.key_params}
    backbone = (VisionTransformer.load(cfg.checkpoint, cfg.plan) if cfg.checkpoint.exists()
                else VisionTransformer(cfg.backbone, cfg.plan, seed=cfg.pretext.seed))
    passes = []
    for p in Paradigm:
        measured = instrumented_counts(cfg, p, backbone)
        tr, inf = cost_model(p, M, "training"), cost_model(p, M, "inference")
        passes.append({
            "paradigm": p.value,
            "model_training_forwards": tr.forwards_per_sample,
            "model_training_backwards": tr.backwards_per_sample,
            "model_inference_forwards": inf.forwards_per_sample,
            "model_inference_ratio_vs_sqsk": inf.ratio_vs_sqsk,
            "reference_inference_ratio_vs_sqsk": cost_model(p, reference[1], "inference").ratio_vs_sqsk,
            **{f"measured_{k}": v for k, v in measured.items()},
        })
        passes[-1]["consistent"] = (measured["training_forwards_per_batch"] == tr.forwards_per_sample
                                    and measured["training_backwards_per_batch"] == tr.backwards_per_sample
                                    and measured["inference_forwards_per_sample"] == inf.forwards_per_sample)
    return {"parameter_counts": counts, "passes": passes}
