"""Experiment configuration: sectioned ``key = value`` text (INI), validated exhaustively."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from ..backbone import BackboneConfig, PromptInsertionPlan
from ..data import SynthSpec, class_pattern
from ..matching import Paradigm
from ..training import G_PROMPT_POLICIES, TrainConfig


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))


@dataclass
class PretrainConfig:
    num_classes: int = 20
    train_per_class: int = 100
    test_per_class: int = 50
    class_offset: int = 1000
    data_seed: int = 7
    noise_sigma: float = 0.1
    epochs: int = 10
    learning_rate: float = 1e-3
    batch_size: int = 64
    seed: int = 0


@dataclass
class ExperimentConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    plan: PromptInsertionPlan = field(default_factory=PromptInsertionPlan)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SynthSpec = field(default_factory=SynthSpec)
    pretext: PretrainConfig = field(default_factory=PretrainConfig)
    num_tasks: int = 5
    dataset_path: Path | None = None
    checkpoint: Path = Path("runs/backbone.pclb")
    output_dir: Path = Path("runs/default")
    seeds: tuple[int, ...] = (0,)
    # which classifiers the run reports besides FC
    extra_classifiers: tuple[str, ...] = ("NCM", "KM")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, train=replace(self.train, seed=seed), seeds=(seed,))

    @property
    def pretext_spec(self) -> SynthSpec:
        p = self.pretext
        return SynthSpec(num_classes=p.num_classes, train_per_class=p.train_per_class,
                         test_per_class=p.test_per_class, image_size=self.backbone.image_size,
                         channels=self.backbone.channels, noise_sigma=p.noise_sigma, seed=p.data_seed,
                         class_offset=p.class_offset, pattern_seed=self.data.pattern_seed)

    def to_dict(self) -> dict:
        def plain(obj):
            out = {}
            for f in fields(obj):
                v = getattr(obj, f.name)
                out[f.name] = v.value if isinstance(v, Paradigm) else list(v) if isinstance(v, tuple) else v
            return out

        return {
            "backbone": plain(self.backbone), "prompts": plain(self.plan), "train": plain(self.train),
            "data": plain(self.data), "pretext": plain(self.pretext), "num_tasks": self.num_tasks,
            "dataset_path": None if self.dataset_path is None else str(self.dataset_path),
            "seeds": list(self.seeds),
        }


def _ints(text: str) -> tuple[int, ...]:
    text = text.strip()
    return tuple(int(v) for v in text.replace(",", " ").split()) if text else ()


_SECTIONS = {
    "backbone": {f.name: int for f in fields(BackboneConfig)},
    "prompts": {"g_layers": _ints, "e_layers": _ints, "g_length": int, "e_length": int},
    "train": {"learning_rate": float, "beta1": float, "beta2": float, "batch_size": int,
              "epochs_per_task": int, "paradigm": str, "K": int, "key_granularity": str,
              "g_prompt_policy": str},
    "data": {"num_classes": int, "train_per_class": int, "test_per_class": int, "noise_sigma": float,
             "seed": int, "pattern_seed": int, "num_tasks": int, "path": str},
    "pretext": {f.name: type(f.default) for f in fields(PretrainConfig)},
    "run": {"checkpoint": str, "output_dir": str, "seeds": _ints, "classifiers": str},
}


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    """Parse and validate; every problem found is reported in one ConfigError."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"syntax: {exc}"]) from None

    problems: list[str] = []
    values: dict[str, dict] = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            problems.append(f"unknown section [{section}]")
            continue
        values[section] = {}
        for key, raw in parser.items(section):
            conv = _SECTIONS[section].get(key)
            if conv is None:
                problems.append(f"[{section}] unknown key {key!r}")
                continue
            try:
                values[section][key] = conv(raw)
            except ValueError:
                problems.append(f"[{section}] {key} = {raw!r} is not a valid {getattr(conv, '__name__', 'value')}")

    def build(label, factory, kwargs):
        try:
            return factory(**kwargs)
        except (ValueError, TypeError) as exc:
            problems.append(f"[{label}] {exc}")
            return None

    bb = build("backbone", BackboneConfig, values.get("backbone", {}))
    plan = build("prompts", PromptInsertionPlan, values.get("prompts", {}))
    if bb is not None and plan is not None:
        try:
            plan.validate(bb)
        except ValueError as exc:
            problems.append(f"[prompts] {exc}")

    tv = dict(values.get("train", {}))
    if "key_granularity" in tv:
        raw = tv["key_granularity"].strip().lower()
        if raw in ("", "class", "auto"):
            tv["key_granularity"] = None
        else:
            try:
                tv["key_granularity"] = int(raw)
            except ValueError:
                problems.append(f"[train] key_granularity = {raw!r} must be an integer or 'class'")
                tv.pop("key_granularity")
    if "g_prompt_policy" in tv and tv["g_prompt_policy"] not in G_PROMPT_POLICIES:
        problems.append(f"[train] g_prompt_policy must be one of {list(G_PROMPT_POLICIES)}")
        tv.pop("g_prompt_policy")
    train = build("train", TrainConfig, tv)

    dv = dict(values.get("data", {}))
    num_tasks = dv.pop("num_tasks", 5)
    dataset_path = dv.pop("path", None)
    if bb is not None:
        dv.setdefault("image_size", bb.image_size)
        dv.setdefault("channels", bb.channels)
    data = build("data", SynthSpec, dv)
    if data is not None:
        try:
            data.validate()
        except ValueError as exc:
            problems.append(f"[data] {exc}")
    pretext = build("pretext", PretrainConfig, values.get("pretext", {}))

    run = values.get("run", {})
    base = base_dir or Path(".")

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    seeds = run.get("seeds", (0,))
    if not seeds:
        problems.append("[run] seeds must not be empty")
    classifiers = tuple(c.strip().upper() for c in run.get("classifiers", "NCM, KM").split(",") if c.strip())
    bad = [c for c in classifiers if c not in ("FC", "NCM", "KM")]
    if bad:
        problems.append(f"[run] unknown classifiers {bad}")

    if dataset_path is not None:
        dataset_path = resolve(dataset_path)
        for name in ("train.pcld", "test.pcld"):
            if not (dataset_path / name).exists():
                problems.append(f"[data] path: missing {dataset_path / name}")
    if data is not None and num_tasks < 1:
        problems.append("[data] num_tasks must be >= 1")
    elif data is not None and dataset_path is None and data.num_classes % num_tasks:
        problems.append(f"[data] num_classes {data.num_classes} is not divisible by num_tasks {num_tasks}")
    if train is not None and data is not None and dataset_path is None and num_tasks >= 1 \
            and data.num_classes % num_tasks == 0:
        per_task = data.num_classes // num_tasks
        try:
            n = train.granularity_for(per_task)
            if train.K > n:
                problems.append(f"[train] K={train.K} exceeds the {n} keys per task")
        except ValueError as exc:
            problems.append(f"[train] {exc}")

    if problems:
        raise ConfigError(problems)
    cfg = ExperimentConfig(bb, plan, train, data, pretext, num_tasks, dataset_path,
                           resolve(run.get("checkpoint", "runs/backbone.pclb")),
                           resolve(run.get("output_dir", "runs/default")), tuple(seeds),
                           tuple(c for c in classifiers if c != "FC"))
    overlap = check_pretext_disjoint(cfg)
    if overlap:
        raise ConfigError([overlap])
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"config file not found: {path}"])
    return parse_config(path.read_text(), path.parent)


def check_pretext_disjoint(cfg: ExperimentConfig) -> str | None:
    """Pretext classes must not coincide with any benchmark class (index range or pattern)."""
    if cfg.dataset_path is not None:
        return None
    bench, pre = cfg.data.global_classes, cfg.pretext_spec.global_classes
    shared = set(bench) & set(pre)
    if shared:
        return (f"pretext classes overlap benchmark classes (global ids {min(shared)}..{max(shared)}); "
                f"move [pretext] class_offset")
    bench_patterns = {class_pattern(g, cfg.data.channels, cfg.data.pattern_seed).as_tuple() for g in bench}
    for g in pre:
        if class_pattern(g, cfg.data.channels, cfg.data.pattern_seed).as_tuple() in bench_patterns:
            return f"pretext class {g} reproduces a benchmark pattern"
    return None


DEFAULT_CONFIG = """\
# Desk-scale continual-learning benchmark.
[backbone]
image_size = 16
patch_size = 4
channels = 3
embed_dim = 32
num_layers = 4
num_heads = 4
mlp_ratio = 2

[prompts]
g_layers = 0, 1
e_layers = 0, 1, 2, 3
g_length = 5
e_length = 8

[train]
paradigm = MQMK
K = 1
key_granularity = class
learning_rate = 0.005
beta1 = 0.9
beta2 = 0.999
batch_size = 32
epochs_per_task = 20
g_prompt_policy = first-task

[data]
num_classes = 20
num_tasks = 5
train_per_class = 100
test_per_class = 50
noise_sigma = 0.1
seed = 0

[pretext]
num_classes = 20
class_offset = 1000
data_seed = 7
epochs = 10
learning_rate = 0.001
batch_size = 64
seed = 0

[run]
checkpoint = backbone.pclb
output_dir = runs
seeds = 0, 1, 2, 3, 4
classifiers = NCM, KM
"""
