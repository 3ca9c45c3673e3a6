"""Synthetic grating benchmarks, class-incremental task splitting, and the PCLD file format."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .binio import FormatError

DATASET_MAGIC = b"PCLD"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4s6I")

_TRAIN, _TEST = 0, 1


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 20
    train_per_class: int = 100
    test_per_class: int = 50
    image_size: int = 16
    channels: int = 3
    noise_sigma: float = 0.1
    seed: int = 0
    # global index of class 0 in the pattern universe; pretext sets use a disjoint range
    class_offset: int = 0
    pattern_seed: int = 1234

    def validate(self):
        if self.num_classes < 1:
            raise ValueError("SynthSpec.num_classes must be >= 1")
        if self.train_per_class < 0 or self.test_per_class < 0:
            raise ValueError("samples per class must be >= 0")
        if self.image_size < 1 or self.channels < 1:
            raise ValueError("image_size and channels must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    @property
    def global_classes(self) -> range:
        return range(self.class_offset, self.class_offset + self.num_classes)


@dataclass(frozen=True)
class ClassPattern:
    frequency: float
    orientation: float
    phase: float
    color: tuple[float, ...]

    def as_tuple(self):
        return (self.frequency, self.orientation, self.phase) + self.color


def class_pattern(global_class: int, channels: int, pattern_seed: int = 1234) -> ClassPattern:
    rng = np.random.default_rng([pattern_seed, global_class])
    return ClassPattern(
        frequency=float(rng.uniform(0.5, 3.0)),
        orientation=float(rng.uniform(0.0, np.pi)),
        phase=float(rng.uniform(0.0, 2 * np.pi)),
        color=tuple(float(c) for c in rng.uniform(0.25, 0.75, size=channels)),
    )


def render(pattern: ClassPattern, image_size: int, amplitude: float = 0.25) -> np.ndarray:
    """Noise-free ``(C, H, W)`` grating for one class."""
    coords = (np.arange(image_size) + 0.5) / image_size
    v, u = np.meshgrid(coords, coords, indexing="ij")
    proj = u * np.cos(pattern.orientation) + v * np.sin(pattern.orientation)
    wave = amplitude * np.sin(2 * np.pi * pattern.frequency * proj + pattern.phase)
    return np.stack([c + wave for c in pattern.color])


@dataclass
class LabeledSet:
    images: np.ndarray      # (N, C, H, W) float32
    labels: np.ndarray      # (N,) int64

    def __len__(self):
        return len(self.labels)

    def subset(self, mask) -> "LabeledSet":
        return LabeledSet(self.images[mask], self.labels[mask])

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def equals(self, other: "LabeledSet") -> bool:
        return (self.images.shape == other.images.shape
                and self.images.tobytes() == other.images.tobytes()
                and np.array_equal(self.labels, other.labels))


@dataclass
class SyntheticDataset:
    spec: SynthSpec
    train: LabeledSet
    test: LabeledSet
    patterns: list[ClassPattern]

    def templates(self) -> np.ndarray:
        return np.stack([np.clip(render(p, self.spec.image_size), 0, 1) for p in self.patterns])


def _draw(pattern: ClassPattern, spec: SynthSpec, global_class: int, split: int, n: int) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, global_class, split])
    base = render(pattern, spec.image_size)
    noise = rng.normal(0.0, 1.0, size=(n,) + base.shape) * spec.noise_sigma
    return np.clip(base[None] + noise, 0.0, 1.0).astype(np.float32)


def generate(spec: SynthSpec) -> SyntheticDataset:
    """Deterministic dataset: every byte is a function of ``spec``."""
    spec.validate()
    patterns = [class_pattern(g, spec.channels, spec.pattern_seed) for g in spec.global_classes]
    if len({p.as_tuple() for p in patterns}) != len(patterns):
        raise ValueError("degenerate spec: two classes share a pattern")
    sets = []
    for split, n in ((_TRAIN, spec.train_per_class), (_TEST, spec.test_per_class)):
        images = [_draw(p, spec, g, split, n) for p, g in zip(patterns, spec.global_classes)]
        labels = np.repeat(np.arange(spec.num_classes, dtype=np.int64), n)
        shape = (0, spec.channels, spec.image_size, spec.image_size)
        sets.append(LabeledSet(np.concatenate(images) if n else np.zeros(shape, np.float32), labels))
    return SyntheticDataset(spec, sets[0], sets[1], patterns)


def nearest_template_predict(images: np.ndarray, templates: np.ndarray) -> np.ndarray:
    flat = images.reshape(len(images), -1).astype(np.float64)
    t = templates.reshape(len(templates), -1)
    d = (flat ** 2).sum(1)[:, None] - 2 * flat @ t.T + (t ** 2).sum(1)[None]
    return d.argmin(axis=1)


# ---------------------------------------------------------------- task streams

@dataclass
class Task:
    task_id: int
    class_ids: tuple[int, ...]
    train: LabeledSet
    test: LabeledSet


@dataclass
class TaskStream:
    tasks: list[Task]
    seed: int
    permutation: np.ndarray
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def task_of_class(self) -> dict[int, int]:
        return {c: t.task_id for t in self.tasks for c in t.class_ids}

    def check_disjoint(self):
        seen: set[int] = set()
        for t in self.tasks:
            overlap = seen & set(t.class_ids)
            if overlap:
                raise ValueError(f"task {t.task_id} reuses classes {sorted(overlap)}")
            seen |= set(t.class_ids)
        missing = set(range(self.num_classes)) - seen
        if missing:
            raise ValueError(f"classes {sorted(missing)} belong to no task")


def split_stream(train: LabeledSet, test: LabeledSet, num_tasks: int, seed: int,
                 num_classes: int | None = None) -> TaskStream:
    """Shuffle classes with ``seed`` and chunk them into ``num_tasks`` equal groups."""
    if num_classes is None:
        num_classes = max(train.num_classes, test.num_classes)
    if num_tasks < 1 or num_classes % num_tasks:
        raise ValueError(f"cannot split {num_classes} classes into {num_tasks} equal tasks")
    perm = np.random.default_rng(seed).permutation(num_classes)
    per = num_classes // num_tasks
    tasks = []
    for t in range(num_tasks):
        classes = tuple(int(c) for c in perm[t * per:(t + 1) * per])
        tasks.append(Task(t + 1, classes,
                          train.subset(np.isin(train.labels, classes)),
                          test.subset(np.isin(test.labels, classes))))
    stream = TaskStream(tasks, seed, perm, num_classes)
    stream.check_disjoint()
    return stream


# ---------------------------------------------------------------- PCLD files

def dataset_bytes(data: LabeledSet, num_classes: int | None = None) -> bytes:
    n, c, h, w = data.images.shape
    if num_classes is None:
        num_classes = data.num_classes
    header = _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, c, h, w, num_classes)
    return (header + np.asarray(data.labels, dtype="<u4").tobytes()
            + np.ascontiguousarray(data.images, dtype="<f4").tobytes())


def parse_dataset(raw: bytes) -> tuple[LabeledSet, int]:
    """Parse PCLD bytes; returns the sample set and the declared class count."""
    if len(raw) < _HEADER.size:
        raise FormatError(f"file shorter than the {_HEADER.size}-byte header ({len(raw)} bytes)", len(raw))
    magic, version, n, c, h, w, num_classes = _HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        bad = next(i for i in range(4) if magic[i] != DATASET_MAGIC[i])
        raise FormatError(f"bad magic {magic!r}, expected {DATASET_MAGIC!r}", bad)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    expected = _HEADER.size + 4 * n + 4 * n * c * h * w
    if len(raw) != expected:
        raise FormatError(f"length mismatch: header implies {expected} bytes, file has {len(raw)}",
                          min(len(raw), expected))
    off = _HEADER.size
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=off).astype(np.int64)
    if n and labels.max() >= num_classes:
        i = int(np.argmax(labels >= num_classes))
        raise FormatError(f"label {labels[i]} >= num_classes {num_classes}", off + 4 * i)
    images = np.frombuffer(raw, dtype="<f4", count=n * c * h * w, offset=off + 4 * n)
    return LabeledSet(images.reshape(n, c, h, w).astype(np.float32), labels), num_classes


def write_dataset(path: str | Path, data: LabeledSet, num_classes: int | None = None):
    Path(path).write_bytes(dataset_bytes(data, num_classes))


def read_dataset(path: str | Path) -> tuple[LabeledSet, int]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    return parse_dataset(path.read_bytes())


def write_stream(directory: str | Path, stream: TaskStream):
    """``train.pcld`` + ``test.pcld`` + ``stream.json`` (task split metadata)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    train = _merge([t.train for t in stream.tasks])
    test = _merge([t.test for t in stream.tasks])
    write_dataset(directory / "train.pcld", train, stream.num_classes)
    write_dataset(directory / "test.pcld", test, stream.num_classes)
    meta = {"num_tasks": len(stream), "seed": stream.seed,
            "permutation": [int(c) for c in stream.permutation]}
    (directory / "stream.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_stream(directory: str | Path) -> TaskStream:
    directory = Path(directory)
    meta = json.loads((directory / "stream.json").read_text())
    train, nc = read_dataset(directory / "train.pcld")
    test, _ = read_dataset(directory / "test.pcld")
    stream = split_stream(train, test, meta["num_tasks"], meta["seed"], nc)
    if [int(c) for c in stream.permutation] != meta["permutation"]:
        raise ValueError("stream.json permutation does not match its seed")
    return stream


def _merge(sets: list[LabeledSet]) -> LabeledSet:
    images = np.concatenate([s.images for s in sets])
    labels = np.concatenate([s.labels for s in sets])
    order = np.argsort(labels, kind="stable")
    return LabeledSet(images[order], labels[order])
