"""Expanding key-value prompt pool {P_g, (K_1, P_1), ..., (K_M, P_M)} plus the linear head."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import PromptInsertionPlan
from .binio import FormatError, Reader, Writer
from .numerics import Tensor

POOL_MAGIC = b"PCLP"
POOL_VERSION = 1

_G_PROMPT, _E_PROMPT, _KEY, _HEAD = 0, 1, 2, 3


def _uniform(seed: int, tag: int, *idx: int, shape, dim: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(dim)
    rng = np.random.default_rng([seed, tag, *idx])
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class PromptEntry:
    task_id: int
    prompt: Tensor
    keys: Tensor
    class_ids: tuple[int, ...]
    frozen: bool = False

    @property
    def key_granularity(self) -> int:
        return self.keys.shape[0]

    def class_to_key(self, class_id: int) -> int:
        """Key index of ``class_id``: floor(rank * N / |classes|)."""
        try:
            rank = self.class_ids.index(int(class_id))
        except ValueError:
            raise KeyError(f"class {class_id} does not belong to task {self.task_id}") from None
        return rank * self.key_granularity // len(self.class_ids)

    def key_map(self) -> np.ndarray:
        n, c = self.key_granularity, len(self.class_ids)
        return np.arange(c) * n // c

    def key_classes(self, key_index: int) -> list[int]:
        return [c for c, k in zip(self.class_ids, self.key_map()) if k == key_index]

    def freeze(self):
        self.frozen = True
        self.prompt.requires_grad = False
        self.keys.requires_grad = False


@dataclass
class ParameterCounts:
    prompt_params: int
    key_params: int
    classifier_params: int

    @property
    def total(self) -> int:
        return self.prompt_params + self.key_params + self.classifier_params


class PromptPool:
    def __init__(self, embed_dim: int, plan: PromptInsertionPlan, num_classes: int, seed: int = 0):
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        self.embed_dim = embed_dim
        self.plan = plan
        self.num_classes = num_classes
        self.seed = seed
        d = embed_dim
        self.g_prompt = Tensor(_uniform(seed, _G_PROMPT, shape=(plan.g_depth, plan.g_length, d), dim=d),
                               requires_grad=True, name="g_prompt")
        # the head starts at zero so an untrained model gives uniform logits
        self.head = Tensor(np.zeros((d, num_classes)), requires_grad=True, name="head")
        self.entries: list[PromptEntry] = []

    def __len__(self):
        return len(self.entries)

    @property
    def size(self) -> int:
        return len(self.entries)

    @property
    def seen_classes(self) -> list[int]:
        return [c for e in self.entries for c in e.class_ids]

    @property
    def total_classes(self) -> int:
        return len(self.seen_classes)

    def entry(self, task_id: int) -> PromptEntry:
        if not 1 <= task_id <= len(self.entries):
            raise KeyError(f"no pool entry for task {task_id}")
        return self.entries[task_id - 1]

    def task_of_class(self) -> dict[int, int]:
        return {c: e.task_id for e in self.entries for c in e.class_ids}

    def expand(self, task_classes, key_granularity: int) -> PromptEntry:
        """Append a fresh (K_t, P_t) for a new task and freeze all previous entries."""
        classes = tuple(int(c) for c in task_classes)
        if not classes:
            raise ValueError("expand: empty class list")
        if len(set(classes)) != len(classes):
            raise ValueError(f"expand: duplicate classes in {classes}")
        overlap = sorted(set(classes) & set(self.seen_classes))
        if overlap:
            raise ValueError(f"expand: classes {overlap} already belong to an earlier task")
        bad = [c for c in classes if not 0 <= c < self.num_classes]
        if bad:
            raise ValueError(f"expand: classes {bad} outside [0, {self.num_classes})")
        if not 1 <= key_granularity <= len(classes):
            raise ValueError(f"expand: key granularity {key_granularity} not in [1, {len(classes)}]")

        for e in self.entries:
            e.freeze()
        t = len(self.entries) + 1
        d, plan = self.embed_dim, self.plan
        prompt = _uniform(self.seed, _E_PROMPT, t, shape=(plan.e_depth, plan.e_length, d), dim=d)
        keys = np.stack([_uniform(self.seed, _KEY, t, j, shape=(d,), dim=d) for j in range(key_granularity)])
        entry = PromptEntry(t, Tensor(prompt, requires_grad=True, name=f"prompt.{t}"),
                            Tensor(keys, requires_grad=True, name=f"keys.{t}"), classes)
        self.entries.append(entry)
        return entry

    def stacked_prompts(self) -> np.ndarray:
        return np.stack([e.prompt.values for e in self.entries])

    def trainable(self, task_id: int, train_g_prompt: bool = True) -> list[Tensor]:
        entry = self.entry(task_id)
        params = [entry.prompt, entry.keys, self.head]
        if train_g_prompt:
            params.insert(0, self.g_prompt)
        return params

    def all_tensors(self) -> list[Tensor]:
        out = [self.g_prompt, self.head]
        for e in self.entries:
            out += [e.prompt, e.keys]
        return out

    def parameter_counts(self) -> ParameterCounts:
        d, plan = self.embed_dim, self.plan
        prompt = plan.g_length * plan.g_depth * d + self.size * plan.e_length * plan.e_depth * d
        keys = sum(e.key_granularity for e in self.entries) * d
        return ParameterCounts(prompt, keys, d * self.num_classes)

    # ------------------------------------------------------------- persistence

    def to_bytes(self) -> bytes:
        plan = self.plan
        w = Writer()
        w.raw(POOL_MAGIC)
        w.u32(POOL_VERSION)
        for v in (self.embed_dim, self.num_classes, self.seed, plan.g_length, plan.e_length):
            w.u32(v)
        for layers in (plan.g_layers, plan.e_layers):
            w.u32(len(layers))
            w.u32_array(layers)
        w.u32(len(self.entries))
        w.blob("g_prompt", self.g_prompt.values)
        w.blob("head", self.head.values)
        for e in self.entries:
            w.u32(e.task_id)
            w.u8(int(e.frozen))
            w.u32(len(e.class_ids))
            w.u32_array(e.class_ids)
            w.u32(e.key_granularity)
            w.u32_array(e.key_map())
            w.blob(f"prompt.{e.task_id}", e.prompt.values)
            w.blob(f"keys.{e.task_id}", e.keys.values)
        return w.finish()

    @classmethod
    def from_bytes(cls, data: bytes) -> "PromptPool":
        r = Reader(data, POOL_MAGIC, POOL_VERSION)
        embed_dim, num_classes, seed, g_length, e_length = (r.u32() for _ in range(5))
        g_layers = tuple(int(i) for i in r.u32_array(r.u32()))
        e_layers = tuple(int(i) for i in r.u32_array(r.u32()))
        plan = PromptInsertionPlan(g_layers, e_layers, g_length, e_length)
        pool = cls(embed_dim, plan, num_classes, seed)
        m = r.u32()
        for expected, target in (("g_prompt", pool.g_prompt), ("head", pool.head)):
            name, values = r.blob()
            if name != expected or values.shape != target.shape:
                raise FormatError(f"expected blob {expected!r} {target.shape}, got {name!r} {values.shape}", r.pos)
            target.values = values
        for t in range(1, m + 1):
            task_id = r.u32()
            if task_id != t:
                raise FormatError(f"entry task ids must be consecutive, got {task_id} at position {t}", r.pos)
            frozen = bool(r.u8())
            class_ids = tuple(int(c) for c in r.u32_array(r.u32()))
            n = r.u32()
            key_map = r.u32_array(len(class_ids))
            _, prompt = r.blob()
            _, keys = r.blob()
            entry = PromptEntry(task_id, Tensor(prompt, requires_grad=not frozen, name=f"prompt.{t}"),
                                Tensor(keys, requires_grad=not frozen, name=f"keys.{t}"), class_ids, frozen)
            if keys.shape != (n, embed_dim) or not np.array_equal(key_map, entry.key_map()):
                raise FormatError(f"entry {t}: key table inconsistent with class map", r.pos)
            pool.entries.append(entry)
        r.expect_end()
        return pool

    def save(self, path: str | Path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "PromptPool":
        return cls.from_bytes(Path(path).read_bytes())

    def equals(self, other: "PromptPool") -> bool:
        if (self.embed_dim, self.num_classes, self.seed, self.plan) != (
                other.embed_dim, other.num_classes, other.seed, other.plan):
            return False
        if len(self.entries) != len(other.entries):
            return False
        pairs = [(self.g_prompt, other.g_prompt), (self.head, other.head)]
        for a, b in zip(self.entries, other.entries):
            if (a.task_id, a.class_ids, a.frozen) != (b.task_id, b.class_ids, b.frozen):
                return False
            pairs += [(a.prompt, b.prompt), (a.keys, b.keys)]
        return all(x.shape == y.shape and x.values.tobytes() == y.values.tobytes() for x, y in pairs)


def parameter_counts(pool: PromptPool, plan: PromptInsertionPlan | None = None) -> ParameterCounts:
    """Counts under ``plan`` (defaults to the pool's own plan)."""
    if plan is None or plan == pool.plan:
        return pool.parameter_counts()
    d = pool.embed_dim
    prompt = plan.g_length * plan.g_depth * d + pool.size * plan.e_length * plan.e_depth * d
    keys = sum(e.key_granularity for e in pool.entries) * d
    return ParameterCounts(prompt, keys, d * pool.num_classes)


def formula_counts(embed_dim: int, num_tasks: int, total_classes: int, plan: PromptInsertionPlan,
                   multi_key: bool) -> ParameterCounts:
    """Closed-form counts without building a pool (SK: M*D keys, MK: classes*D)."""
    d = embed_dim
    prompt = plan.g_length * plan.g_depth * d + num_tasks * plan.e_length * plan.e_depth * d
    keys = (total_classes if multi_key else num_tasks) * d
    return ParameterCounts(prompt, keys, d * total_classes)
