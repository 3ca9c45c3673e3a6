"""Per-task optimization of prompts, keys and the linear head, plus backbone pretraining."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .backbone import VisionTransformer, classify
from .data import LabeledSet, Task
from .matching import Paradigm
from .numerics import Adam, Tensor, cosine_similarity, cross_entropy, no_grad
from .promptpool import PromptPool

log = logging.getLogger(__name__)

G_PROMPT_POLICIES = ("all-tasks", "first-task", "frozen")


@dataclass
class TrainConfig:
    learning_rate: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 32
    epochs_per_task: int = 20
    seed: int = 0
    paradigm: Paradigm = Paradigm.MQMK
    K: int = 1
    key_granularity: int | None = None
    # "first-task": g-prompt trains only with task 1; "all-tasks": every task; "frozen": never.
    # Training it later moves every old task's prompted queries away from their frozen keys.
    g_prompt_policy: str = "first-task"

    def __post_init__(self):
        self.paradigm = Paradigm.parse(self.paradigm)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs_per_task < 0:
            raise ValueError("epochs_per_task must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.key_granularity is not None and self.key_granularity < 1:
            raise ValueError("key_granularity must be >= 1")
        if self.g_prompt_policy not in G_PROMPT_POLICIES:
            raise ValueError(f"g_prompt_policy must be one of {G_PROMPT_POLICIES}, got {self.g_prompt_policy!r}")

    def trains_g_prompt(self, task_id: int) -> bool:
        return self.g_prompt_policy == "all-tasks" or (self.g_prompt_policy == "first-task" and task_id == 1)

    def granularity_for(self, num_classes: int) -> int:
        if not self.paradigm.multi_key:
            if self.key_granularity not in (None, 1):
                raise ValueError(f"{self.paradigm.value} uses a single key per task; "
                                 f"key_granularity={self.key_granularity} is inconsistent")
            return 1
        n = num_classes if self.key_granularity is None else self.key_granularity
        if n > num_classes:
            raise ValueError(f"key_granularity {n} exceeds the {num_classes} classes of a task")
        return n


@dataclass
class LossRow:
    task: int
    step: int
    loss_prompts: float
    loss_keys: float
    loss_total: float


@dataclass
class TaskReport:
    task: int
    batches: int
    forwards: int
    backwards: int
    forward_samples: int
    losses: list[LossRow] = field(default_factory=list)

    @property
    def forwards_per_batch(self) -> float:
        return self.forwards / self.batches if self.batches else 0.0

    @property
    def backwards_per_batch(self) -> float:
        return self.backwards / self.batches if self.batches else 0.0


def prompt_loss(x_e: Tensor, labels, task_id: int, backbone: VisionTransformer, pool: PromptPool,
                mask_logits: bool = True) -> tuple[Tensor, Tensor]:
    """Masked CE of the head on f_r(P_g; P_t; x_e)[0]. Returns (loss, query Q_t)."""
    entry = pool.entry(task_id)
    labels = np.asarray(labels)
    foreign = sorted(set(labels.tolist()) - set(entry.class_ids))
    if foreign:
        raise ValueError(f"prompt_loss: labels {foreign} do not belong to task {task_id}")
    feature, _ = backbone.forward(x_e, pool.g_prompt, entry.prompt)
    logits = classify(feature, pool.head, list(entry.class_ids) if mask_logits else None)
    return cross_entropy(logits, labels), feature


def key_loss(queries, labels, task_id: int, pool: PromptPool) -> Tensor:
    """Mean of 1 - cos(Q, k_{t, key(y)}); the query is a constant (stop-gradient)."""
    entry = pool.entry(task_id)
    q = queries.values if isinstance(queries, Tensor) else np.asarray(queries, dtype=np.float64)
    try:
        idx = np.array([entry.class_to_key(y) for y in np.atleast_1d(labels)])
    except KeyError as exc:
        raise ValueError(f"key_loss: {exc.args[0]}") from None
    cos = cosine_similarity(Tensor(np.atleast_2d(q)), entry.keys[idx])
    return (1.0 - cos).mean()


class Learner:
    """Frozen backbone + prompt pool trained task by task."""

    def __init__(self, backbone: VisionTransformer, pool: PromptPool, config: TrainConfig):
        self.backbone = backbone
        self.pool = pool
        self.config = config
        backbone.set_trainable(False)

    @property
    def paradigm(self) -> Paradigm:
        return self.config.paradigm

    def embed(self, images: np.ndarray, chunk: int = 256) -> Tensor:
        with no_grad():
            parts = [self.backbone.embed(images[i:i + chunk]).values for i in range(0, len(images), chunk)]
        d = self.backbone.config.embed_dim
        return Tensor(np.concatenate(parts) if parts else np.zeros((0, self.backbone.config.num_tokens, d)))

    def train_step(self, x_e: Tensor, labels: np.ndarray, task_id: int, opt: Adam) -> tuple[Tensor, Tensor, Tensor]:
        opt.zero_grad()
        if self.paradigm.multi_query:
            lp, q = prompt_loss(x_e, labels, task_id, self.backbone, self.pool)
            lk = key_loss(q, labels, task_id, self.pool)
        else:
            with no_grad():
                q, _ = self.backbone.forward(x_e)
            lp, _ = prompt_loss(x_e, labels, task_id, self.backbone, self.pool)
            lk = key_loss(q, labels, task_id, self.pool)
        total = lp + lk
        total.backward()
        opt.step()
        return lp, lk, total

    def train_task(self, task: Task) -> TaskReport:
        cfg = self.config
        if task.task_id != self.pool.size + 1:
            raise ValueError(f"tasks must be learned in order: got task {task.task_id}, "
                             f"pool holds {self.pool.size}")
        entry = self.pool.expand(task.class_ids, cfg.granularity_for(len(task.class_ids)))
        train_g = cfg.trains_g_prompt(entry.task_id)
        self.pool.g_prompt.requires_grad = train_g
        params = self.pool.trainable(entry.task_id, train_g)
        opt = Adam(params, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2))

        x_all = self.embed(task.train.images)
        y_all = task.train.labels
        n = len(y_all)
        before = self.backbone.counter.snapshot()
        report = TaskReport(task.task_id, 0, 0, 0, 0)
        step = 0
        for epoch in range(cfg.epochs_per_task):
            order = np.random.default_rng([cfg.seed, task.task_id, epoch]).permutation(n)
            for lo in range(0, n, cfg.batch_size):
                idx = order[lo:lo + cfg.batch_size]
                lp, lk, total = self.train_step(Tensor(x_all.values[idx]), y_all[idx], task.task_id, opt)
                report.losses.append(LossRow(task.task_id, step, lp.item(), lk.item(), total.item()))
                step += 1
            if report.losses:
                last = report.losses[-1]
                log.debug("task %d epoch %d: prompts %.4f keys %.4f", task.task_id, epoch,
                          last.loss_prompts, last.loss_keys)
        after = self.backbone.counter.snapshot()
        report.batches = step
        report.forwards = after["forwards"] - before["forwards"]
        report.backwards = after["backwards"] - before["backwards"]
        report.forward_samples = after["forward_samples"] - before["forward_samples"]
        return report


def pretrain(backbone: VisionTransformer, train: LabeledSet, test: LabeledSet, epochs: int = 30,
             lr: float = 1e-3, batch_size: int = 64, seed: int = 0) -> dict:
    """Supervised pretext training of every backbone weight; the backbone is frozen afterwards."""
    num_classes = int(max(train.num_classes, test.num_classes))
    d = backbone.config.embed_dim
    head = Tensor(np.zeros((d, num_classes)), requires_grad=True, name="pretext_head")
    backbone.set_trainable(True)
    opt = Adam(backbone.parameters() + [head], lr=lr)
    n = len(train)
    history = []
    try:
        for epoch in range(epochs):
            order = np.random.default_rng([seed, epoch]).permutation(n)
            total = 0.0
            for lo in range(0, n, batch_size):
                idx = order[lo:lo + batch_size]
                opt.zero_grad()
                feature, _ = backbone.forward(backbone.embed(train.images[idx]))
                loss = cross_entropy(classify(feature, head), train.labels[idx])
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            history.append(total / max(n, 1))
            log.info("pretrain epoch %d: loss %.4f", epoch, history[-1])
    finally:
        backbone.set_trainable(False)
    with no_grad():
        correct = 0
        for lo in range(0, len(test), 256):
            feature, _ = backbone.forward(backbone.embed(test.images[lo:lo + 256]))
            correct += int((classify(feature, head).values.argmax(1) == test.labels[lo:lo + 256]).sum())
    return {"accuracy": correct / max(len(test), 1), "loss_history": history}


def config_dict(cfg: TrainConfig) -> dict:
    out = asdict(cfg)
    out["paradigm"] = cfg.paradigm.value
    return out
