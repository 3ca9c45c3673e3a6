"""Accuracy matrix, A_T / F_T, matching rate, true-prompt oracle analysis, FC/NCM/KM heads, cost model."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np

from .backbone import classify
from .data import LabeledSet
from .matching import MatchBatch, MatchRecord, Paradigm, cosine_matrix, prompted_query, select_batch
from .numerics import Tensor, no_grad


class IncompleteMatrixError(ValueError):
    pass


class AccuracyMatrix:
    """Accuracy(t, T') for 1 <= t <= T' <= T; unpopulated cells are NaN."""

    def __init__(self, num_tasks: int):
        if num_tasks < 1:
            raise ValueError("AccuracyMatrix needs at least one task")
        self.num_tasks = num_tasks
        self.values = np.full((num_tasks, num_tasks), np.nan)

    def set(self, task: int, after: int, accuracy: float):
        if not 1 <= task <= after <= self.num_tasks:
            raise IndexError(f"Accuracy({task}, {after}) is outside the lower triangle")
        if not 0.0 <= accuracy <= 1.0:
            raise ValueError(f"accuracy {accuracy} not in [0, 1]")
        self.values[task - 1, after - 1] = accuracy

    def get(self, task: int, after: int) -> float:
        return float(self.values[task - 1, after - 1])

    def column(self, after: int) -> np.ndarray:
        if not 1 <= after <= self.num_tasks:
            raise IndexError(f"no column {after}")
        col = self.values[:after, after - 1]
        if np.isnan(col).any():
            raise IncompleteMatrixError(f"column {after} is not fully populated")
        return col

    def diagonal(self, upto: int) -> np.ndarray:
        diag = np.diag(self.values)[:upto]
        if np.isnan(diag).any():
            raise IncompleteMatrixError(f"diagonal up to task {upto} is not fully populated")
        return diag

    @classmethod
    def from_array(cls, values) -> "AccuracyMatrix":
        values = np.asarray(values, dtype=np.float64)
        m = cls(values.shape[0])
        m.values = np.where(np.tril(np.ones_like(values, dtype=bool)).T, values, np.nan)
        return m

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task"] + [f"after_{j}" for j in range(1, self.num_tasks + 1)])
        for t in range(self.num_tasks):
            w.writerow([t + 1] + ["" if np.isnan(v) else repr(float(v)) for v in self.values[t]])
        return buf.getvalue()


def average_accuracy(matrix: AccuracyMatrix, T: int) -> float:
    """A_T: mean of Accuracy(t, T) over t = 1..T."""
    return float(matrix.column(T).sum() / T)


def forgetting(matrix: AccuracyMatrix, T: int) -> float:
    """F_T: mean over t = 1..T of Accuracy(t, t) - Accuracy(t, T)."""
    return float((matrix.diagonal(T) - matrix.column(T)).sum() / T)


def matching_rate(records) -> float:
    """Fraction of samples whose selected task equals the true task."""
    if isinstance(records, MatchBatch):
        if records.true_tasks is None:
            raise ValueError("matching_rate needs true tasks")
        if len(records) == 0:
            raise ValueError("matching_rate of an empty record list")
        return float(np.mean(records.selected == records.true_tasks))
    records = list(records)
    if not records:
        raise ValueError("matching_rate of an empty record list")
    if any(r.true_task is None for r in records):
        raise ValueError("matching_rate needs true tasks")
    return sum(r.selected == r.true_task for r in records) / len(records)


# ---------------------------------------------------------------- inference

@dataclass
class Evaluation:
    batch: MatchBatch
    labels: np.ndarray
    predictions: np.ndarray

    @property
    def accuracy(self) -> float:
        return float(np.mean(self.predictions == self.labels)) if len(self.labels) else float("nan")

    @property
    def matching_rate(self) -> float:
        return matching_rate(self.batch)


def fc_predict(features: np.ndarray, pool, classes=None) -> np.ndarray:
    """Argmax of the linear head restricted to ``classes`` (default: all seen classes)."""
    mask = pool.seen_classes if classes is None else classes
    with no_grad():
        return classify(Tensor(features), pool.head, mask).values.argmax(axis=1)


def evaluate(learner, data: LabeledSet, K: int | None = None, chunk: int = 256) -> Evaluation:
    """Class-incremental inference: no task id, prediction over every seen class."""
    K = learner.config.K if K is None else K
    pool = learner.pool
    owner = pool.task_of_class()
    true_tasks = np.array([owner[int(y)] for y in data.labels], dtype=np.int64)
    batches = []
    for lo in range(0, len(data), chunk):
        x_e = learner.embed(data.images[lo:lo + chunk])
        batches.append(select_batch(x_e, learner.backbone, pool, learner.paradigm, K, true_tasks[lo:lo + chunk]))
    batch = concat_batches(batches)
    return Evaluation(batch, data.labels.copy(), fc_predict(batch.features, pool))


def concat_batches(batches: list[MatchBatch]) -> MatchBatch:
    first = batches[0]
    return MatchBatch(
        first.paradigm,
        np.concatenate([b.scores for b in batches]),
        [np.concatenate([b.cosines[t] for b in batches]) for t in range(len(first.cosines))],
        np.concatenate([b.selected for b in batches]),
        np.concatenate([b.features for b in batches]),
        np.concatenate([b.queries for b in batches], axis=1),
        None if first.true_tasks is None else np.concatenate([b.true_tasks for b in batches]),
    )


def true_prompt_features(learner, images: np.ndarray, true_tasks: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = []
    for lo in range(0, len(images), chunk):
        x_e = learner.embed(images[lo:lo + chunk])
        out.append(prompted_query(learner.backbone, learner.pool, x_e, true_tasks[lo:lo + chunk]))
    d = learner.backbone.config.embed_dim
    return np.concatenate(out) if out else np.zeros((0, d))


# ---------------------------------------------------------------- oracle analysis

@dataclass
class OracleReport:
    """Accuracies of the natural/forced-true groups; a group with no samples is None."""

    acc_false_selected: float | None
    acc_true_selected: float | None
    acc_false_forced_true: float | None
    acc_all_forced_true: float | None
    matching_rate: float
    natural_accuracy: float
    n_true_selected: int
    n_false_selected: int

    def recombined_accuracy(self) -> float:
        n = self.n_true_selected + self.n_false_selected
        total = 0.0
        if self.n_true_selected:
            total += self.acc_true_selected * self.n_true_selected / n
        if self.n_false_selected:
            total += self.acc_false_selected * self.n_false_selected / n
        return total

    def to_dict(self) -> dict:
        return asdict(self)


def _acc(pred, labels):
    return float(np.mean(pred == labels)) if len(labels) else None


def oracle_analysis(learner, data: LabeledSet, evaluation: Evaluation | None = None) -> OracleReport:
    """Partition by selection correctness and re-predict everything under the true prompt."""
    ev = evaluation if evaluation is not None else evaluate(learner, data)
    batch, labels = ev.batch, ev.labels
    correct_sel = batch.selected == batch.true_tasks
    forced = fc_predict(true_prompt_features(learner, data.images, batch.true_tasks), learner.pool)
    ok = ev.predictions == labels
    return OracleReport(
        acc_false_selected=_acc(ev.predictions[~correct_sel], labels[~correct_sel]),
        acc_true_selected=_acc(ev.predictions[correct_sel], labels[correct_sel]),
        acc_false_forced_true=_acc(forced[~correct_sel], labels[~correct_sel]),
        acc_all_forced_true=_acc(forced, labels),
        matching_rate=float(np.mean(correct_sel)),
        natural_accuracy=float(np.mean(ok)),
        n_true_selected=int(correct_sel.sum()),
        n_false_selected=int((~correct_sel).sum()),
    )


# ---------------------------------------------------------------- FC / NCM / KM

def ncm_prototypes(learner, train_sets: list[LabeledSet]) -> tuple[np.ndarray, np.ndarray]:
    """Per-class mean of training queries computed under each class's own (true) prompt."""
    owner = learner.pool.task_of_class()
    classes, protos = [], []
    for data in train_sets:
        tasks = np.array([owner[int(y)] for y in data.labels], dtype=np.int64)
        feats = true_prompt_features(learner, data.images, tasks)
        for c in sorted(set(data.labels.tolist())):
            classes.append(c)
            protos.append(feats[data.labels == c].mean(axis=0))
    return np.array(classes, dtype=np.int64), np.stack(protos)


def km_predict(batch: MatchBatch, pool) -> np.ndarray:
    """Class of the single best (task, key) cosine over the whole pool."""
    for e in pool.entries:
        if e.key_granularity != len(e.class_ids):
            raise ValueError(f"KM classifier needs class-level keys; task {e.task_id} has "
                             f"{e.key_granularity} keys for {len(e.class_ids)} classes")
    classes = np.concatenate([np.asarray(e.class_ids) for e in pool.entries])
    allcos = np.concatenate(batch.cosines, axis=1)
    return classes[allcos.argmax(axis=1)]


def classify_with(classifier: str, batch: MatchBatch, pool, prototypes=None) -> np.ndarray:
    classifier = classifier.upper()
    if classifier == "FC":
        return fc_predict(batch.features, pool)
    if classifier == "KM":
        return km_predict(batch, pool)
    if classifier == "NCM":
        if prototypes is None:
            raise ValueError("NCM needs prototypes (see ncm_prototypes)")
        classes, protos = prototypes
        return classes[cosine_matrix(batch.features, protos).argmax(axis=1)]
    raise ValueError(f"unknown classifier {classifier!r}; expected FC, NCM or KM")


def classify_record(classifier: str, record: MatchRecord, pool, prototypes=None) -> int:
    """Single-record form of ``classify_with``; the record query is the classified feature (MQ)."""
    classifier = classifier.upper()
    if classifier == "KM":
        best = max(((c, t, j) for t, cos in enumerate(record.cosines) for j, c in enumerate(cos)),
                   key=lambda x: (x[0], -x[1], -x[2]))
        entry = pool.entries[best[1]]
        if entry.key_granularity != len(entry.class_ids):
            raise ValueError("KM classifier needs class-level keys")
        return entry.class_ids[best[2]]
    feature = record.query[None]
    if classifier == "FC":
        return int(fc_predict(feature, pool)[0])
    if classifier == "NCM":
        classes, protos = prototypes
        return int(classes[cosine_matrix(feature, protos).argmax(axis=1)[0]])
    raise ValueError(f"unknown classifier {classifier!r}")


# ---------------------------------------------------------------- cost model

@dataclass
class CostRecord:
    phase: str
    paradigm: str
    num_prompts: int
    forwards_per_sample: int
    backwards_per_sample: int
    ratio_vs_sqsk: float


def cost_model(paradigm, num_prompts: int, phase: str) -> CostRecord:
    """Backbone passes per sample.

    Inference: multi-query needs one prompted pass per prompt, single-query
    needs the promptless query plus one prompted pass. Training: the query
    of a multi-query model is the prediction pass itself.
    """
    paradigm = Paradigm.parse(paradigm)
    if num_prompts < 1:
        raise ValueError("num_prompts must be >= 1")
    if phase == "inference":
        fwd, bwd, base = (num_prompts if paradigm.multi_query else 2), 0, 2
    elif phase == "training":
        fwd, bwd, base = (1 if paradigm.multi_query else 2), 1, 2
    else:
        raise ValueError(f"phase must be 'training' or 'inference', got {phase!r}")
    return CostRecord(phase, paradigm.value, num_prompts, fwd, bwd, fwd / base)


def confusion_table(true_tasks: np.ndarray, selected: np.ndarray, num_tasks: int) -> np.ndarray:
    """Counts of (true task, selected task), 1-based ids mapped to 0-based cells."""
    table = np.zeros((num_tasks, num_tasks), dtype=np.int64)
    np.add.at(table, (true_tasks - 1, selected - 1), 1)
    return table


def confusion_csv(table: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true_task"] + [f"selected_{j}" for j in range(1, table.shape[1] + 1)])
    for t, row in enumerate(table):
        w.writerow([t + 1] + [int(v) for v in row])
    return buf.getvalue()
