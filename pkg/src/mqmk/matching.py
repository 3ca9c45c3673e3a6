"""Query construction and prompt selection for the SQSK/SQMK/MQSK/MQMK paradigms."""

from __future__ import annotations

import csv
import enum
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .backbone import VisionTransformer
from .numerics import Tensor, no_grad
from .promptpool import PromptPool


class Paradigm(str, enum.Enum):
    SQSK = "SQSK"
    SQMK = "SQMK"
    MQSK = "MQSK"
    MQMK = "MQMK"

    @property
    def multi_query(self) -> bool:
        return self.value.startswith("MQ")

    @property
    def multi_key(self) -> bool:
        return self.value.endswith("MK")

    @classmethod
    def parse(cls, value) -> "Paradigm":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValueError(f"unknown paradigm {value!r}; expected one of {[p.value for p in cls]}") from None


class GranularityError(ValueError):
    pass


@dataclass
class MatchRecord:
    scores: tuple[float, ...]
    selected: int
    cosines: tuple[tuple[float, ...], ...]
    query: np.ndarray
    true_task: int | None = None

    @property
    def correct(self) -> bool | None:
        return None if self.true_task is None else self.selected == self.true_task


@dataclass
class MatchBatch:
    """Selection results for a batch; task ids are 1-based."""

    paradigm: Paradigm
    scores: np.ndarray                      # (B, M)
    cosines: list[np.ndarray]               # per task: (B, N_t)
    selected: np.ndarray                    # (B,)
    features: np.ndarray                    # (B, D), feature used for classification
    queries: np.ndarray                     # (M, B, D) for MQ, (1, B, D) for SQ
    true_tasks: np.ndarray | None = None
    sample_ids: np.ndarray | None = field(default=None)

    def __len__(self):
        return len(self.selected)

    def records(self) -> list[MatchRecord]:
        out = []
        for i in range(len(self.selected)):
            q = self.queries[self.selected[i] - 1, i] if self.paradigm.multi_query else self.queries[0, i]
            out.append(MatchRecord(
                scores=tuple(float(s) for s in self.scores[i]),
                selected=int(self.selected[i]),
                cosines=tuple(tuple(float(c) for c in cos[i]) for cos in self.cosines),
                query=q.copy(),
                true_task=None if self.true_tasks is None else int(self.true_tasks[i]),
            ))
        return out


def single_query(backbone: VisionTransformer, x_e: Tensor) -> np.ndarray:
    """Promptless [class] feature, ``(B, D)``."""
    with no_grad():
        feature, _ = backbone.forward(x_e)
    return feature.values


def prompted_query(backbone: VisionTransformer, pool: PromptPool, x_e: Tensor, task_ids) -> np.ndarray:
    """[class] feature under (P_g, P_t). ``task_ids`` is one id or one per sample."""
    task_ids = np.asarray(task_ids)
    with no_grad():
        if task_ids.ndim == 0:
            prompt = pool.entry(int(task_ids)).prompt
        else:
            prompt = Tensor(pool.stacked_prompts()[task_ids - 1])
        feature, _ = backbone.forward(x_e, pool.g_prompt, prompt)
    return feature.values


def multi_query(backbone: VisionTransformer, pool: PromptPool, x_e: Tensor, workers: int = 1) -> np.ndarray:
    """Query pool ``(M, B, D)``: one prompted forward per task, independent of each other."""
    if pool.size == 0:
        raise ValueError("multi_query: empty prompt pool")
    tasks = range(1, pool.size + 1)
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(lambda t: prompted_query(backbone, pool, x_e, t), tasks))
    else:
        results = [prompted_query(backbone, pool, x_e, t) for t in tasks]
    return np.stack(results)


def cosine_matrix(queries: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Cosines between ``(B, D)`` queries and ``(N, D)`` keys, clamped to [-1, 1]."""
    qn = np.linalg.norm(queries, axis=-1, keepdims=True)
    kn = np.linalg.norm(keys, axis=-1, keepdims=True)
    if (qn <= 1e-12).any() or (kn <= 1e-12).any():
        raise ValueError("cosine_matrix: zero-norm query or key")
    return np.clip((queries / qn) @ (keys / kn).T, -1.0, 1.0)


def aggregate_scores(cosines: np.ndarray, K: int) -> np.ndarray:
    """Sum of the K largest entries along the last axis."""
    n = cosines.shape[-1]
    if not 1 <= K <= n:
        raise ValueError(f"top-K aggregation needs 1 <= K <= {n}, got K={K}")
    if K == 1:
        return cosines.max(axis=-1)
    return -np.sort(-cosines, axis=-1)[..., :K].sum(axis=-1)


def aggregate_score(query, keys, K: int) -> float:
    """S = sum of the K largest cosines between one query and a key list."""
    cos = cosine_matrix(np.atleast_2d(np.asarray(query, dtype=np.float64)), np.atleast_2d(np.asarray(keys)))
    return float(aggregate_scores(cos, K)[0])


def score_queries(queries: np.ndarray, keys: list[np.ndarray], K: int = 1):
    """Scores ``(B, M)``, per-task cosines and 1-based selections ``argmax_t S^t``.

    ``queries`` is ``(M, B, D)`` (task t is scored with its own query) or
    ``(1, B, D)`` (one shared query). ``np.argmax`` keeps the first maximum,
    so ties go to the lowest task index.
    """
    if queries.shape[0] not in (1, len(keys)):
        raise ValueError(f"need 1 or {len(keys)} query sets, got {queries.shape[0]}")
    cosines = [cosine_matrix(queries[t if len(queries) > 1 else 0], k) for t, k in enumerate(keys)]
    scores = np.stack([aggregate_scores(c, K) for c in cosines], axis=1)
    return scores, cosines, scores.argmax(axis=1) + 1


def check_granularity(pool: PromptPool, paradigm: Paradigm, K: int):
    for e in pool.entries:
        n = e.key_granularity
        if not paradigm.multi_key and n != 1:
            raise GranularityError(f"{paradigm.value} needs one key per task; task {e.task_id} has {n}")
        if paradigm.multi_key and n == 1 and len(e.class_ids) > 1:
            raise GranularityError(f"{paradigm.value} needs class-level keys; task {e.task_id} has a single key")
        if not 1 <= K <= n:
            raise ValueError(f"K={K} out of range for task {e.task_id} with {n} keys")


def select_batch(x_e: Tensor, backbone: VisionTransformer, pool: PromptPool, paradigm, K: int = 1,
                 true_tasks=None, workers: int = 1) -> MatchBatch:
    """Score every task, pick I = argmax_t S^t (first index wins ties), build the feature."""
    paradigm = Paradigm.parse(paradigm)
    if pool.size == 0:
        raise ValueError("select_prompt: empty prompt pool")
    check_granularity(pool, paradigm, K)

    queries = multi_query(backbone, pool, x_e, workers) if paradigm.multi_query else single_query(backbone, x_e)[None]
    scores, cosines, selected = score_queries(queries, [e.keys.values for e in pool.entries], K)

    if paradigm.multi_query:
        features = queries[selected - 1, np.arange(len(selected))]
    else:
        features = prompted_query(backbone, pool, x_e, selected)
    return MatchBatch(paradigm, scores, cosines, selected, features, queries,
                      None if true_tasks is None else np.asarray(true_tasks))


def select_prompt(sample, backbone: VisionTransformer, pool: PromptPool, paradigm, K: int = 1,
                  true_task: int | None = None) -> MatchRecord:
    """Single-sample selection. ``sample`` is an image ``(C, H, W)`` or embedded tokens."""
    if isinstance(sample, Tensor):
        x_e = sample if sample.ndim == 3 else sample.reshape((1,) + sample.shape)
    else:
        with no_grad():
            x_e = backbone.embed(sample)
    batch = select_batch(x_e, backbone, pool, paradigm, K, None if true_task is None else [true_task])
    return batch.records()[0]


def records_csv(records: list[MatchRecord], sample_ids=None) -> str:
    """CSV with columns sample_id, true_task, selected_task, S_1..S_M."""
    m = max((len(r.scores) for r in records), default=0)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "true_task", "selected_task"] + [f"S_{t}" for t in range(1, m + 1)])
    for i, r in enumerate(records):
        sid = i if sample_ids is None else sample_ids[i]
        w.writerow([sid, "" if r.true_task is None else r.true_task, r.selected]
                   + [repr(s) for s in r.scores] + [""] * (m - len(r.scores)))
    return buf.getvalue()
