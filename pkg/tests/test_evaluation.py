import math

import numpy as np
import pytest

from mqmk.backbone import VisionTransformer
from mqmk.data import SynthSpec, generate, split_stream
from mqmk.evaluation import (
    AccuracyMatrix,
    IncompleteMatrixError,
    average_accuracy,
    classify_record,
    classify_with,
    confusion_csv,
    confusion_table,
    cost_model,
    evaluate,
    forgetting,
    km_predict,
    matching_rate,
    ncm_prototypes,
    oracle_analysis,
)
from mqmk.matching import MatchRecord
from mqmk.promptpool import PromptPool
from mqmk.training import Learner, TrainConfig

from .conftest import TINY, TINY_PLAN, make_pool


def independent_metrics(acc, T):
    A = sum(acc[t][T - 1] for t in range(T)) / T
    F = sum(acc[t][t] - acc[t][T - 1] for t in range(T)) / T
    return A, F


def test_hand_example():
    m = AccuracyMatrix(2)
    m.set(1, 1, 0.9)
    m.set(1, 2, 0.8)
    m.set(2, 2, 0.8)
    assert average_accuracy(m, 2) == pytest.approx(0.80, abs=1e-15)
    assert forgetting(m, 2) == pytest.approx(0.05, abs=1e-15)


def test_random_matrices_match_direct_formula():
    rng = np.random.default_rng(0)
    for _ in range(100):
        T = int(rng.integers(1, 8))
        acc = np.triu(rng.uniform(size=(T, T)))
        m = AccuracyMatrix.from_array(acc)
        for k in range(1, T + 1):
            A, F = independent_metrics(acc.tolist(), k)
            assert abs(average_accuracy(m, k) - A) <= 1e-15
            assert abs(forgetting(m, k) - F) <= 1e-15


def test_single_task_has_no_forgetting():
    m = AccuracyMatrix(1)
    m.set(1, 1, 0.7)
    assert average_accuracy(m, 1) == 0.7
    assert forgetting(m, 1) == 0.0


def test_incomplete_matrix():
    m = AccuracyMatrix(3)
    m.set(1, 1, 0.5)
    with pytest.raises(IncompleteMatrixError):
        average_accuracy(m, 2)
    with pytest.raises(IndexError):
        m.set(2, 1, 0.5)
    with pytest.raises(ValueError):
        m.set(1, 2, 1.5)


def test_matrix_csv():
    m = AccuracyMatrix.from_array([[1.0, 0.5], [0.0, 0.25]])
    assert m.to_csv().splitlines() == ["task,after_1,after_2", "1,1.0,0.5", "2,,0.25"]


def rec(selected, true):
    return MatchRecord((0.0,), selected, ((0.0,),), np.zeros(2), true)


def test_matching_rate_examples():
    assert matching_rate([rec(1, 1), rec(2, 1), rec(2, 2), rec(3, 3)]) == 0.75
    assert matching_rate([rec(1, 1)]) == 1.0
    with pytest.raises(ValueError):
        matching_rate([])


@pytest.mark.parametrize("M, ratio", [(1, 0.5), (2, 1.0), (5, 2.5), (10, 5.0)])
def test_inference_cost_ratio(M, ratio):
    assert cost_model("MQMK", M, "inference").ratio_vs_sqsk == ratio
    assert cost_model("SQSK", M, "inference").forwards_per_sample == 2


def test_training_cost():
    mq, sq = cost_model("MQMK", 10, "training"), cost_model("SQSK", 10, "training")
    assert (mq.forwards_per_sample, mq.backwards_per_sample) == (1, 1)
    assert (sq.forwards_per_sample, sq.backwards_per_sample) == (2, 1)
    with pytest.raises(ValueError):
        cost_model("MQMK", 10, "serving")


def test_confusion_table():
    table = confusion_table(np.array([1, 1, 2, 2, 2]), np.array([1, 2, 2, 2, 1]), 2)
    assert table.tolist() == [[1, 1], [1, 2]]
    assert confusion_csv(table).splitlines()[0] == "true_task,selected_1,selected_2"


# ------------------------------------------------------------ trained model

@pytest.fixture(scope="module")
def trained():
    ds = generate(SynthSpec(num_classes=6, train_per_class=12, test_per_class=6, image_size=8))
    stream = split_stream(ds.train, ds.test, 3, seed=1)
    vit = VisionTransformer(TINY, TINY_PLAN, seed=0)
    learner = Learner(vit, PromptPool(8, TINY_PLAN, 6, seed=0),
                      TrainConfig(epochs_per_task=4, batch_size=12, learning_rate=0.01))
    for task in stream:
        learner.train_task(task)
    return learner, stream, ds.test


def test_evaluate_over_seen_classes(trained):
    learner, stream, test = trained
    ev = evaluate(learner, test)
    assert len(ev.labels) == len(test)
    assert set(ev.predictions.tolist()) <= set(range(6))
    assert ev.batch.scores.shape == (len(test), 3)
    assert ev.batch.true_tasks.tolist() == [stream.task_of_class()[int(y)] for y in test.labels]


def test_inference_counts(trained):
    learner, _, test = trained
    learner.backbone.counter.reset()
    evaluate(learner, test)
    assert learner.backbone.counter.forward_samples == 3 * len(test)


def test_oracle_recombination(trained):
    learner, _, test = trained
    ev = evaluate(learner, test)
    rep = oracle_analysis(learner, test, ev)
    assert abs(rep.recombined_accuracy() - rep.natural_accuracy) <= 1e-12
    assert rep.n_true_selected + rep.n_false_selected == len(test)
    assert rep.matching_rate == pytest.approx(ev.matching_rate, abs=0)
    # samples matched to their own task already use the true prompt
    if rep.n_true_selected:
        assert rep.acc_true_selected is not None


def test_km_bounded_by_matching_rate(trained):
    learner, _, test = trained
    ev = evaluate(learner, test)
    km = classify_with("KM", ev.batch, learner.pool)
    assert np.mean(km == ev.labels) <= ev.matching_rate


def test_km_needs_class_keys(tiny_vit, tiny_images):
    from mqmk.matching import select_batch
    pool = make_pool(granularity=1)
    batch = select_batch(tiny_vit.embed(tiny_images), tiny_vit, pool, "MQSK")
    with pytest.raises(ValueError, match="class-level"):
        km_predict(batch, pool)


def test_classifiers_batch_and_record_agree():
    ds = generate(SynthSpec(num_classes=4, train_per_class=8, test_per_class=4, image_size=8))
    stream = split_stream(ds.train, ds.test, 2, seed=0)
    vit = VisionTransformer(TINY, TINY_PLAN, seed=0)
    learner = Learner(vit, PromptPool(8, TINY_PLAN, 4, seed=0), TrainConfig(epochs_per_task=2, batch_size=8))
    for task in stream:
        learner.train_task(task)
    ev = evaluate(learner, ds.test)
    protos = ncm_prototypes(learner, [t.train for t in stream])
    assert sorted(protos[0].tolist()) == [0, 1, 2, 3]
    for name in ("FC", "NCM", "KM"):
        batch_pred = classify_with(name, ev.batch, learner.pool, protos)
        rec_pred = [classify_record(name, r, learner.pool, protos) for r in ev.batch.records()]
        assert batch_pred.tolist() == rec_pred, name
    with pytest.raises(ValueError):
        classify_with("SVM", ev.batch, learner.pool)
    assert math.isclose(np.mean(classify_with("FC", ev.batch, learner.pool) == ev.labels), ev.accuracy)
