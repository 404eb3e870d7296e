import json

import numpy as np
import pytest

from treecalc.evaluation import (CompletionRecord, RunSummary, ablation_report, confusion_metrics,
                                 format_ablation, majority_baseline, random_topk_expectation,
                                 rank_candidates, to_csv, to_jsonl, topk_accuracy, topk_report,
                                 verification_metrics)
from treecalc.expr import Label, parse
from treecalc.generate import LabeledEquation

C, I = Label.CORRECT, Label.INCORRECT


def test_confusion_example():
    m = confusion_metrics([C, C, C, I, I], [C, C, I, C, I])
    assert m.acc == pytest.approx(0.6)
    assert m.prec == pytest.approx(2 / 3)
    assert m.rcl == pytest.approx(2 / 3)
    assert m.n == 5


def test_perfect_predictions():
    m = confusion_metrics([C, I, C], [C, I, C])
    assert (m.acc, m.prec, m.rcl) == (1.0, 1.0, 1.0)


def test_undefined_precision_is_none():
    m = confusion_metrics([I, I], [I, I])
    assert m.prec is None and m.rcl is None and m.acc == 1.0


def test_per_depth_supports_sum_to_total():
    preds = [C, I, C, C, I, I]
    labels = [C, C, I, C, I, C]
    depths = [1, 2, 2, 3, 3, 3]
    dm = verification_metrics(preds, labels, depths)
    assert sorted(dm.by_depth) == [1, 2, 3]
    assert sum(m.n for m in dm.by_depth.values()) == dm.overall.n == 6
    assert dm.by_depth[1].acc == 1.0
    rows = dm.records("test")
    assert rows[0]["depth"] == "all" and {r["split"] for r in rows} == {"test"}
    assert verification_metrics(preds, labels, depths).records("t") == dm.records("t")


def test_length_mismatch():
    with pytest.raises(ValueError):
        verification_metrics([C], [C, I], [1, 1])


def item(label, d=1):
    e = parse("(= x x)") if d == 1 else parse("(= (sin x) (sin x))")
    return LabeledEquation.make(e, label)


def test_majority_baseline():
    train = [item(C), item(C), item(I)]
    test = [item(C), item(I), item(I), item(I)]
    assert majority_baseline(train, test).overall.acc == 0.25
    assert majority_baseline([item(C), item(I)]).overall.acc == 0.5


def records(gold_rank, n=50, count=10):
    out = []
    for k in range(count):
        scores = list(np.linspace(1, 0, n))
        ranking = rank_candidates(scores)
        out.append(CompletionRecord(k, ranking, frozenset({ranking[gold_rank]}), 4))
    return out


def test_topk_basic_cases():
    first = records(0)
    assert topk_accuracy(first, 1) == topk_accuracy(first, 5) == 1.0
    third = records(2)
    assert topk_accuracy(third, 1) == 0.0 and topk_accuracy(third, 5) == 1.0
    with pytest.raises(ValueError):
        topk_accuracy(third, 0)


def test_ties_break_by_index():
    assert rank_candidates([0.5, 0.9, 0.5, 0.9]) == [1, 3, 0, 2]


def test_random_scores_give_hypergeometric_rate():
    rng = np.random.default_rng(0)
    recs = []
    for k in range(4000):
        ranking = rank_candidates(list(rng.random(50)))
        recs.append(CompletionRecord(k, ranking, frozenset({7}), 3))
    assert random_topk_expectation(50, 1, 5) == pytest.approx(0.1)
    assert topk_accuracy(recs, 5) == pytest.approx(0.1, abs=0.015)


def test_topk_report_is_monotone_in_k():
    rng = np.random.default_rng(1)
    recs = [CompletionRecord(k, rank_candidates(list(rng.random(20))),
                             frozenset(rng.choice(20, 2, replace=False).tolist()), 2 + k % 3)
            for k in range(200)]
    rows = topk_report(recs, [1, 5, 10])
    by = {(r["K"], r["depth"]): r["topk"] for r in rows}
    for d in ["all", 2, 3, 4]:
        assert by[(1, d)] <= by[(5, d)] <= by[(10, d)]


def run(model, variant, seed, acc, epochs=10):
    return RunSummary(model, variant, seed, acc, epochs)


def test_ablation_identical_runs_have_zero_gap():
    runs = [run("M", v, s, 0.8) for s in range(3) for v in ("2nd Order", "1st Order")]
    (row,) = ablation_report(runs)
    assert row["diff"] == 0.0
    assert row["2nd Order"]["acc_std"] == 0.0
    assert "M" in format_ablation([row])


def test_ablation_mean_and_std():
    runs = [run("M", "2nd Order", 0, 0.8), run("M", "2nd Order", 1, 0.9),
            run("M", "1st Order", 0, 0.7), run("M", "1st Order", 1, 0.7)]
    (row,) = ablation_report(runs)
    assert row["2nd Order"]["acc_mean"] == pytest.approx(0.85)
    assert row["2nd Order"]["acc_std"] == pytest.approx(0.05)
    assert row["diff"] == pytest.approx(0.15)


def test_ablation_rejects_unpaired():
    with pytest.raises(ValueError):
        ablation_report([run("M", "2nd Order", 0, 0.8)])
    with pytest.raises(ValueError):
        ablation_report([run("M", "2nd Order", 0, 0.8)] * 2 + [run("M", "1st Order", 0, 0.8)])


def test_writers():
    rows = [{"split": "test", "depth": 3, "acc": 0.5, "prec": None, "rcl": 1.0, "n": 4}]
    assert json.loads(to_jsonl(rows))["prec"] is None
    csv_text = to_csv(rows)
    assert csv_text.splitlines() == ["split,depth,acc,prec,rcl,n", "test,3,0.5,,1.0,4"]
