"""Verification metrics by depth, Top-K completion accuracy, and ablation tables."""

from __future__ import annotations

import csv
import io
import json
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .expr import Label
from .generate import CompletionInstance, LabeledEquation
from .training import mean_std


@dataclass(frozen=True)
class Metrics:
    acc: float
    prec: float | None
    rcl: float | None
    n: int


@dataclass
class DepthMetrics:
    overall: Metrics
    by_depth: dict[int, Metrics]

    def records(self, split: str) -> list[dict]:
        rows = [{"split": split, "depth": "all", **_metric_dict(self.overall)}]
        for d, m in self.by_depth.items():
            rows.append({"split": split, "depth": d, **_metric_dict(m)})
        return rows


def _metric_dict(m: Metrics) -> dict:
    return {"acc": m.acc, "prec": m.prec, "rcl": m.rcl, "n": m.n}


def _as_bool(label) -> bool:
    if isinstance(label, Label):
        return label is Label.CORRECT
    if isinstance(label, str):
        return Label(label) is Label.CORRECT
    return bool(label)


def confusion_metrics(preds: Sequence, labels: Sequence) -> Metrics:
    """Accuracy, precision and recall with Correct as the positive class."""
    tp = fp = fn = tn = 0
    for p, y in zip(preds, labels):
        p, y = _as_bool(p), _as_bool(y)
        if p and y:
            tp += 1
        elif p:
            fp += 1
        elif y:
            fn += 1
        else:
            tn += 1
    n = tp + fp + fn + tn
    acc = (tp + tn) / n if n else float("nan")
    prec = tp / (tp + fp) if tp + fp else None
    rcl = tp / (tp + fn) if tp + fn else None
    return Metrics(acc, prec, rcl, n)


def verification_metrics(predictions: Sequence, labels: Sequence,
                         depths: Sequence[int]) -> DepthMetrics:
    if not (len(predictions) == len(labels) == len(depths)):
        raise ValueError(f"length mismatch: {len(predictions)} predictions, "
                         f"{len(labels)} labels, {len(depths)} depths")
    buckets: dict[int, tuple[list, list]] = defaultdict(lambda: ([], []))
    for p, y, d in zip(predictions, labels, depths):
        buckets[d][0].append(p)
        buckets[d][1].append(y)
    by_depth = {d: confusion_metrics(*buckets[d]) for d in sorted(buckets)}
    return DepthMetrics(confusion_metrics(predictions, labels), by_depth)


def majority_label(items: Iterable[LabeledEquation]) -> Label:
    counts = Counter(it.label for it in items)
    if not counts:
        raise ValueError("cannot take the majority of an empty split")
    # ties go to Correct
    return Label.CORRECT if counts[Label.CORRECT] >= counts[Label.INCORRECT] else Label.INCORRECT


def majority_baseline(train: Sequence[LabeledEquation],
                      evaluate_on: Sequence[LabeledEquation] | None = None) -> DepthMetrics:
    """Predict the training split's majority label everywhere."""
    target = list(evaluate_on if evaluate_on is not None else train)
    if not target:
        raise ValueError("empty split")
    lab = majority_label(train)
    return verification_metrics([lab] * len(target), [it.label for it in target],
                                [it.depth for it in target])


# -- completion -------------------------------------------------------------------

@dataclass
class CompletionRecord:
    instance_id: int
    ranking: list[int]
    gold: frozenset[int]
    depth: int

    def hit(self, k: int) -> bool:
        return any(c in self.gold for c in self.ranking[:k])


def rank_candidates(scores: Sequence[float]) -> list[int]:
    """Candidate indices by descending score; equal scores keep index order."""
    return sorted(range(len(scores)), key=lambda k: (-scores[k], k))


def score_instance(model, inst: CompletionInstance) -> list[float]:
    return [model.predict_proba(inst.filled(k)) for k in range(len(inst.candidates))]


def completion_record(instance_id: int, inst: CompletionInstance, scores: Sequence[float]) -> CompletionRecord:
    return CompletionRecord(instance_id, rank_candidates(scores), inst.gold, inst.depth)


def topk_accuracy(records: Sequence[CompletionRecord], k: int) -> float:
    if k < 1:
        raise ValueError("K must be >= 1")
    if not records:
        return float("nan")
    return sum(r.hit(k) for r in records) / len(records)


def topk_report(records: Sequence[CompletionRecord], ks: Sequence[int]) -> list[dict]:
    """Rows {K, depth, topk, n}: overall then per equation depth."""
    rows = []
    by_depth: dict[int, list] = defaultdict(list)
    for r in records:
        by_depth[r.depth].append(r)
    for k in ks:
        rows.append({"K": k, "depth": "all", "topk": topk_accuracy(records, k), "n": len(records)})
        for d in sorted(by_depth):
            rows.append({"K": k, "depth": d, "topk": topk_accuracy(by_depth[d], k),
                         "n": len(by_depth[d])})
    return rows


# -- ablation --------------------------------------------------------------------

@dataclass
class RunSummary:
    model: str
    variant: str          # "2nd Order" or "1st Order"
    seed: int
    test_acc: float
    epochs_to_best: int
    data_id: str = ""


def ablation_report(runs: Sequence[RunSummary]) -> list[dict]:
    """Model x {2nd Order, 1st Order}: mean ± std test accuracy and epochs-to-best.

    Every (model, seed, data) must appear once per variant.
    """
    keyed = defaultdict(dict)
    for r in runs:
        slot = keyed[(r.model, r.seed, r.data_id)]
        if r.variant in slot:
            raise ValueError(f"duplicate run for {r.model} seed {r.seed} variant {r.variant}")
        slot[r.variant] = r
    for key, slot in keyed.items():
        if set(slot) != {"2nd Order", "1st Order"}:
            raise ValueError(f"unpaired run for model {key[0]} seed {key[1]}: have {sorted(slot)}")
    rows = []
    for model in dict.fromkeys(r.model for r in runs):
        row = {"model": model}
        for variant in ("2nd Order", "1st Order"):
            rs = [slot[variant] for (m, _, _), slot in keyed.items() if m == model]
            acc_m, acc_s = mean_std([r.test_acc for r in rs])
            ep_m, ep_s = mean_std([r.epochs_to_best for r in rs])
            row[variant] = {"acc_mean": acc_m, "acc_std": acc_s,
                            "epochs_mean": ep_m, "epochs_std": ep_s, "n": len(rs)}
        row["diff"] = row["2nd Order"]["acc_mean"] - row["1st Order"]["acc_mean"]
        rows.append(row)
    return rows


def format_ablation(rows: Sequence[dict]) -> str:
    lines = [f"{'Models':<24}{'2nd Order':>20}{'1st Order':>20}{'Avg epochs (2nd/1st)':>24}"]
    for row in rows:
        a, b = row["2nd Order"], row["1st Order"]
        lines.append(f"{row['model']:<24}"
                     f"{100 * a['acc_mean']:>11.2f} ± {100 * a['acc_std']:<5.2f}"
                     f"{100 * b['acc_mean']:>11.2f} ± {100 * b['acc_std']:<5.2f}"
                     f"{a['epochs_mean']:>14.1f} / {b['epochs_mean']:<6.1f}")
    return "\n".join(lines)


# -- output files -------------------------------------------------------------------

def to_jsonl(rows: Iterable[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)


def to_csv(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO(newline="")
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: ("" if v is None else v) for k, v in r.items()})
    return buf.getvalue()


def random_topk_expectation(n_candidates: int, n_gold: int, k: int) -> float:
    """P(at least one gold among the top k of a uniformly random ranking)."""
    if k >= n_candidates:
        return 1.0
    miss = 1.0
    for j in range(k):
        miss *= (n_candidates - n_gold - j) / (n_candidates - j)
    return 1.0 - max(miss, 0.0)


def random_ranking_records(instances: Sequence[CompletionInstance], rng: np.random.Generator) -> list[CompletionRecord]:
    return [completion_record(i, inst, list(rng.random(len(inst.candidates))))
            for i, inst in enumerate(instances)]
