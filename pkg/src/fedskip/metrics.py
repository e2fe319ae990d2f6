"""Evaluation metrics: token-level micro/macro F1 and one-vs-rest AUC.

Tagging F1 excludes the O tag and pools TP/FP/FN over entity classes.
Multi-label metrics threshold scores at 0.5; AUC is the rank statistic
(Mann-Whitney, ties get half credit) macro-averaged over classes that have
both positives and negatives. Classes without gold positives are skipped
and counted in skipped_classes rather than polluting the averages."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedskip.errors import InputError


@dataclass
class Metrics:
    micro_f1: float | None
    macro_f1: float | None
    auc: float | None
    skipped_classes: int = 0

    def defined(self) -> dict[str, float]:
        return {k: v for k, v in (("micro_f1", self.micro_f1),
                                  ("macro_f1", self.macro_f1),
                                  ("auc", self.auc)) if v is not None}


def _f1(tp: int, fp: int, fn: int) -> float | None:
    denom = 2 * tp + fp + fn
    if denom == 0:
        return None
    return 2 * tp / denom


def evaluate_tagging(pred_tags, gold_tags, n_types: int) -> Metrics:
    pred = np.asarray(pred_tags).reshape(-1)
    gold = np.asarray(gold_tags).reshape(-1)
    if pred.shape != gold.shape:
        raise InputError(f"prediction/gold length mismatch: {pred.shape} vs {gold.shape}")
    n_tags = 2 * n_types + 1
    tp_all = fp_all = fn_all = 0
    per_class = []
    skipped = 0
    for c in range(1, n_tags):
        tp = int(np.sum((pred == c) & (gold == c)))
        fp = int(np.sum((pred == c) & (gold != c)))
        fn = int(np.sum((gold == c) & (pred != c)))
        tp_all += tp
        fp_all += fp
        fn_all += fn
        if tp + fn == 0:  # class absent from gold
            skipped += 1
            continue
        per_class.append(_f1(tp, fp, fn))
    micro = _f1(tp_all, fp_all, fn_all)
    macro = float(np.mean(per_class)) if per_class else None
    return Metrics(micro_f1=micro, macro_f1=macro, auc=None, skipped_classes=skipped)


def _rank_auc(scores: np.ndarray, positives: np.ndarray) -> float:
    """Mann-Whitney AUC with midranks for ties; equals the O(n^2) pairwise
    statistic with 0.5 credit for equal scores."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    n_pos = int(positives.sum())
    n_neg = len(scores) - n_pos
    rank_sum = float(ranks[positives].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def evaluate_multilabel(scores, golds, threshold: float = 0.5) -> Metrics:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(golds)
    if s.shape != y.shape or s.ndim != 2:
        raise InputError(f"scores/golds must share a [n, K] shape: {s.shape} vs {y.shape}")
    pred = s >= threshold
    gold = y > 0
    tp_all = int(np.sum(pred & gold))
    fp_all = int(np.sum(pred & ~gold))
    fn_all = int(np.sum(~pred & gold))
    micro = _f1(tp_all, fp_all, fn_all)

    per_class_f1 = []
    aucs = []
    skipped = 0
    for k in range(s.shape[1]):
        n_pos = int(gold[:, k].sum())
        if n_pos == 0:
            skipped += 1
            continue
        tp = int(np.sum(pred[:, k] & gold[:, k]))
        fp = int(np.sum(pred[:, k] & ~gold[:, k]))
        fn = n_pos - tp
        per_class_f1.append(_f1(tp, fp, fn))
        if n_pos < s.shape[0]:  # needs at least one negative too
            aucs.append(_rank_auc(s[:, k], gold[:, k]))
    macro = float(np.mean(per_class_f1)) if per_class_f1 else None
    auc = float(np.mean(aucs)) if aucs else None
    return Metrics(micro_f1=micro, macro_f1=macro, auc=auc, skipped_classes=skipped)


def evaluate(preds, golds, task: str, n_types: int = 0) -> Metrics:
    """Task dispatch: tagging wants tag ids, multilabel wants scores."""
    if task == "tagging":
        return evaluate_tagging(preds, golds, n_types)
    if task == "multilabel":
        return evaluate_multilabel(preds, golds)
    raise InputError(f"no evaluation defined for task {task!r}")
