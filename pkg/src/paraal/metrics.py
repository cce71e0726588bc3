"""Paraphrase-aware evaluation of generated answers.

Accuracy comes in two readings: exact match against the one surface form
the generator happened to emit for the item, and match against any
surface form of the item's answer class. The second is the headline
number; the first is reported alongside because the gap between them is
the whole point of the paraphrase machinery.

BLEU here is sentence-level over very short sequences (answers are one
to six tokens), so orders with zero matches get add-one smoothing on the
precision numerator and denominator; unsmoothed BLEU-4 would be zero for
almost every answer. The smoothing is applied uniformly, so comparisons
across strategies stay fair.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import qamodel as qm
from .qamodel import QaModel, strip_eos
from .taskgen import Dataset, ParaphraseTable, QaItem, answer_set

ROUGE_BETA = 1.2
METRIC_NAMES = ("exact_accuracy", "paraphrase_accuracy",
                "bleu_1", "bleu_2", "bleu_3", "bleu_4", "rouge_l")


@dataclass
class EvalReport:
    overall: dict[str, float]
    per_type: dict[str, dict[str, float]]
    per_type_counts: dict[str, int]
    n_items: int


# ---------------------------------------------------------------------------
# Accuracy
# ---------------------------------------------------------------------------


def exact_accuracy(predictions: list[list[int]], items: list[QaItem]) -> float:
    if len(predictions) != len(items):
        raise ValueError(f"{len(predictions)} predictions for {len(items)} items")
    hits = sum(list(p) == list(it.answer_tokens)
               for p, it in zip(predictions, items))
    return hits / len(items)


def paraphrase_accuracy(predictions: list[list[int]], items: list[QaItem],
                        table: ParaphraseTable) -> float:
    """Fraction of predictions matching any surface form of their class."""
    if len(predictions) != len(items):
        raise ValueError(f"{len(predictions)} predictions for {len(items)} items")
    hits = 0
    for p, it in zip(predictions, items):
        hits += tuple(p) in {tuple(f) for f in table.forms[it.canonical_class]}
    return hits / len(items)


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


def _ngrams(tokens: list[int], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def modified_precision(prediction: list[int], references: list[list[int]],
                       n: int) -> tuple[int, int]:
    """(clipped matches, candidate n-gram count), unsmoothed."""
    grams = _ngrams(list(prediction), n)
    total = sum(grams.values())
    if total == 0:
        return 0, 0
    clip = Counter()
    for ref in references:
        for g, c in _ngrams(list(ref), n).items():
            clip[g] = max(clip[g], c)
    matches = sum(min(c, clip[g]) for g, c in grams.items())
    return matches, total


def brevity_penalty(pred_len: int, ref_lens: list[int]) -> float:
    # closest reference length, ties to the shorter one
    r = min(ref_lens, key=lambda L: (abs(L - pred_len), L))
    if pred_len >= r:
        return 1.0
    return float(np.exp(1.0 - r / pred_len))


def bleu_n(prediction: list[int], references: list[list[int]], n: int) -> float:
    if not 1 <= n <= 4:
        raise ValueError(f"BLEU order must be in [1, 4], got {n}")
    if not references:
        raise ValueError("BLEU needs at least one reference")
    if not prediction:
        return 0.0
    log_sum = 0.0
    for k in range(1, n + 1):
        matches, total = modified_precision(prediction, references, k)
        if matches == 0:
            p = (matches + 1) / (total + 1)
        else:
            p = matches / total
        log_sum += np.log(p)
    geo = float(np.exp(log_sum / n))
    return geo * brevity_penalty(len(prediction), [len(r) for r in references])


# ---------------------------------------------------------------------------
# ROUGE-L
# ---------------------------------------------------------------------------


def _lcs_length(a: list[int], b: list[int]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(prediction: list[int], references: list[list[int]],
            beta: float = ROUGE_BETA) -> float:
    """Best LCS F-measure over the references."""
    if not references:
        raise ValueError("ROUGE-L needs at least one reference")
    if not prediction:
        return 0.0
    best = 0.0
    for ref in references:
        lcs = _lcs_length(list(prediction), list(ref))
        if lcs == 0 or not ref:
            continue
        p = lcs / len(prediction)
        r = lcs / len(ref)
        f = (1 + beta ** 2) * p * r / (r + beta ** 2 * p)
        best = max(best, f)
    return best


# ---------------------------------------------------------------------------
# Report assembly
# ---------------------------------------------------------------------------


def _item_row(prediction: list[int], item: QaItem,
              table: ParaphraseTable) -> dict[str, float]:
    refs = answer_set(item, table)
    row = {
        "exact_accuracy": float(list(prediction) == list(item.answer_tokens)),
        "paraphrase_accuracy": float(tuple(prediction)
                                     in {tuple(f) for f in refs}),
        "rouge_l": rouge_l(prediction, refs),
    }
    for n in range(1, 5):
        row[f"bleu_{n}"] = bleu_n(prediction, refs, n)
    return row


def report_from_predictions(predictions: list[list[int]], items: list[QaItem],
                            table: ParaphraseTable) -> EvalReport:
    if len(predictions) != len(items):
        raise ValueError(f"{len(predictions)} predictions for {len(items)} items")
    if not items:
        raise ValueError("cannot evaluate an empty item list")
    rows = [_item_row(p, it, table) for p, it in zip(predictions, items)]
    by_type: dict[str, list[dict[str, float]]] = {}
    for row, it in zip(rows, items):
        by_type.setdefault(it.question_type, []).append(row)

    def mean_of(group):
        return {m: float(np.mean([r[m] for r in group])) for m in METRIC_NAMES}

    return EvalReport(
        overall=mean_of(rows),
        per_type={t: mean_of(g) for t, g in sorted(by_type.items())},
        per_type_counts={t: len(g) for t, g in sorted(by_type.items())},
        n_items=len(items))


def predict_answers(model: QaModel, dataset: Dataset,
                    items: list[QaItem]) -> list[list[int]]:
    """Eval-mode greedy answers (EOS stripped) for the given items."""
    questions = [it.question_tokens for it in items]
    features = np.stack([dataset.scene_features(it.scene_id) for it in items])
    h_rows = model.encode_eval_batch(questions, features)
    decoded = qm.decode_greedy_batch(model, h_rows, model.config.max_len)
    return [strip_eos(seq) for seq in decoded]


def evaluate(model: QaModel, dataset: Dataset,
             items: list[QaItem] | None = None) -> EvalReport:
    """Greedy-decode and score items (the dataset's test split by default)."""
    if items is None:
        items = dataset.test_items
    if not items:
        raise ValueError("cannot evaluate an empty item list")
    return report_from_predictions(predict_answers(model, dataset, items),
                                   items, dataset.table)
