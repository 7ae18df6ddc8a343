"""Token-overlap metrics, the unaffected rule, accuracy reports and head-count statistics."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .vocab import FUNCTIONS, FunctionLabel, labels_to_mask, mask_to_labels

BLEU_THRESHOLD = 0.8
ROUGE_THRESHOLD = 0.6


class MetricsError(ValueError):
    pass


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate, reference, max_n: int = 4) -> float:
    """Unsmoothed BLEU; the n-gram order is capped at the candidate length."""
    cand, ref = list(candidate), list(reference)
    if not ref:
        raise MetricsError("reference must be nonempty")
    if not cand:
        return 0.0
    order = min(max_n, len(cand))
    log_p = 0.0
    for n in range(1, order + 1):
        c, r = _ngrams(cand, n), _ngrams(ref, n)
        clipped = sum(min(k, r[g]) for g, k in c.items())
        if clipped == 0:
            return 0.0
        log_p += math.log(clipped / sum(c.values()))
    bp = math.exp(min(0.0, 1.0 - len(ref) / len(cand)))
    return bp * math.exp(log_p / order)


def lcs_length(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference) -> float:
    cand, ref = list(candidate), list(reference)
    if not ref:
        raise MetricsError("reference must be nonempty")
    if not cand:
        return 0.0
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return 2 * p * r / (p + r)


def unaffected(output, baseline) -> bool:
    if not list(baseline):
        raise MetricsError("baseline output must be nonempty")
    return bleu(output, baseline) > BLEU_THRESHOLD or rouge_l(output, baseline) > ROUGE_THRESHOLD


def sparsity_stat(importance, threshold) -> dict:
    """Per function, the fraction of heads whose importance exceeds ``threshold``.

    ``threshold`` is a scalar or a per-function mapping.
    """
    vals = importance.values
    out = {}
    for f in FUNCTIONS:
        th = threshold[f] if isinstance(threshold, dict) else threshold
        if th < 0:
            raise MetricsError("threshold must be nonnegative")
        out[f] = float(np.mean(vals[f.index] > th))
    return out


def relative_threshold(importance, fraction: float = 1e-3) -> dict:
    return {f: fraction * float(importance.values[f.index].max()) for f in FUNCTIONS}


def selected_heads(importance, function) -> list[tuple[int, int]]:
    """Elbow selection over the positive part of a function's importance row."""
    from .probe import elbow_select
    row = np.maximum(importance.row(function), 0.0)
    return [importance.head(j) for j in elbow_select(row)]


def head_count_delta(before, after, functions=FUNCTIONS) -> dict:
    if before.values.shape != after.values.shape:
        raise MetricsError("importance matrices differ in extents")
    return {f: len(selected_heads(after, f)) - len(selected_heads(before, f)) for f in functions}


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Outcome:
    example_id: int
    step: int
    labels: frozenset
    output: tuple[str, ...]
    correct: bool


@dataclass
class EvalReport:
    per_function: dict                 # FunctionLabel -> {"n": int, "accuracy": float}
    overall: float
    n: int
    outcomes: list = field(default_factory=list)
    affected_rate: float | None = None
    metadata: dict = field(default_factory=dict)

    def accuracy(self, function: FunctionLabel) -> float:
        return self.per_function[function]["accuracy"]

    def to_dict(self) -> dict:
        return {
            "overall_accuracy": self.overall,
            "n": self.n,
            "affected_rate": self.affected_rate,
            "per_function": {f.value: self.per_function[f] for f in FUNCTIONS if f in self.per_function},
            "metadata": self.metadata,
            "outcomes": [[o.example_id, o.step, labels_to_mask(o.labels), list(o.output), o.correct]
                         for o in self.outcomes],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        pf = {FunctionLabel.parse(k): v for k, v in doc["per_function"].items()}
        outs = [Outcome(int(e), int(s), mask_to_labels(int(m)), tuple(o), bool(c))
                for e, s, m, o, c in doc.get("outcomes", [])]
        return cls(pf, float(doc["overall_accuracy"]), int(doc["n"]), outs, doc.get("affected_rate"),
                   dict(doc.get("metadata", {})))

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))


def function_accuracy(outcomes, exclude: FunctionLabel | None = None) -> dict:
    """Per-function accuracy, optionally over only the steps not labelled ``exclude``."""
    n, hit = Counter(), Counter()
    for o in outcomes:
        if exclude is not None and exclude in o.labels:
            continue
        for f in o.labels:
            n[f] += 1
            hit[f] += o.correct
    return {f: {"n": n[f], "accuracy": hit[f] / n[f]} for f in FUNCTIONS if n[f]}


def build_report(outcomes, baseline: EvalReport | None = None, metadata: dict | None = None) -> EvalReport:
    outs = sorted(outcomes, key=lambda o: (o.example_id, o.step))
    overall = sum(o.correct for o in outs) / len(outs) if outs else 0.0
    affected = None
    if baseline is not None:
        ref = {(o.example_id, o.step): o.output for o in baseline.outcomes}
        pairs = [(o.output, ref[(o.example_id, o.step)]) for o in outs if ref.get((o.example_id, o.step))]
        if pairs:
            affected = sum(not unaffected(a, b) for a, b in pairs) / len(pairs)
    return EvalReport(function_accuracy(outs), overall, len(outs), outs, affected, dict(metadata or {}))
