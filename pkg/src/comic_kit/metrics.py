"""Corpus BLEU and caption statistics."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_len(hyp_len: int, refs: Sequence[Sequence[str]]) -> int:
    # ties go to the shorter reference
    return min((abs(len(r) - hyp_len), len(r)) for r in refs)[1]


def bleu(
    hypotheses: Sequence[Sequence[str]],
    references: Sequence[Sequence[Sequence[str]]],
    max_n: int = 4,
) -> list[float]:
    """Corpus BLEU-1..``max_n`` without smoothing.

    Clipped n-gram counts are pooled over the corpus; the brevity penalty uses
    the reference length closest to each hypothesis. An order with zero
    matches zeroes itself and every higher order.
    """
    if not hypotheses:
        raise ValueError("bleu needs at least one hypothesis")
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses but {len(references)} reference sets")
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    matched = [0] * max_n
    total = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, refs in zip(hypotheses, references):
        if not refs:
            raise ValueError("every hypothesis needs at least one reference")
        hyp_len += len(hyp)
        ref_len += _closest_ref_len(len(hyp), refs)
        for n in range(1, max_n + 1):
            counts = ngrams(hyp, n)
            best: Counter = Counter()
            for r in refs:
                best |= ngrams(r, n)
            matched[n - 1] += sum(min(c, best[g]) for g, c in counts.items())
            total[n - 1] += max(len(hyp) - n + 1, 0)

    if hyp_len == 0:
        return [0.0] * max_n
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    scores = []
    log_sum = 0.0
    for n in range(max_n):
        if matched[n] == 0:
            scores.extend([0.0] * (max_n - n))
            break
        log_sum += math.log(matched[n] / total[n])
        scores.append(bp * math.exp(log_sum / (n + 1)))
    return scores


def preprocess(caption: str) -> str:
    return " ".join(caption.lower().split())


def caption_stats(generated: Sequence[str], training_corpus: Iterable[str]) -> tuple[float, float]:
    """(percent of captions absent from the training corpus, mean length in words)."""
    if not generated:
        raise ValueError("caption_stats needs at least one caption")
    seen = {preprocess(c) for c in training_corpus}
    gen = [preprocess(c) for c in generated]
    unique = 100.0 * sum(c not in seen for c in gen) / len(gen)
    avg_len = sum(len(c.split()) for c in gen) / len(gen)
    return unique, avg_len


@dataclass
class MetricsReport:
    bleu: list[float]
    unique_pct: float
    avg_len: float
    n: int

    def to_json(self) -> str:
        return json.dumps({"bleu": self.bleu, "unique_pct": self.unique_pct, "avg_len": self.avg_len, "n": self.n})


def evaluate(
    generated: Sequence[str],
    references: Sequence[Sequence[str]],
    training_corpus: Iterable[str],
    max_n: int = 4,
) -> MetricsReport:
    hyps = [preprocess(g).split() for g in generated]
    refs = [[preprocess(r).split() for r in rs] for rs in references]
    unique, avg = caption_stats(generated, training_corpus)
    return MetricsReport(bleu(hyps, refs, max_n), unique, avg, len(generated))
