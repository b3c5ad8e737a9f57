"""Corpus-level BLEU and qualitative side-by-side reports.

BLEU here is the strict, unsmoothed corpus score on whitespace tokens of
detokenized text: modified n-gram precisions (n = 1..4) clipped per
sentence against a single reference, multiplied by the brevity penalty.
Any zero precision (including an absent n-gram order, e.g. a corpus with
no 4-grams) makes the score exactly 0.
"""

from __future__ import annotations

import logging
import math
import random
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

logger = logging.getLogger(__name__)

MAX_ORDER = 4


class EvaluationError(Exception):
    pass


@dataclass
class BleuReport:
    bleu: float
    precisions: tuple[float, float, float, float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def line(self) -> str:
        p = self.precisions
        return (f"bleu={self.bleu:.4f} p1={p[0]:.4f} p2={p[1]:.4f} "
                f"p3={p[2]:.4f} p4={p[3]:.4f} bp={self.brevity_penalty:.4f} "
                f"hyp_len={self.hyp_len} ref_len={self.ref_len}")


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: Sequence[str], references: Sequence[str],
                lowercase: bool = False) -> BleuReport:
    """Single-reference corpus BLEU over whitespace tokens."""
    if len(hypotheses) != len(references):
        raise EvaluationError(
            f"line counts differ: {len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise EvaluationError("empty corpus")

    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        if lowercase:
            hyp, ref = hyp.lower(), ref.lower()
        hyp_toks = hyp.split()
        ref_toks = ref.split()
        hyp_len += len(hyp_toks)
        ref_len += len(ref_toks)
        for n in range(1, MAX_ORDER + 1):
            hyp_counts = _ngrams(hyp_toks, n)
            if not hyp_counts:
                continue
            ref_counts = _ngrams(ref_toks, n)
            totals[n - 1] += sum(hyp_counts.values())
            matches[n - 1] += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())

    precisions = tuple(m / t if t else 0.0 for m, t in zip(matches, totals))
    if hyp_len == 0:
        bp = 0.0
    else:
        bp = min(1.0, math.exp(1.0 - ref_len / hyp_len))
    if min(precisions) > 0.0:
        bleu = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER)
    else:
        bleu = 0.0
    return BleuReport(bleu=bleu, precisions=precisions, brevity_penalty=bp,
                      hyp_len=hyp_len, ref_len=ref_len)


@dataclass
class QualitativeRow:
    index: int
    source: str
    reference: str
    hypothesis: str


@dataclass
class QualitativeReport:
    rows: list[QualitativeRow]

    def to_text(self) -> str:
        blocks = []
        for row in self.rows:
            blocks.append("\n".join([
                f"[{row.index}]",
                f"Source      | {row.source}",
                f"Reference   | {row.reference}",
                f"Hypothesis  | {row.hypothesis}",
            ]))
        return ("\n\n".join(blocks) + "\n") if blocks else ""

    def to_tsv(self) -> str:
        header = "index\tsource\treference\thypothesis\n"
        body = "".join(f"{r.index}\t{r.source}\t{r.reference}\t{r.hypothesis}\n"
                       for r in self.rows)
        return header + body


def qualitative_table(sources: Sequence[str], references: Sequence[str],
                      hypotheses: Sequence[str], n: int, seed: int = 0) -> QualitativeReport:
    """Sample n aligned source/reference/hypothesis triples, seeded."""
    if not (len(sources) == len(references) == len(hypotheses)):
        raise EvaluationError("sources, references and hypotheses must be aligned")
    size = len(sources)
    if n < 0:
        raise EvaluationError("n must be >= 0")
    if n > size:
        logger.warning("requested %d rows but corpus has %d; clamping", n, size)
        n = size
    picks = sorted(random.Random(seed).sample(range(size), n))
    rows = [QualitativeRow(index=i, source=sources[i], reference=references[i],
                           hypothesis=hypotheses[i]) for i in picks]
    return QualitativeReport(rows=rows)
