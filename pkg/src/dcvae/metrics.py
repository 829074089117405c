"""Automatic evaluation: sentence-level BLEU-1..4 and distinct-1/2."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .corpus import read_pairs
from .sampling import load_generation_file

BLEU_EPS = 1e-9


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_n(hypothesis, references, max_n: int = 4) -> list[float]:
    """Per-n clipped n-gram precision times the brevity penalty.

    Counts are clipped against the maximum reference count per n-gram. A zero
    precision is smoothed to a tiny epsilon. The brevity penalty uses the
    reference length closest to the hypothesis (ties prefer the shorter one).
    """
    hyp = list(hypothesis)
    refs = [list(r) for r in references]
    if max_n < 1:
        raise ValueError("bleu_n: max_n must be at least 1")
    if not hyp or not refs or any(not r for r in refs):
        raise ValueError("bleu_n: hypothesis and references must be non-empty")

    c = len(hyp)
    r = min((abs(len(ref) - c), len(ref)) for ref in refs)[1]
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)

    scores = []
    for n in range(1, max_n + 1):
        counts = _ngrams(hyp, n)
        total = sum(counts.values())
        if total == 0:
            scores.append(bp * BLEU_EPS)
            continue
        clipped = 0
        for gram, cnt in counts.items():
            best = max(_ngrams(ref, n).get(gram, 0) for ref in refs)
            clipped += min(cnt, best)
        p = clipped / total
        scores.append(bp * (p if p > 0 else BLEU_EPS))
    return scores


def distinct_n(responses, n: int) -> float:
    """Unique n-grams over total n-grams across the whole response pool."""
    if n not in (1, 2):
        raise ValueError(f"distinct_n: n must be 1 or 2, got {n}")
    responses = [list(r) for r in responses]
    if not responses:
        raise ValueError("distinct_n: need at least one response")
    seen: set[tuple] = set()
    total = 0
    for resp in responses:
        grams = _ngrams(resp, n)
        seen.update(grams)
        total += sum(grams.values())
    return len(seen) / total if total else 0.0


@dataclass
class EvalReport:
    bleu_mean: list[float]     # BLEU-1..4
    bleu_std: list[float]
    distinct1: float
    distinct2: float
    queries: int
    responses: int

    def lines(self) -> list[str]:
        out = []
        for n in range(4):
            out.append(f"bleu{n + 1}_mean\t{self.bleu_mean[n]:.6f}")
            out.append(f"bleu{n + 1}_std\t{self.bleu_std[n]:.6f}")
        out.append(f"distinct1\t{self.distinct1:.6f}")
        out.append(f"distinct2\t{self.distinct2:.6f}")
        out.append(f"queries\t{self.queries}")
        out.append(f"responses\t{self.responses}")
        return out

    def summary(self) -> str:
        parts = [f"BLEU-{n + 1} {m:.3f}±{s:.3f}"
                 for n, (m, s) in enumerate(zip(self.bleu_mean, self.bleu_std))]
        parts.append(f"dist-1 {self.distinct1:.3f}")
        parts.append(f"dist-2 {self.distinct2:.3f}")
        parts.append(f"({self.queries} queries, {self.responses} responses)")
        return "  ".join(parts)


def evaluate_responses(generated, references_by_query) -> EvalReport:
    """Score (query, response tokens) pairs against grouped reference lists."""
    per_sentence = []
    pool = []
    queries = set()
    for query, resp in generated:
        refs = references_by_query.get(query)
        if not refs:
            raise ValueError(f"evaluate: query {query!r} has no references")
        if not resp:
            resp = ["<eos>"]  # scored as a degenerate one-token response
        per_sentence.append(bleu_n(resp, refs, max_n=4))
        pool.append(resp)
        queries.add(query)
    arr = np.array(per_sentence)
    return EvalReport(
        bleu_mean=[float(v) for v in arr.mean(axis=0)],
        bleu_std=[float(v) for v in arr.std(axis=0)],
        distinct1=distinct_n(pool, 1),
        distinct2=distinct_n(pool, 2),
        queries=len(queries),
        responses=len(pool),
    )


def evaluate(generated_path: str, corpus_path: str) -> EvalReport:
    """Score a generation file against the reference corpus it came from.

    Every generated line's query must appear in the reference corpus;
    otherwise the files are misaligned and the error reports both line
    counts.
    """
    gen = load_generation_file(generated_path)
    pairs = read_pairs(corpus_path)
    refs: dict[str, list[list[str]]] = {}
    for q, r in pairs:
        refs.setdefault(" ".join(q), []).append(r)
    missing = sorted({g["query"] for g in gen} - set(refs))
    if missing:
        raise ValueError(
            f"evaluate: generated file has {len(gen)} lines, reference corpus has "
            f"{len(pairs)} lines; {len(missing)} generated queries have no reference "
            f"(first: {missing[0]!r})")
    return evaluate_responses([(g["query"], g["response"]) for g in gen], refs)


def save_report(path: str, report: EvalReport):
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(report.lines()) + "\n")


def load_report(path: str) -> dict[str, float]:
    out: dict[str, float] = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            key, val = line.rstrip("\n").split("\t")
            out[key] = float(val)
    return out
