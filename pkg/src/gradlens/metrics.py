"""ROUGE-1/2/L F-scores for reconstructions, reported on a 0-100 scale.

Tokens are compared by identity (vocab ids from the data module's tokenizer);
there is no stemming or case folding here.  Aggregation uses the population
standard deviation.

A captured batch gradient is invariant under permutations of the examples in
the batch, so a reconstruction's example order is arbitrary; per-batch
evaluation therefore pairs reconstructed sequences to references by the
score-maximizing one-to-one matching before scoring.
"""

from __future__ import annotations

import itertools
import logging
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, HashMismatchError

log = logging.getLogger("gradlens.metrics")


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _f_score(matches: int, cand_total: int, ref_total: int) -> float:
    if cand_total == 0 or ref_total == 0:
        return 0.0
    p = matches / cand_total
    r = matches / ref_total
    if p + r == 0.0:
        return 0.0
    return 100.0 * 2.0 * p * r / (p + r)


def rouge_n(candidate, reference, n: int) -> float:
    """F1 over clipped n-gram counts, scaled to [0, 100]."""
    if n not in (1, 2):
        raise DomainError("rouge_n supports n in {1, 2}")
    candidate, reference = list(candidate), list(reference)
    if not reference:
        log.warning("rouge_n: empty reference, scoring 0")
        return 0.0
    cand_counts = _ngrams(candidate, n)
    ref_counts = _ngrams(reference, n)
    matches = sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
    return _f_score(matches, max(len(candidate) - n + 1, 0),
                    max(len(reference) - n + 1, 0))


def lcs_length(a, b) -> int:
    """Dynamic-programming longest common subsequence length."""
    a, b = list(a), list(b)
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[len(b)]


def rouge_l(candidate, reference) -> float:
    """LCS-based F1 scaled to [0, 100]."""
    candidate, reference = list(candidate), list(reference)
    if not candidate or not reference:
        return 0.0
    return _f_score(lcs_length(candidate, reference), len(candidate), len(reference))


@dataclass
class RougeReport:
    rouge1_f: float
    rouge2_f: float
    rougeL_f: float
    rouge1_std: float
    rouge2_std: float
    rougeL_std: float
    per_example: list  # dicts: fingerprint, example, rouge1/2/L

    def to_jsonable(self) -> dict:
        return {
            "rouge1_f": self.rouge1_f,
            "rouge2_f": self.rouge2_f,
            "rougeL_f": self.rougeL_f,
            "rouge1_std": self.rouge1_std,
            "rouge2_std": self.rouge2_std,
            "rougeL_std": self.rougeL_std,
            "per_example": self.per_example,
        }


def score_pair(candidate, reference) -> dict:
    return {
        "rouge1": rouge_n(candidate, reference, 1),
        "rouge2": rouge_n(candidate, reference, 2),
        "rougeL": rouge_l(candidate, reference),
    }


def pair_examples(cand_rows: list, ref_rows: list) -> list:
    """Index of the candidate assigned to each reference, maximizing the mean
    combined ROUGE over the batch (exact for b <= 8, greedy beyond)."""
    b = len(ref_rows)
    matrix = np.zeros((b, b))
    for i, cand in enumerate(cand_rows):
        for j, ref in enumerate(ref_rows):
            s = score_pair(cand, ref)
            matrix[i, j] = s["rouge1"] + s["rouge2"] + s["rougeL"]
    if b <= 8:
        best_perm, best_total = None, -1.0
        for perm in itertools.permutations(range(b)):
            total = sum(matrix[perm[j], j] for j in range(b))
            if total > best_total:
                best_total, best_perm = total, perm
        return list(best_perm)
    taken = set()
    assignment = [0] * b
    for j in np.argsort([-matrix[:, j].max() for j in range(b)]):
        order = np.argsort(-matrix[:, j])
        pick = next(int(i) for i in order if int(i) not in taken)
        taken.add(pick)
        assignment[int(j)] = pick
    return assignment


def evaluate_run(results: list, references: dict) -> RougeReport:
    """Per-example ROUGE for reconstruction results, then mean and population
    standard deviation.

    `results` entries carry a batch fingerprint plus ordered per-example token
    sequences; `references` maps fingerprints to the true per-example token
    sequences recorded by the simulator.
    """
    if not results:
        raise DomainError("no results to evaluate")
    per_example = []
    for res in results:
        fp = res["fingerprint"]
        if fp not in references:
            raise HashMismatchError(f"no reference for fingerprint {fp[:12]}...")
        ref_rows = references[fp]["token_ids"]
        cand_rows = res["token_ids"]
        if len(cand_rows) != len(ref_rows):
            raise HashMismatchError(
                f"fingerprint {fp[:12]}...: {len(cand_rows)} reconstructed "
                f"examples vs {len(ref_rows)} references"
            )
        assignment = pair_examples(cand_rows, ref_rows)
        for j, ref in enumerate(ref_rows):
            scores = score_pair(cand_rows[assignment[j]], ref)
            per_example.append({"fingerprint": fp, "example": j, **scores})
    r1 = np.array([e["rouge1"] for e in per_example])
    r2 = np.array([e["rouge2"] for e in per_example])
    rl = np.array([e["rougeL"] for e in per_example])
    return RougeReport(
        rouge1_f=float(r1.mean()), rouge2_f=float(r2.mean()), rougeL_f=float(rl.mean()),
        rouge1_std=float(r1.std()), rouge2_std=float(r2.std()), rougeL_std=float(rl.std()),
        per_example=per_example,
    )
