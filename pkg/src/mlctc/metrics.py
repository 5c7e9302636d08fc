"""Error-rate scoring via Levenshtein alignment with deterministic op counts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ErrorReport:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    ref_len: int = 0

    @property
    def errors(self):
        return self.substitutions + self.insertions + self.deletions

    @property
    def rate(self):
        if self.ref_len == 0:
            return 0.0 if self.errors == 0 else float("inf")
        return self.errors / self.ref_len

    def __add__(self, other):
        return ErrorReport(
            self.substitutions + other.substitutions,
            self.insertions + other.insertions,
            self.deletions + other.deletions,
            self.ref_len + other.ref_len,
        )


def _distance_matrix(ref, hyp):
    m, n = len(ref), len(hyp)
    d = np.empty((m + 1, n + 1), dtype=np.int32)
    d[0, :] = np.arange(n + 1)
    d[:, 0] = np.arange(m + 1)
    if n == 0 or m == 0:
        return d
    offsets = np.arange(n)
    all_ins = np.arange(1, n + 1)
    for i in range(1, m + 1):
        sub_cost = np.fromiter((ref[i - 1] != h for h in hyp), count=n, dtype=np.int32)
        base = np.minimum(d[i - 1, :-1] + sub_cost, d[i - 1, 1:] + 1)
        # fold in the left-to-right insertion dependency via a running min:
        # d[i,j] = min over k<=j of base_k + (j-k)
        run = np.minimum.accumulate(base - offsets) + offsets
        d[i, 1:] = np.minimum(run, i + all_ins)
    return d


def edit_distance(ref, hyp):
    """Minimal substitutions+insertions+deletions turning ``ref`` into ``hyp``.

    Tie-broken alignments prefer substitution over insertion over deletion,
    so the individual counts are deterministic.
    """
    ref = list(ref)
    hyp = list(hyp)
    d = _distance_matrix(ref, hyp)
    i, j = len(ref), len(hyp)
    s = ins = dele = 0
    while i > 0 or j > 0:
        here = d[i, j]
        if i > 0 and j > 0 and d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]) == here:
            s += ref[i - 1] != hyp[j - 1]
            i -= 1
            j -= 1
        elif j > 0 and d[i, j - 1] + 1 == here:
            ins += 1
            j -= 1
        else:
            dele += 1
            i -= 1
    return ErrorReport(int(s), int(ins), int(dele), len(ref))


def split_words(units, wb_unit):
    """Word sequences delimited by the boundary token; empty words dropped."""
    words = []
    cur = []
    for u in units:
        if u == wb_unit:
            if cur:
                words.append(tuple(cur))
            cur = []
        else:
            cur.append(u)
    if cur:
        words.append(tuple(cur))
    return words


def score(refs, hyps, level="char", wb_unit=None):
    """Aggregate error report over a corpus, plus per-utterance reports.

    Char level compares unit sequences directly (the boundary token counts
    as a position); word level splits on the boundary token first. Counts
    are pooled over the corpus before dividing.
    """
    if len(refs) != len(hyps):
        raise ValueError(f"got {len(refs)} references but {len(hyps)} hypotheses")
    if level not in ("char", "word"):
        raise ValueError(f"unknown level {level!r}")
    if level == "word" and wb_unit is None:
        raise ValueError("word-level scoring needs the boundary unit")
    per_utt = []
    total = ErrorReport()
    for ref, hyp in zip(refs, hyps):
        if level == "word":
            ref = split_words(ref, wb_unit)
            hyp = split_words(hyp, wb_unit)
        rep = edit_distance(ref, hyp)
        per_utt.append(rep)
        total = total + rep
    return total, per_utt
