"""Caption-overlap metrics and retrieval-result scoring.

All metrics consume token lists produced by the shared tokenizer
(lowercase, punctuation stripped, whitespace split) and return values in
[0, 1].
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

from .encoders import tokenize
from .errors import ConfigError

ROUGE_BETA = 1.2
METEOR_SEARCH_CAP = 200_000


def _ngram_counts(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_n(hypothesis, references, n: int) -> float:
    """Single-segment BLEU: clipped modified n-gram precision, geometric
    mean over orders 1..n, brevity penalty against the closest reference
    length. Orders above 1 with zero matches get add-one smoothing; a
    zero-match unigram order makes the score 0.
    """
    if n < 1:
        raise ConfigError(f"bleu order must be >= 1, got {n}")
    if not references or any(not r for r in references):
        raise ConfigError("bleu needs non-empty references")
    if not hypothesis:
        return 0.0
    log_sum = 0.0
    for order in range(1, n + 1):
        hyp_counts = _ngram_counts(hypothesis, order)
        total = sum(hyp_counts.values())
        clipped = 0
        for gram, count in hyp_counts.items():
            best = max(_ngram_counts(ref, order).get(gram, 0) for ref in references)
            clipped += min(count, best)
        if clipped > 0:
            log_sum += math.log(clipped / total)
        elif order == 1:
            return 0.0
        else:
            log_sum += math.log((clipped + 1) / (total + 1))
    c = len(hypothesis)
    r = min((abs(len(ref) - c), len(ref)) for ref in references)[1]
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum / n)


def _lcs_length(a, b) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hypothesis, references, beta: float = ROUGE_BETA) -> float:
    """Longest-common-subsequence F-score, max over references."""
    if not references or any(not r for r in references):
        raise ConfigError("rouge needs non-empty references")
    if not hypothesis:
        return 0.0
    best = 0.0
    for ref in references:
        lcs = _lcs_length(hypothesis, ref)
        if lcs == 0:
            continue
        recall = lcs / len(ref)
        precision = lcs / len(hypothesis)
        f = (1 + beta ** 2) * recall * precision / (recall + beta ** 2 * precision)
        best = max(best, f)
    return best


def _min_chunks(hyp, ref, canon) -> tuple[int, int]:
    """(matches, chunks) of the alignment that maximizes matches and, among
    those, minimizes contiguous-run count. Branch-and-bound over the hyp
    positions with a node cap; the greedy left-to-right alignment is the
    fallback if the cap trips (only reachable on heavily repetitive text).
    """
    hyp_keys = [canon(w) for w in hyp]
    ref_keys = [canon(w) for w in ref]
    ref_counter = Counter(ref_keys)
    m = sum(min(c, ref_counter[k]) for k, c in Counter(hyp_keys).items()
            if k in ref_counter)
    if m == 0:
        return 0, 0
    positions = {}
    for j, k in enumerate(ref_keys):
        positions.setdefault(k, []).append(j)
    matchable = [i for i, k in enumerate(hyp_keys) if k in ref_counter]

    best = [None]
    nodes = [0]

    # a chunk continues only when the pair is adjacent in BOTH sentences
    def rec(i, used, matched, chunks, prev_hyp, prev_ref):
        nodes[0] += 1
        if nodes[0] > METEOR_SEARCH_CAP:
            return
        if best[0] is not None and chunks >= best[0]:
            return
        if matched + (len(matchable) - i) < m:
            return
        if i == len(matchable):
            if matched == m:
                best[0] = chunks
            return
        hi = matchable[i]
        for rp in positions[hyp_keys[hi]]:
            if rp in used:
                continue
            contiguous = prev_hyp is not None and hi == prev_hyp + 1 and rp == prev_ref + 1
            rec(i + 1, used | {rp}, matched + 1, chunks + (0 if contiguous else 1),
                hi, rp)
        rec(i + 1, used, matched, chunks, prev_hyp, prev_ref)

    rec(0, frozenset(), 0, 0, None, None)
    if best[0] is not None:
        return m, best[0]
    # fallback: greedy left-to-right
    used, chunks, prev_hi, prev_rp = set(), 0, None, None
    matched = 0
    for hi in matchable:
        for rp in positions[hyp_keys[hi]]:
            if rp not in used:
                used.add(rp)
                matched += 1
                contiguous = prev_hi is not None and hi == prev_hi + 1 and rp == prev_rp + 1
                chunks += 0 if contiguous else 1
                prev_hi, prev_rp = hi, rp
                break
    return matched, chunks


def meteor(hypothesis, references, synonyms=None) -> float:
    """Unigram-alignment F-mean with a fragmentation penalty, max over
    references. Matching is exact unless a synonym table maps words onto
    shared canonical keys.
    """
    if not references or any(not r for r in references):
        raise ConfigError("meteor needs non-empty references")
    if not hypothesis:
        return 0.0
    table = synonyms or {}
    canon = lambda w: table.get(w, w)
    best = 0.0
    for ref in references:
        m, chunks = _min_chunks(hypothesis, ref, canon)
        if m == 0:
            continue
        precision = m / len(hypothesis)
        recall = m / len(ref)
        f_mean = 10.0 * precision * recall / (recall + 9.0 * precision)
        penalty = 0.5 * (chunks / m) ** 3
        best = max(best, f_mean * (1.0 - penalty))
    return best


METRICS = {
    "bleu1": lambda hyp, refs: bleu_n(hyp, refs, 1),
    "bleu4": lambda hyp, refs: bleu_n(hyp, refs, 4),
    "meteor": meteor,
    "rougeL": rouge_l,
}
METRIC_NAMES = tuple(METRICS)


@dataclass
class ScoreReport:
    task: str
    scope: str
    rounds: int
    k: int
    per_round: dict = field(default_factory=dict)   # metric -> [round values]
    mean: dict = field(default_factory=dict)        # metric -> cross-round mean
    diagnostics: dict = field(default_factory=dict)

    def to_document(self, cross_task_average=None) -> dict:
        doc = {"task": self.task, "scope": self.scope, "rounds": self.rounds,
               "k": self.k}
        for name in METRIC_NAMES:
            doc[name] = {"per_round": self.per_round[name], "mean": self.mean[name]}
        doc["cross_task_average"] = cross_task_average
        doc["diagnostics"] = self.diagnostics
        return doc


def score_retrieval(run, k: int | None = None) -> ScoreReport:
    """Score one leave-one-out run with the hypothesis/reference adaptation.

    Text-to-image: the query's sampled caption is the hypothesis and each
    retrieved pair's five captions are the references. Image-to-text: each
    retrieved caption is a hypothesis against the query pair's five
    captions. Per query, scores over the top-k retrieved items are averaged;
    then over queries; then over rounds.
    """
    k = k if k is not None else run.k
    token_cache: dict[str, list] = {}

    def toks(text):
        if text not in token_cache:
            token_cache[text] = tokenize(text)
        return token_cache[text]

    round_sums = {name: [0.0] * run.rounds for name in METRIC_NAMES}
    round_counts = [0] * run.rounds
    empty_queries = 0
    for res in run.results:
        retrieved = res.retrieved[:k]
        if not retrieved:
            empty_queries += 1
            continue
        choice = run.caption_choice[res.round]
        per_metric = {name: 0.0 for name in METRIC_NAMES}
        for pid, cap_idx, _score in retrieved:
            if run.task == "t2i":
                hyp = toks(run.captions[res.query_id][choice[res.query_id]])
                refs = [toks(c) for c in run.captions[pid]]
            else:
                hyp_cap = cap_idx if cap_idx >= 0 else choice[pid]
                hyp = toks(run.captions[pid][hyp_cap])
                refs = [toks(c) for c in run.captions[res.query_id]]
            for name, fn in METRICS.items():
                per_metric[name] += fn(hyp, refs)
        for name in METRIC_NAMES:
            round_sums[name][res.round] += per_metric[name] / len(retrieved)
        round_counts[res.round] += 1
    per_round = {}
    mean = {}
    for name in METRIC_NAMES:
        values = [round_sums[name][r] / round_counts[r] if round_counts[r] else 0.0
                  for r in range(run.rounds)]
        per_round[name] = values
        mean[name] = sum(values) / len(values) if values else 0.0
    diagnostics = {"queries": run.query_count, "empty_queries": empty_queries}
    return ScoreReport(run.task, run.scope, run.rounds, k, per_round, mean,
                       diagnostics)


def cross_task_average(report_a: ScoreReport, report_b: ScoreReport) -> dict:
    """Arithmetic mean of the two tasks' cross-round means, per metric."""
    return {name: 0.5 * (report_a.mean[name] + report_b.mean[name])
            for name in METRIC_NAMES}
