"""Corpus caption metrics and token-level edit analysis.

Implements corpus BLEU-1..4 with clipped counts and the closest-reference
brevity penalty, ROUGE-L as an LCS F-measure, and the CIDEr-D consensus
scorer (tf-idf n-gram cosine with count clipping and a Gaussian length
penalty). Every scorer has an independent brute-force twin in the test suite.

Scores for BLEU and ROUGE-L are reported on a 0-100 scale. cider() returns
the conventional 0-10 scale; reports multiply it by 10 so the printed table
uses the same x100-style convention as the other columns.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

from .errors import InputError

Tokens = list[str]


def _ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# -- BLEU ----------------------------------------------------------------------


def bleu_all(hypotheses: list[Tokens], references: list[list[Tokens]],
             max_n: int = 4, smooth: bool = False) -> list[float]:
    """Corpus BLEU for every order 1..max_n, on a 0-100 scale.

    Clipped n-gram counts are pooled over the corpus; the brevity penalty uses
    the closest reference length per hypothesis (ties going to the shorter).
    With smooth=True, one is added to the matched and total counts of orders
    above 1 (zero-count protection at tiny scales; off by default).
    """
    if not hypotheses:
        raise InputError("BLEU needs a non-empty corpus")
    if len(hypotheses) != len(references):
        raise InputError("hypothesis and reference lists differ in length")
    if any(not refs for refs in references):
        raise InputError("every hypothesis needs at least one reference")
    matched = [0] * max_n
    total = [0] * max_n
    hyp_len = 0
    ref_len = 0
    for hyp, refs in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += min((abs(len(r) - len(hyp)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            counts = _ngrams(hyp, n)
            if not counts:
                continue
            max_ref = Counter()
            for ref in refs:
                for gram, c in _ngrams(ref, n).items():
                    if c > max_ref[gram]:
                        max_ref[gram] = c
            matched[n - 1] += sum(min(c, max_ref[gram]) for gram, c in counts.items())
            total[n - 1] += sum(counts.values())
    if hyp_len == 0:
        return [0.0] * max_n
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    scores = []
    for n in range(1, max_n + 1):
        log_sum = 0.0
        degenerate = False
        for k in range(n):
            m, t = matched[k], total[k]
            if smooth and k > 0:
                m, t = m + 1, t + 1
            if m == 0 or t == 0:
                degenerate = True
                break
            log_sum += math.log(m / t)
        scores.append(0.0 if degenerate else 100.0 * bp * math.exp(log_sum / n))
    return scores


def bleu(hypotheses: list[Tokens], references: list[list[Tokens]], n: int = 4,
         smooth: bool = False) -> float:
    """Corpus BLEU-n (see bleu_all)."""
    return bleu_all(hypotheses, references, max_n=n, smooth=smooth)[n - 1]


# -- ROUGE-L --------------------------------------------------------------------


def _lcs_length(a: Tokens, b: Tokens) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l_single(hypothesis: Tokens, references: list[Tokens],
                   beta: float = 1.2) -> float:
    """LCS F-measure against the best-matching reference, 0-100 scale."""
    if not references:
        raise InputError("ROUGE-L needs at least one reference")
    best = 0.0
    for ref in references:
        lcs = _lcs_length(hypothesis, ref)
        if lcs == 0:
            continue
        p = lcs / len(hypothesis)
        r = lcs / len(ref)
        f = (1 + beta * beta) * p * r / (r + beta * beta * p)
        best = max(best, f)
    return 100.0 * best


def rouge_l(hypotheses: list[Tokens], references: list[list[Tokens]],
            beta: float = 1.2) -> float:
    """Corpus ROUGE-L: mean of the per-example scores."""
    if not hypotheses:
        raise InputError("ROUGE-L needs a non-empty corpus")
    return sum(rouge_l_single(h, r, beta) for h, r in zip(hypotheses, references)) \
        / len(hypotheses)


# -- CIDEr-D ---------------------------------------------------------------------


def cider(hypotheses: list[Tokens], references: list[list[Tokens]],
          max_n: int = 4, sigma: float = 6.0) -> float:
    """CIDEr-D on the conventional 0-10 scale.

    idf comes from the reference corpus (document = one example's reference
    set); per-reference similarity is the count-clipped tf-idf cosine per
    n-gram order, damped by a Gaussian penalty on the length difference,
    averaged over orders and references, then scaled by 10.
    """
    if len(hypotheses) != len(references):
        raise InputError("hypothesis and reference lists differ in length")
    if len(hypotheses) < 2:
        raise InputError(
            "CIDEr needs at least 2 examples: with a single-document corpus "
            "every idf is log(1/1) = 0 and all vectors are degenerate"
        )
    doc_freq: Counter = Counter()
    for refs in references:
        seen = set()
        for ref in refs:
            for n in range(1, max_n + 1):
                seen.update(_ngrams(ref, n).keys())
        doc_freq.update(seen)
    log_docs = math.log(len(references))

    def tfidf_vec(tokens: Tokens):
        vecs, norms = [], []
        for n in range(1, max_n + 1):
            vec = {}
            for gram, c in _ngrams(tokens, n).items():
                idf = log_docs - math.log(max(1.0, doc_freq[gram]))
                vec[gram] = c * idf
            vecs.append(vec)
            norms.append(math.sqrt(sum(v * v for v in vec.values())))
        return vecs, norms

    scores = []
    for hyp, refs in zip(hypotheses, references):
        h_vecs, h_norms = tfidf_vec(hyp)
        total = 0.0
        for ref in refs:
            r_vecs, r_norms = tfidf_vec(ref)
            delta = float(len(hyp) - len(ref))
            penalty = math.exp(-(delta * delta) / (2.0 * sigma * sigma))
            sim_sum = 0.0
            for n in range(max_n):
                if h_norms[n] == 0.0 or r_norms[n] == 0.0:
                    continue
                dot = sum(min(v, r_vecs[n].get(g, 0.0)) * r_vecs[n].get(g, 0.0)
                          for g, v in h_vecs[n].items())
                sim_sum += penalty * dot / (h_norms[n] * r_norms[n])
            total += sim_sum / max_n
        scores.append(10.0 * total / len(refs))
    return sum(scores) / len(scores)


# -- token edit analysis ------------------------------------------------------------


@dataclass
class EditOp:
    kind: str  # "sub" | "ins" | "del"
    pos: int   # index in the draft (for ins: insert before this index)
    old: str | None = None
    new: str | None = None


@dataclass
class EditRecord:
    example_id: str
    draft: Tokens
    emended: Tokens
    count: int
    ops: list[EditOp]


def token_edits(draft: Tokens, emended: Tokens, example_id: str = "") -> EditRecord:
    """Token-level Levenshtein alignment with unit costs.

    On cost ties the backtrace prefers substitution over delete+insert, so a
    one-word change reports as a single substitution at its position.
    """
    m, n = len(draft), len(emended)
    dist = [[0] * (n + 1) for _ in range(m + 1)]
    for i in range(m + 1):
        dist[i][0] = i
    for j in range(n + 1):
        dist[0][j] = j
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            if draft[i - 1] == emended[j - 1]:
                dist[i][j] = dist[i - 1][j - 1]
            else:
                dist[i][j] = 1 + min(dist[i - 1][j - 1], dist[i - 1][j], dist[i][j - 1])
    ops: list[EditOp] = []
    i, j = m, n
    while i > 0 or j > 0:
        if i > 0 and j > 0 and draft[i - 1] == emended[j - 1] \
                and dist[i][j] == dist[i - 1][j - 1]:
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and dist[i][j] == dist[i - 1][j - 1] + 1:
            ops.append(EditOp("sub", i - 1, draft[i - 1], emended[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and dist[i][j] == dist[i - 1][j] + 1:
            ops.append(EditOp("del", i - 1, draft[i - 1]))
            i -= 1
        else:
            ops.append(EditOp("ins", i, new=emended[j - 1]))
            j -= 1
    ops.reverse()
    return EditRecord(example_id, list(draft), list(emended), dist[m][n], ops)


def apply_edits(draft: Tokens, ops: list[EditOp]) -> Tokens:
    """Replay an op list against the draft (ops carry draft-side indices)."""
    out = list(draft)
    shift = 0
    for op in ops:
        pos = op.pos + shift
        if op.kind == "sub":
            out[pos] = op.new
        elif op.kind == "del":
            del out[pos]
            shift -= 1
        else:
            out.insert(pos, op.new)
            shift += 1
    return out


def edit_histogram(records: list[EditRecord]) -> tuple[dict[int, int], int]:
    """Frequency table over positive edit counts, plus the unchanged tally."""
    hist: dict[int, int] = {}
    unchanged = 0
    for rec in records:
        if rec.count == 0:
            unchanged += 1
        else:
            hist[rec.count] = hist.get(rec.count, 0) + 1
    return dict(sorted(hist.items())), unchanged


def histogram_csv(hist: dict[int, int], unchanged: int) -> str:
    lines = ["edit_count,frequency"]
    lines += [f"{k},{v}" for k, v in sorted(hist.items())]
    lines.append(f"unchanged,{unchanged}")
    return "\n".join(lines) + "\n"


def histogram_chart(hist: dict[int, int], unchanged: int, width: int = 50) -> str:
    """Plain-text bar chart of the edit-count distribution."""
    lines = ["token edits per caption"]
    peak = max(hist.values(), default=1)
    for k, v in sorted(hist.items()):
        bar = "#" * max(1, round(width * v / peak))
        lines.append(f"{k:>3} | {bar} {v}")
    lines.append(f"unchanged: {unchanged}")
    return "\n".join(lines) + "\n"


# -- reports ----------------------------------------------------------------------


@dataclass
class MetricsReport:
    """Corpus scores in reported units (BLEU/ROUGE x100, CIDEr x10 of the
    0-10 scale so every column follows the same convention)."""

    counts: int
    bleu: list[float]          # orders 1..4
    rouge_l: float
    cider: float
    per_seed: list["MetricsReport"] = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {
            "counts": self.counts,
            "bleu_1": self.bleu[0], "bleu_2": self.bleu[1],
            "bleu_3": self.bleu[2], "bleu_4": self.bleu[3],
            "rouge_l": self.rouge_l, "cider": self.cider,
        }
        if self.per_seed:
            out["per_seed"] = [r.to_dict() for r in self.per_seed]
        return out


def compute_metrics(hypotheses: list[Tokens],
                    references: list[list[Tokens]]) -> MetricsReport:
    return MetricsReport(
        counts=len(hypotheses),
        bleu=bleu_all(hypotheses, references),
        rouge_l=rouge_l(hypotheses, references),
        cider=10.0 * cider(hypotheses, references),
    )


def aggregate_seeds(reports: list[MetricsReport]) -> MetricsReport:
    """Arithmetic mean per metric; the input reports are kept per seed."""
    if not reports:
        raise InputError("nothing to aggregate")
    if len({r.counts for r in reports}) != 1:
        raise InputError("per-seed reports cover different corpus sizes")
    k = len(reports)
    return MetricsReport(
        counts=reports[0].counts,
        bleu=[sum(r.bleu[i] for r in reports) / k for i in range(4)],
        rouge_l=sum(r.rouge_l for r in reports) / k,
        cider=sum(r.cider for r in reports) / k,
        per_seed=list(reports),
    )


def format_table(rows: dict[str, MetricsReport]) -> str:
    """Aligned table, one row per model label (CIDEr follows the x100-style
    convention: ten times the conventional 0-10 scale)."""
    header = f"{'model':<8}{'B-1':>8}{'B-2':>8}{'B-3':>8}{'B-4':>8}{'R-L':>8}{'C':>8}"
    lines = [header]
    for label, rep in rows.items():
        cells = rep.bleu + [rep.rouge_l, rep.cider]
        lines.append(f"{label:<8}" + "".join(f"{c:>8.1f}" for c in cells))
    return "\n".join(lines) + "\n"
