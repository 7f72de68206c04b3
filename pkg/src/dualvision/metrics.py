"""Caption metrics: CIDEr-D, an n-gram recall proxy and length statistics."""
from __future__ import annotations

import csv
import math
import re
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError

MAX_N = 4
SIGMA = 6.0
_TOKEN = re.compile(r"[^\W_]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation (no stemming)."""
    return _TOKEN.findall(text.lower())


def ngram_counts(tokens: Sequence[str], n_max: int = MAX_N) -> Counter:
    counts: Counter = Counter()
    for n in range(1, n_max + 1):
        for i in range(len(tokens) - n + 1):
            counts[tuple(tokens[i : i + n])] += 1
    return counts


@dataclass
class NGramProfile:
    """n-gram counts per sentence plus corpus document frequencies.

    A "document" is one candidate's reference set: an n-gram's document
    frequency is the number of reference sets in which it occurs.
    """

    references: list[list[Counter]]
    document_frequency: Counter
    n_docs: int

    @classmethod
    def build(cls, references: Sequence[Sequence[str]], n_max: int = MAX_N) -> "NGramProfile":
        refs = [[ngram_counts(tokenize(r), n_max) for r in group] for group in references]
        df: Counter = Counter()
        for group in refs:
            df.update(set().union(*[set(c) for c in group]) if group else set())
        return cls(refs, df, len(refs))

    def idf(self, gram: tuple) -> float:
        return math.log(float(self.n_docs)) - math.log(max(1.0, float(self.document_frequency[gram])))


def _tfidf(counts: Counter, profile: NGramProfile, n_max: int):
    vec = [dict() for _ in range(n_max)]
    norm = np.zeros(n_max)
    for gram, tf in counts.items():
        w = tf * profile.idf(gram)
        vec[len(gram) - 1][gram] = w
        norm[len(gram) - 1] += w * w
    length = sum(tf for gram, tf in counts.items() if len(gram) == 1)
    return vec, np.sqrt(norm), length


def _pair_similarity(hyp, ref, n_max: int, sigma: float) -> np.ndarray:
    vec_h, norm_h, len_h = hyp
    vec_r, norm_r, len_r = ref
    penalty = math.exp(-((len_h - len_r) ** 2) / (2 * sigma**2))
    out = np.zeros(n_max)
    for n in range(n_max):
        # clipped: a hypothesis n-gram cannot earn more weight than the reference gives it
        val = sum(min(w, vec_r[n].get(g, 0.0)) * vec_r[n].get(g, 0.0) for g, w in vec_h[n].items())
        if norm_h[n] != 0 and norm_r[n] != 0:
            val /= norm_h[n] * norm_r[n]
        out[n] = val * penalty
    return out


def cider_d_scores(
    candidates: Sequence[str],
    references: Sequence[Sequence[str]],
    n_max: int = MAX_N,
    sigma: float = SIGMA,
) -> np.ndarray:
    """Per-candidate CIDEr-D in [0, 10]; IDF comes from the reference sets."""
    if len(candidates) != len(references):
        raise ContractError(f"{len(candidates)} candidates but {len(references)} reference sets")
    if any(len(r) == 0 for r in references):
        raise ContractError("every candidate needs at least one reference")
    if not candidates:
        return np.zeros(0)
    profile = NGramProfile.build(references, n_max)
    scores = np.zeros(len(candidates))
    for i, cand in enumerate(candidates):
        toks = tokenize(cand)
        if not toks:
            warnings.warn(f"candidate {i} is empty; it scores 0", stacklevel=2)
        hyp = _tfidf(ngram_counts(toks, n_max), profile, n_max)
        total = np.zeros(n_max)
        for ref_counts in profile.references[i]:
            total += _pair_similarity(hyp, _tfidf(ref_counts, profile, n_max), n_max, sigma)
        scores[i] = float(np.mean(total)) / len(profile.references[i]) * 10.0
    return scores


def cider_d(candidates: Sequence[str], references: Sequence[Sequence[str]], **kwargs) -> float:
    """Corpus CIDEr-D: mean of the per-candidate scores."""
    scores = cider_d_scores(candidates, references, **kwargs)
    return float(scores.mean()) if len(scores) else 0.0


# -- recall proxy -----------------------------------------------------------------
def bag_cosine(a: str, b: str, n_max: int = 2) -> float:
    """Cosine between bag-of-n-gram count vectors (n = 1..n_max)."""
    ca, cb = ngram_counts(tokenize(a), n_max), ngram_counts(tokenize(b), n_max)
    dot = sum(v * cb.get(g, 0) for g, v in ca.items())
    na = math.sqrt(sum(v * v for v in ca.values()))
    nb = math.sqrt(sum(v * v for v in cb.values()))
    return dot / (na * nb) if na and nb else 0.0


def recall_windows(groups: Sequence[str], window: int = 5) -> list[tuple[list[int], list[int]]]:
    """Split indices into per-group windows of ``min(window, group size)``.

    Returns ``(members, scored)`` pairs: ``members`` is the candidate pool of
    one window and ``scored`` the gold items evaluated against it.  Groups are
    cut into consecutive windows; a short tail is evaluated against the last
    full-size window of its group, so every item is scored exactly once.
    """
    order: dict[str, list[int]] = {}
    for i, g in enumerate(groups):
        order.setdefault(g, []).append(i)
    out = []
    for idx in order.values():
        n = min(window, len(idx))
        for start in range(0, len(idx), n):
            chunk = idx[start : start + n]
            if len(chunk) == n:
                out.append((chunk, chunk))
            else:
                out.append((idx[-n:], chunk))
    return out


def recall_proxy(
    candidates: Sequence[str],
    gold: Sequence[str],
    k: int = 1,
    groups: Optional[Sequence[str]] = None,
    window: int = 5,
    n_max: int = 2,
) -> float:
    """Fraction of gold segments whose own candidate ranks in the top ``k``.

    Each gold segment is compared with every candidate in its window; ties in
    similarity go to the lower index.  Without ``groups`` all items share one
    group.  This is an n-gram substitute for an embedding-based recall and is
    not comparable to it.
    """
    if len(candidates) != len(gold):
        raise ContractError(f"{len(candidates)} candidates but {len(gold)} gold segments")
    if k < 1:
        raise ContractError("k must be at least 1")
    if not gold:
        return 0.0
    groups = list(groups) if groups is not None else [""] * len(gold)
    hits = total = 0
    for members, scored in recall_windows(groups, window):
        if k > len(members):
            raise ContractError(f"k={k} exceeds the window of {len(members)} candidates")
        for i in scored:
            sims = [(-bag_cosine(gold[i], candidates[j], n_max), pos) for pos, j in enumerate(members)]
            top = {members[pos] for _, pos in sorted(sims)[:k]}
            hits += i in top
            total += 1
    return hits / total


# -- caption length ---------------------------------------------------------------
@dataclass
class LengthStats:
    histogram: dict[int, int]  # token count -> number of captions, bins of width 1
    mean: float
    median: float
    count: int

    def rows(self) -> list[tuple[int, int]]:
        if not self.histogram:
            return []
        lo, hi = min(self.histogram), max(self.histogram)
        return [(n, self.histogram.get(n, 0)) for n in range(lo, hi + 1)]

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["token_length", "count"])
            writer.writerows(self.rows())


def length_stats(candidates: Sequence[str]) -> LengthStats:
    lengths = [len(tokenize(c)) for c in candidates]
    if not lengths:
        return LengthStats({}, float("nan"), float("nan"), 0)
    return LengthStats(dict(sorted(Counter(lengths).items())), float(np.mean(lengths)), float(np.median(lengths)), len(lengths))


# -- report -------------------------------------------------------------------------
@dataclass
class EvalReport:
    cider: float
    recall_proxy: float
    recall_k: int
    lengths: LengthStats
    rows: list[dict] = field(default_factory=list)
    judge_percent: Optional[float] = None
    judge_valid: int = 0

    def summary(self) -> dict:
        out = {
            "cider": self.cider,
            f"recall_proxy@{self.recall_k}": self.recall_proxy,
            "mean_length": self.lengths.mean,
            "median_length": self.lengths.median,
            "clips": self.lengths.count,
        }
        if self.judge_percent is not None:
            out["judge_percent"] = self.judge_percent
            out["judge_valid"] = self.judge_valid
        return out

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with (out_dir / "report.csv").open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["metric", "value"])
            for key, value in self.summary().items():
                writer.writerow([key, repr(value) if isinstance(value, float) else value])
        if self.rows:
            with (out_dir / "per_clip.csv").open("w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=list(self.rows[0]), lineterminator="\n")
                writer.writeheader()
                writer.writerows(self.rows)
        self.lengths.to_csv(out_dir / "length_histogram.csv")


def evaluate_captions(
    clip_ids: Sequence[str],
    predictions: Sequence[str],
    references: Sequence[str],
    groups: Optional[Sequence[str]] = None,
    k: int = 1,
) -> EvalReport:
    """CIDEr-D, recall proxy and length statistics for one prediction per clip."""
    per_clip = cider_d_scores(predictions, [[r] for r in references]) if predictions else np.zeros(0)
    rows = [
        {"clip_id": cid, "prediction": p, "reference": r, "cider": float(c), "length": len(tokenize(p))}
        for cid, p, r, c in zip(clip_ids, predictions, references, per_clip)
    ]
    recall = recall_proxy(predictions, references, k, groups) if predictions else 0.0
    return EvalReport(float(per_clip.mean()) if len(per_clip) else 0.0, recall, k, length_stats(predictions), rows)
