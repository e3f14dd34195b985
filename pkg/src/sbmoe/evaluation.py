"""Exhaustive dense retrieval and IR evaluation.

Scoring is brute force over the whole document store, which keeps results
exact and deterministic at the corpus sizes this toolkit targets.  Metrics
follow the trec_eval conventions: linear NDCG gain by default, queries
without relevant documents excluded from means.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betainc

from .errors import DataError, DegenerateVarianceError, NumericError, ShapeError
from .head import HeadParams, apply_head
from .training import SIM_COSINE, SIM_DOT

Qrels = dict[str, dict[str, int]]
Run = dict[str, list[tuple[str, float]]]


def retrieve(query_store, doc_store, head: HeadParams | None = None,
             k: int = 100, similarity: str = SIM_COSINE) -> Run:
    """Top-k documents per query by exhaustive scoring.

    The head, when given, transforms both sides with gating noise off.
    Ordering is total and deterministic: descending score, ties broken by
    ascending doc id.
    """
    if k < 1:
        raise DataError("k must be >= 1")
    if query_store.dim != doc_store.dim:
        raise ShapeError(f"store dimensions disagree: {query_store.dim} vs {doc_store.dim}")
    q = query_store.vectors
    d = doc_store.vectors
    if head is not None:
        if head.config.dim != query_store.dim:
            raise ShapeError(f"head dimension {head.config.dim} does not match "
                             f"store dimension {query_store.dim}")
        q = apply_head(head, q)
        d = apply_head(head, d)

    # pre-sorting columns by doc id makes a stable sort break ties by id
    id_order = sorted(range(len(doc_store.ids)), key=lambda i: doc_store.ids[i])
    ordered_ids = [doc_store.ids[i] for i in id_order]
    d = d[id_order]

    if similarity == SIM_COSINE:
        qn = np.linalg.norm(q, axis=1, keepdims=True)
        dn = np.linalg.norm(d, axis=1, keepdims=True)
        if np.any(qn == 0.0) or np.any(dn == 0.0):
            raise NumericError("cosine similarity of a zero-norm vector")
        q = q / qn
        d = d / dn
    elif similarity != SIM_DOT:
        raise DataError(f"unknown similarity {similarity!r}")

    scores = q @ d.T
    k = min(k, len(ordered_ids))
    run: Run = {}
    for row, qid in enumerate(query_store.ids):
        order = np.argsort(-scores[row], kind="stable")[:k]
        run[qid] = [(ordered_ids[i], float(scores[row, i])) for i in order]
    return run


def _gain(grade: int, exponential: bool) -> float:
    return float(2 ** grade - 1) if exponential else float(grade)


def ndcg_at_k(run: Run, qrels: Qrels, k: int = 10, exponential: bool = False) -> dict[str, float]:
    """Per-query NDCG@k over qrels queries that have a relevant document.

    DCG sums gain/log2(rank+1) over the top k; the ideal ranking reorders
    all judged documents by grade.  Queries absent from the run score 0.
    """
    per_query: dict[str, float] = {}
    for qid, judged in qrels.items():
        grades = sorted(judged.values(), reverse=True)
        if not grades or grades[0] <= 0:
            continue
        ideal = sum(_gain(g, exponential) / math.log2(r + 2)
                    for r, g in enumerate(grades[:k]))
        dcg = sum(_gain(judged.get(did, 0), exponential) / math.log2(r + 2)
                  for r, (did, _) in enumerate(run.get(qid, [])[:k]))
        per_query[qid] = dcg / ideal
    return per_query


def recall_at_k(run: Run, qrels: Qrels, k: int = 100) -> dict[str, float]:
    """Per-query fraction of relevant documents appearing in the top k."""
    per_query: dict[str, float] = {}
    for qid, judged in qrels.items():
        relevant = {did for did, g in judged.items() if g > 0}
        if not relevant:
            continue
        retrieved = {did for did, _ in run.get(qid, [])[:k]}
        per_query[qid] = len(relevant & retrieved) / len(relevant)
    return per_query


@dataclass
class MetricReport:
    ndcg_k: int
    recall_k: int
    ndcg: dict[str, float]
    recall: dict[str, float]
    query_count: int

    @property
    def mean_ndcg(self) -> float:
        return float(np.mean(list(self.ndcg.values()))) if self.ndcg else 0.0

    @property
    def mean_recall(self) -> float:
        return float(np.mean(list(self.recall.values()))) if self.recall else 0.0

    def to_json_dict(self) -> dict:
        return {
            "evaluated_queries": self.query_count,
            "means": {f"ndcg@{self.ndcg_k}": self.mean_ndcg,
                      f"recall@{self.recall_k}": self.mean_recall},
            "per_query": {f"ndcg@{self.ndcg_k}": dict(sorted(self.ndcg.items())),
                          f"recall@{self.recall_k}": dict(sorted(self.recall.items()))},
        }


def evaluate_run(run: Run, qrels: Qrels, ndcg_k: int = 10, recall_k: int = 100,
                 exponential_gain: bool = False) -> MetricReport:
    ndcg = ndcg_at_k(run, qrels, ndcg_k, exponential_gain)
    recall = recall_at_k(run, qrels, recall_k)
    return MetricReport(ndcg_k, recall_k, ndcg, recall, len(ndcg))


def paired_ttest(a, b) -> tuple[float, int, float]:
    """Two-sided paired Student t-test.

    Returns (t, degrees of freedom, p).  The p-value comes from the
    regularized incomplete beta form of the t CDF.  Identical difference
    vectors (zero variance) are rejected.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"paired samples disagree: {a.shape} vs {b.shape}")
    n = a.size
    if n < 2:
        raise DataError("paired t-test needs at least 2 matched scores")
    d = a - b
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        raise DegenerateVarianceError("paired differences have zero variance")
    t = float(np.mean(d) / (sd / math.sqrt(n)))
    df = n - 1
    p = float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    return t, df, p


def bonferroni(p: float, m: int) -> float:
    """Family-wise corrected p-value: m * p, capped at 1."""
    if m < 1:
        raise DataError("comparison count must be >= 1")
    return min(1.0, m * p)


@dataclass
class SignificanceReport:
    metric: str
    mean_a: float
    mean_b: float
    t: float
    df: int
    p_raw: float
    p_corrected: float
    comparisons: int
    significant: bool

    def to_json_dict(self) -> dict:
        return {
            "metric": self.metric, "mean_a": self.mean_a, "mean_b": self.mean_b,
            "t": self.t, "df": self.df, "p_raw": self.p_raw,
            "p_corrected": self.p_corrected, "comparisons": self.comparisons,
            "significant": self.significant,
        }


def compare_runs(run_a: Run, run_b: Run, qrels: Qrels, m: int,
                 ndcg_k: int = 10, recall_k: int = 100,
                 alpha: float = 0.05) -> list[SignificanceReport]:
    """Paired significance of two runs on the queries both of them cover."""
    report_a = evaluate_run(run_a, qrels, ndcg_k, recall_k)
    report_b = evaluate_run(run_b, qrels, ndcg_k, recall_k)
    common = sorted(set(report_a.ndcg) & set(run_a) & set(run_b))
    if len(common) < 2:
        raise DataError("runs share fewer than 2 evaluated queries")

    reports = []
    for name, per_a, per_b in ((f"ndcg@{ndcg_k}", report_a.ndcg, report_b.ndcg),
                               (f"recall@{recall_k}", report_a.recall, report_b.recall)):
        a = np.array([per_a[q] for q in common])
        b = np.array([per_b[q] for q in common])
        try:
            t, df, p = paired_ttest(a, b)
        except DegenerateVarianceError:
            raise DegenerateVarianceError(
                f"paired differences for {name} have zero variance") from None
        corrected = bonferroni(p, m)
        reports.append(SignificanceReport(
            metric=name, mean_a=float(a.mean()), mean_b=float(b.mean()),
            t=t, df=df, p_raw=p, p_corrected=corrected, comparisons=m,
            significant=corrected < alpha))
    return reports
