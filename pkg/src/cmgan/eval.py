"""Cosine-ranked cross-modal retrieval scored by mean average precision."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, UndefinedAPError, UndefinedSimilarityError

TABLE_COLUMNS = ("Image→Text", "Text→Image", "Average", "Image→All", "Text→All", "Average")
REPORT_FIELDS = ("map_i2t", "map_t2i", "map_bi_avg", "map_i2all", "map_t2all", "map_all_avg")


class DegenerateTestsetWarning(UserWarning):
    """Every candidate is relevant, so MAP is 1.0 by construction."""


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: {a.size} vs {b.size}")
    ua, za = _normalize_rows(a[None, :])
    ub, zb = _normalize_rows(b[None, :])
    if za or zb:
        raise UndefinedSimilarityError("cosine similarity is undefined for a zero vector")
    return float(np.clip(ua[0] @ ub[0], -1.0, 1.0))


def _normalize_rows(x: np.ndarray) -> tuple[np.ndarray, int]:
    """Unit-norm rows; zero rows stay zero (similarity 0 to everything)."""
    x = np.asarray(x, dtype=np.float64)
    # rescale by the largest entry first so tiny rows do not underflow to zero norm
    peak = np.max(np.abs(x), axis=1) if x.size else np.zeros(x.shape[0])
    zero = peak == 0
    x = x / np.where(zero, 1.0, peak)[:, None]
    norms = np.linalg.norm(x, axis=1)
    out = x / np.where(zero, 1.0, norms)[:, None]
    return out, int(zero.sum())


def similarity_matrix(queries: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    q, _ = _normalize_rows(queries)
    c, _ = _normalize_rows(candidates)
    if q.shape[1] != c.shape[1]:
        raise ShapeError(f"dimension mismatch: queries {q.shape[1]}, candidates {c.shape[1]}")
    return q @ c.T


def rank_order(sims: np.ndarray, ids: np.ndarray | None = None) -> np.ndarray:
    """Positions sorted by descending similarity, ties by ascending id."""
    sims = np.asarray(sims, dtype=np.float64)
    if ids is None:
        ids = np.arange(sims.size)
    return np.lexsort((ids, -sims))


@dataclass
class RankedList:
    query_id: int
    candidates: np.ndarray
    relevant: np.ndarray

    @property
    def n_relevant(self) -> int:
        return int(np.count_nonzero(self.relevant))


def average_precision(rel, n_relevant: int | None = None) -> float:
    """AP of one ranked list: ``(1/R) * sum_k (R_k / k) * rel_k``."""
    rel = np.asarray(rel, dtype=bool)
    hits = np.count_nonzero(rel)
    R = hits if n_relevant is None else int(n_relevant)
    if R == 0:
        raise UndefinedAPError("average precision is undefined with no relevant items")
    if hits != R:
        raise ValueError(f"relevance list holds {hits} relevant items but R={R}")
    ranks = np.flatnonzero(rel) + 1
    # R_k at the j-th relevant position is j; only rel_k = 1 terms survive.
    return math.fsum((np.arange(1, R + 1) / ranks).tolist()) / R


@dataclass
class MapResult:
    value: float
    n_queries: int
    n_skipped: int
    per_query: np.ndarray = field(repr=False, default=None)


def map_with_diagnostics(ranked) -> MapResult:
    aps, skipped = [], 0
    for r in ranked:
        rel = r.relevant if isinstance(r, RankedList) else r
        try:
            aps.append(average_precision(rel))
        except UndefinedAPError:
            skipped += 1
    if not aps:
        raise UndefinedAPError(f"no valid queries ({skipped} skipped with R=0)")
    return MapResult(math.fsum(aps) / len(aps), len(aps), skipped, np.asarray(aps))


def map_score(ranked) -> float:
    """Mean AP over queries that have at least one relevant candidate."""
    return map_with_diagnostics(ranked).value


def rank_queries(queries, q_labels, candidates, c_labels, exclude=None) -> list[RankedList]:
    """Rank every candidate for every query by cosine similarity.

    ``exclude[q]`` (if given and >= 0) is a candidate index removed from
    query ``q``'s pool.
    """
    q_labels = np.asarray(q_labels)
    c_labels = np.asarray(c_labels)
    sims = similarity_matrix(queries, candidates)
    ids = np.arange(c_labels.size)
    out = []
    for q in range(sims.shape[0]):
        row, cand = sims[q], ids
        if exclude is not None and exclude[q] >= 0:
            keep = ids != exclude[q]
            row, cand = row[keep], ids[keep]
        order = cand[rank_order(row, cand)]
        out.append(RankedList(q, order, c_labels[order] == q_labels[q]))
    return out


@dataclass
class TaskResult:
    map: float
    per_query: np.ndarray
    query_labels: np.ndarray
    n_skipped: int

    def per_category(self, n_classes: int) -> np.ndarray:
        out = np.full(n_classes, np.nan)
        for c in range(n_classes):
            sel = self.query_labels == c
            if sel.any():
                vals = self.per_query[sel]
                vals = vals[~np.isnan(vals)]
                if vals.size:
                    out[c] = math.fsum(vals.tolist()) / vals.size
        return out


def _task(queries, q_labels, candidates, c_labels, exclude=None) -> TaskResult:
    q_labels = np.asarray(q_labels)
    ranked = rank_queries(queries, q_labels, candidates, c_labels, exclude)
    if len(ranked) and all(r.relevant.all() for r in ranked):
        warnings.warn("single-category test set: every candidate is relevant, MAP is trivially 1.0",
                      DegenerateTestsetWarning, stacklevel=3)
    per_query = np.full(len(ranked), np.nan)
    for r in ranked:
        try:
            per_query[r.query_id] = average_precision(r.relevant)
        except UndefinedAPError:
            pass
    valid = per_query[~np.isnan(per_query)]
    if valid.size == 0:
        raise UndefinedAPError(f"no valid queries among {len(ranked)}")
    return TaskResult(math.fsum(valid.tolist()) / valid.size, per_query, q_labels, len(ranked) - valid.size)


def bimodal_map(s_img, s_txt, labels) -> tuple[TaskResult, TaskResult]:
    """Image→text and text→image over common representations."""
    labels = np.asarray(labels)
    return _task(s_img, labels, s_txt, labels), _task(s_txt, labels, s_img, labels)


def allmodal_map(s_img, s_txt, labels, exclude_self: bool = True) -> tuple[TaskResult, TaskResult]:
    """Image→all and text→all over the pooled ``2n`` representations.

    The query itself is removed from its pool when ``exclude_self``; its
    cross-modal partner is kept.
    """
    labels = np.asarray(labels)
    n = labels.size
    pool = np.vstack([np.asarray(s_img, np.float64), np.asarray(s_txt, np.float64)])
    pool_labels = np.concatenate([labels, labels])
    ex_img = np.arange(n) if exclude_self else None
    ex_txt = np.arange(n, 2 * n) if exclude_self else None
    return (_task(s_img, labels, pool, pool_labels, ex_img),
            _task(s_txt, labels, pool, pool_labels, ex_txt))


def _encode_testset(model, testset):
    from .model import encode

    return encode(model, "image", testset.image), encode(model, "text", testset.text)


def bimodal_retrieval(model, testset) -> tuple[float, float]:
    s_img, s_txt = _encode_testset(model, testset)
    i2t, t2i = bimodal_map(s_img, s_txt, testset.labels)
    return i2t.map, t2i.map


def allmodal_retrieval(model, testset, exclude_self: bool = True) -> tuple[float, float]:
    s_img, s_txt = _encode_testset(model, testset)
    i2a, t2a = allmodal_map(s_img, s_txt, testset.labels, exclude_self)
    return i2a.map, t2a.map


@dataclass
class RetrievalReport:
    map_i2t: float
    map_t2i: float
    map_i2all: float
    map_t2all: float
    skipped_queries: int = 0
    category_names: tuple[str, ...] = ()
    per_category: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def map_bi_avg(self) -> float:
        return (self.map_i2t + self.map_t2i) / 2

    @property
    def map_all_avg(self) -> float:
        return (self.map_i2all + self.map_t2all) / 2

    def values(self) -> tuple[float, ...]:
        return tuple(getattr(self, f) for f in REPORT_FIELDS)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_FIELDS + ("skipped_queries",))
        w.writerow([f"{v:.6f}" for v in self.values()] + [self.skipped_queries])
        return buf.getvalue()

    def to_markdown(self, title: str = "cmgan") -> str:
        lines = [
            f"**{title}** (bi-modal: first three columns; all-modal: last three)",
            "",
            "| " + " | ".join(TABLE_COLUMNS) + " |",
            "|" + "|".join("---" for _ in TABLE_COLUMNS) + "|",
            "| " + " | ".join(f"{v:.3f}" for v in self.values()) + " |",
        ]
        return "\n".join(lines) + "\n"

    def per_category_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        tasks = ("i2t", "t2i", "i2all", "t2all")
        w.writerow(("category",) + tasks)
        for c, name in enumerate(self.category_names):
            row = [name]
            for t in tasks:
                v = self.per_category[t][c]
                row.append("" if np.isnan(v) else f"{v:.6f}")
            w.writerow(row)
        return buf.getvalue()


def evaluate(model, testset, exclude_self: bool = True) -> RetrievalReport:
    """Full bi-modal and all-modal report on ``testset`` (inference mode)."""
    s_img, s_txt = _encode_testset(model, testset)
    return evaluate_representations(s_img, s_txt, testset.labels, testset.category_names, exclude_self)


def evaluate_representations(s_img, s_txt, labels, category_names=(), exclude_self=True) -> RetrievalReport:
    labels = np.asarray(labels)
    i2t, t2i = bimodal_map(s_img, s_txt, labels)
    i2a, t2a = allmodal_map(s_img, s_txt, labels, exclude_self)
    names = tuple(category_names) or tuple(f"class{c}" for c in range(int(labels.max()) + 1))
    per_cat = {k: r.per_category(len(names)) for k, r in
               (("i2t", i2t), ("t2i", t2i), ("i2all", i2a), ("t2all", t2a))}
    return RetrievalReport(
        map_i2t=i2t.map, map_t2i=t2i.map, map_i2all=i2a.map, map_t2all=t2a.map,
        skipped_queries=i2t.n_skipped + t2i.n_skipped + i2a.n_skipped + t2a.n_skipped,
        category_names=names, per_category=per_cat,
    )


def chance_map(q_labels, c_labels, n_shuffles: int = 50, seed: int = 0, exclude=None) -> float:
    """Permutation oracle: mean MAP of uniformly random rankings.

    Each shuffle draws an independent random order of the candidates for
    every query; the mean over ``n_shuffles`` estimates the chance level.
    """
    q_labels = np.asarray(q_labels)
    c_labels = np.asarray(c_labels)
    rng = np.random.Generator(np.random.PCG64(seed))
    ids = np.arange(c_labels.size)
    totals = []
    for _ in range(n_shuffles):
        aps = []
        for q, lab in enumerate(q_labels):
            cand = ids if exclude is None or exclude[q] < 0 else ids[ids != exclude[q]]
            rel = c_labels[rng.permutation(cand)] == lab
            if rel.any():
                aps.append(average_precision(rel))
        totals.append(math.fsum(aps) / len(aps))
    return math.fsum(totals) / len(totals)


def bimodal_chance(labels, n_shuffles: int = 50, seed: int = 0) -> float:
    return chance_map(labels, labels, n_shuffles, seed)
