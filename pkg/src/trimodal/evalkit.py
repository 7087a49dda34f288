"""Zero-shot classification, multi-label mAP and cross-modal querying metrics.

All rankings sort by score descending and break ties by ascending sample id,
so results are reproducible bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, no_grad

UNIT_TOL = 1e-9


@dataclass
class EmbeddingSet:
    """Unit-row embeddings with their sample ids and label sets."""

    embeddings: np.ndarray
    sample_ids: list
    label_sets: list

    def __post_init__(self):
        e = np.asarray(self.embeddings.values if isinstance(self.embeddings, Tensor) else self.embeddings,
                       dtype=np.float64)
        if e.ndim != 2:
            raise DimensionError(f"embeddings must be [M, d], got {e.shape}")
        if len(self.sample_ids) != e.shape[0] or len(self.label_sets) != e.shape[0]:
            raise ContractError("ids / label sets do not match the number of rows")
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise ContractError("sample ids must be unique")
        if e.shape[0] and np.any(np.abs(np.linalg.norm(e, axis=1) - 1.0) > UNIT_TOL):
            raise ContractError("embedding rows must be unit-norm")
        self.embeddings = e
        self.label_sets = [frozenset(s) for s in self.label_sets]

    def __len__(self):
        return self.embeddings.shape[0]


def average_precision(relevant_in_rank_order) -> float:
    """Mean over relevant items of the precision at their rank."""
    rel = np.asarray(relevant_in_rank_order, dtype=bool)
    n_rel = rel.sum()
    if n_rel == 0:
        raise ContractError("average precision needs at least one relevant item")
    hits = np.cumsum(rel)
    ranks = np.arange(1, rel.size + 1)
    return float(np.sum(hits[rel] / ranks[rel]) / n_rel)


def rank_order(scores, tie_keys) -> np.ndarray:
    """Indices sorting ``scores`` descending, ties by ascending ``tie_keys``."""
    return np.lexsort((np.asarray(tie_keys), -np.asarray(scores, dtype=np.float64)))


@dataclass
class ZeroShotResult:
    predictions: list
    accuracy: float
    n_evaluated: int
    n_skipped: int
    similarities: np.ndarray = field(repr=False, default=None)


def zero_shot_classify(samples: EmbeddingSet, class_texts, text_head) -> ZeroShotResult:
    """Predict each sample's class as the most cosine-similar class text.

    ``text_head`` is either a callable head with ``encode_texts`` or a
    precomputed [K, d] matrix of unit-norm class-text embeddings.  Accuracy is
    computed over single-label samples; multi-label samples are predicted but
    counted in ``n_skipped``.
    """
    class_texts = list(class_texts)
    if len(class_texts) < 2:
        raise ContractError("zero-shot classification needs at least two classes")
    if len(set(class_texts)) != len(class_texts):
        raise ContractError("class texts must be distinct")
    if hasattr(text_head, "encode_texts"):
        with no_grad():
            targets = text_head.encode_texts(class_texts).values
    else:
        targets = np.asarray(text_head, dtype=np.float64)
    if targets.shape != (len(class_texts), samples.embeddings.shape[1]):
        raise DimensionError(f"class embeddings {targets.shape} do not fit {samples.embeddings.shape}")
    sims = samples.embeddings @ targets.T
    pred_idx = np.argmax(sims, axis=1)
    predictions = [class_texts[i] for i in pred_idx]
    correct = evaluated = 0
    for pred, labels in zip(predictions, samples.label_sets):
        if len(labels) != 1:
            continue
        (truth,) = labels
        evaluated += 1
        correct += pred == truth
    accuracy = correct / evaluated if evaluated else float("nan")
    return ZeroShotResult(predictions, accuracy, evaluated, len(samples) - evaluated, sims)


def multilabel_map(scores, truth) -> float:
    """Mean over classes of the average precision of the score ranking.

    Classes without any positive are skipped; ties rank the lower row index
    first.
    """
    scores = np.asarray(scores.values if isinstance(scores, Tensor) else scores, dtype=np.float64)
    truth = np.asarray(truth).astype(bool)
    if scores.shape != truth.shape or scores.ndim != 2:
        raise DimensionError(f"scores {scores.shape} vs truth {truth.shape}")
    if not truth.any():
        raise ContractError("truth matrix has no positives")
    ids = np.arange(scores.shape[0])
    aps = [average_precision(truth[rank_order(scores[:, k], ids), k])
           for k in range(scores.shape[1]) if truth[:, k].any()]
    return float(np.mean(aps))


@dataclass
class RetrievalResult:
    """Per-query rankings plus the aggregate P@1, R@1 and mAP."""

    query_ids: list
    rankings: list          # per query: gallery ids, best first
    scores: list            # per query: similarity aligned with rankings
    relevance: list         # per query: bool flags aligned with rankings
    p_at_1: float
    r_at_1: float
    map: float
    n_queries: int
    n_skipped: int

    def report(self, phase: str, dataset: str, direction: str) -> dict:
        return {"phase": phase, "dataset": dataset, "direction": direction,
                "p_at_1": self.p_at_1, "r_at_1": self.r_at_1, "map": self.map,
                "n_queries": self.n_queries, "n_skipped": self.n_skipped}


def cross_modal_query(queries: EmbeddingSet, gallery: EmbeddingSet) -> RetrievalResult:
    """Rank the gallery for each query by cosine similarity.

    A gallery item is relevant iff its label set equals the query's.  Queries
    with no relevant gallery item are excluded from the averages and counted
    in ``n_skipped``.
    """
    if len(gallery) == 0:
        raise ContractError("empty gallery")
    if len(queries) == 0:
        raise ContractError("no queries")
    if queries.embeddings.shape[1] != gallery.embeddings.shape[1]:
        raise DimensionError("query and gallery widths differ")
    sims = queries.embeddings @ gallery.embeddings.T
    gids = list(gallery.sample_ids)
    tie_keys = np.argsort(np.argsort(np.array(gids, dtype=object), kind="stable"), kind="stable")
    res = RetrievalResult([], [], [], [], 0.0, 0.0, 0.0, 0, 0)
    p1 = r1 = ap = 0.0
    for qi, qid in enumerate(queries.sample_ids):
        order = rank_order(sims[qi], tie_keys)
        rel = np.array([gallery.label_sets[j] == queries.label_sets[qi] for j in order])
        res.query_ids.append(qid)
        res.rankings.append([gids[j] for j in order])
        res.scores.append(sims[qi, order])
        res.relevance.append(rel)
        n_rel = int(rel.sum())
        if n_rel == 0:
            res.n_skipped += 1
            continue
        res.n_queries += 1
        p1 += float(rel[0])
        r1 += float(rel[0]) / n_rel
        ap += average_precision(rel)
    if res.n_queries:
        res.p_at_1 = p1 / res.n_queries
        res.r_at_1 = r1 / res.n_queries
        res.map = ap / res.n_queries
    else:
        res.p_at_1 = res.r_at_1 = res.map = float("nan")
    return res


def unique_label_sets(label_sets) -> list:
    """Distinct label sets ordered by their canonical text."""
    seen = {}
    for s in label_sets:
        s = frozenset(s)
        seen.setdefault(", ".join(sorted(s)), s)
    return [seen[k] for k in sorted(seen)]


def build_query_sets(label_sets, modality: str, text_head=None, embeddings: EmbeddingSet | None = None) -> EmbeddingSet:
    """Queries for one modality.

    Text: one query per distinct label set, encoded from its canonical text
    (sorted names joined by ", ").  Audio/image: every sample of
    ``embeddings`` is a query, returned as is.
    """
    if modality == "text":
        if text_head is None:
            raise ContractError("text queries need a text head")
        sets = unique_label_sets(label_sets)
        texts = [", ".join(sorted(s)) for s in sets]
        with no_grad():
            emb = text_head.encode_texts(texts).values
        return EmbeddingSet(emb, texts, sets)
    if modality in ("audio", "image"):
        if embeddings is None:
            raise ContractError(f"{modality} queries need precomputed embeddings")
        return embeddings
    raise ContractError(f"unknown modality {modality!r}")


def write_report(path, report: dict):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
