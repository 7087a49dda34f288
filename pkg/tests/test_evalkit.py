import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trimodal.errors import ContractError, DimensionError
from trimodal.evalkit import (
    EmbeddingSet,
    average_precision,
    build_query_sets,
    cross_modal_query,
    multilabel_map,
    rank_order,
    unique_label_sets,
    write_report,
    zero_shot_classify,
)


def unit(rng, n, d=4):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@pytest.mark.parametrize("rel,want", [
    ([1, 0, 1], 5 / 6),
    ([0, 1], 0.5),
    ([1, 1, 1], 1.0),
    ([0, 0, 0, 1], 0.25),
])
def test_average_precision_oracle(rel, want):
    assert average_precision(rel) == pytest.approx(want)


def test_average_precision_needs_a_positive():
    with pytest.raises(ContractError):
        average_precision([0, 0])


def test_rank_order_breaks_ties_by_key():
    np.testing.assert_array_equal(rank_order([0.5, 0.9, 0.5, 0.9], [3, 2, 1, 0]), [3, 1, 2, 0])


def test_multilabel_map_oracle():
    scores = np.array([[0.9, 0.1], [0.8, 0.7], [0.3, 0.2]])
    truth = np.array([[1, 0], [0, 0], [1, 1]])
    # class 0: rank [0, 1, 2] rel [1,0,1] -> 5/6; class 1: rank [1, 2, 0] rel [0,1,0] -> 1/2
    assert multilabel_map(scores, truth) == pytest.approx((5 / 6 + 0.5) / 2)


def test_multilabel_map_skips_empty_class_and_checks_shape():
    assert multilabel_map(np.array([[1.0, 0.0]]), np.array([[1, 0]])) == 1.0
    with pytest.raises(DimensionError):
        multilabel_map(np.zeros((2, 2)), np.zeros((2, 3)))


class TestEmbeddingSet:
    def test_validation(self, rng):
        e = unit(rng, 3)
        with pytest.raises(ContractError):
            EmbeddingSet(e * 2, [0, 1, 2], [{"a"}] * 3)
        with pytest.raises(ContractError):
            EmbeddingSet(e, [0, 0, 1], [{"a"}] * 3)
        with pytest.raises(ContractError):
            EmbeddingSet(e, [0, 1], [{"a"}] * 2)
        with pytest.raises(DimensionError):
            EmbeddingSet(e[0], [0], [{"a"}])


def test_zero_shot_counts_and_skips():
    emb = np.eye(3)[[0, 1, 2, 0]]
    s = EmbeddingSet(emb, ["a", "b", "c", "d"], [{"x"}, {"y"}, {"x"}, {"x", "y"}])
    res = zero_shot_classify(s, ["x", "y", "z"], np.eye(3))
    assert res.predictions == ["x", "y", "z", "x"]
    assert res.accuracy == pytest.approx(2 / 3)
    assert (res.n_evaluated, res.n_skipped) == (3, 1)


@pytest.mark.parametrize("texts", [["x"], ["x", "x"]])
def test_zero_shot_class_list_checks(texts):
    s = EmbeddingSet(np.eye(2), [0, 1], [{"x"}, {"x"}])
    with pytest.raises(ContractError):
        zero_shot_classify(s, texts, np.eye(2)[: len(texts)])


def test_retrieval_oracle():
    q = EmbeddingSet(np.array([[1.0, 0.0]]), ["q"], [{"a"}])
    g = EmbeddingSet(np.array([[1.0, 0.0], [0.6, 0.8]]), ["g1", "g2"], [{"b"}, {"a"}])
    res = cross_modal_query(q, g)
    assert res.rankings == [["g1", "g2"]]
    assert (res.p_at_1, res.r_at_1, res.map) == (0.0, 0.0, 0.5)
    rep = res.report("full", "eval", "text>audio")
    assert rep["map"] == 0.5 and rep["n_queries"] == 1


def test_retrieval_skips_queries_without_relevant_items():
    q = EmbeddingSet(np.eye(2), ["q1", "q2"], [{"a"}, {"zzz"}])
    g = EmbeddingSet(np.eye(2), ["g1", "g2"], [{"a"}, {"b"}])
    res = cross_modal_query(q, g)
    assert (res.n_queries, res.n_skipped, res.map) == (1, 1, 1.0)


def _brute_force(qe, ql, ge, gids, gl):
    """Reference ranking by explicit sort on (-score, id)."""
    aps, p1 = [], []
    for i in range(len(qe)):
        items = sorted(range(len(ge)), key=lambda j: (-float(qe[i] @ ge[j]), gids[j]))
        rel = [gl[j] == ql[i] for j in items]
        if not any(rel):
            continue
        hits = 0
        prec = []
        for r, flag in enumerate(rel, 1):
            if flag:
                hits += 1
                prec.append(hits / r)
        aps.append(np.mean(prec))
        p1.append(float(rel[0]))
    return np.mean(aps), np.mean(p1)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_retrieval_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    nq, ng = rng.integers(1, 5), rng.integers(1, 9)
    labels = [frozenset(rng.choice(["a", "b", "c"], size=rng.integers(1, 3), replace=False)) for _ in range(ng)]
    # quantized embeddings make exact ties common
    ge = rng.integers(-1, 2, size=(ng, 3)).astype(float) + np.array([0, 0, 0.5])
    ge /= np.linalg.norm(ge, axis=1, keepdims=True)
    qe = unit(rng, nq, 3)
    ql = [labels[rng.integers(ng)] for _ in range(nq)]
    gids = [f"s{int(i):03d}" for i in rng.permutation(ng)]
    res = cross_modal_query(EmbeddingSet(qe, list(range(nq)), ql), EmbeddingSet(ge, gids, labels))
    want_map, want_p1 = _brute_force(qe, ql, ge, gids, labels)
    assert res.map == pytest.approx(want_map)
    assert res.p_at_1 == pytest.approx(want_p1)


def test_unique_label_sets_sorted_by_text():
    sets = unique_label_sets([{"b"}, {"a", "c"}, {"b"}, {"a"}])
    assert sets == [frozenset({"a"}), frozenset({"a", "c"}), frozenset({"b"})]


def test_build_query_sets_contracts(rng):
    with pytest.raises(ContractError):
        build_query_sets([{"a"}], "text")
    with pytest.raises(ContractError):
        build_query_sets([{"a"}], "audio")
    e = EmbeddingSet(unit(rng, 1), [0], [{"a"}])
    assert build_query_sets([{"a"}], "image", embeddings=e) is e
    with pytest.raises(ContractError):
        build_query_sets([{"a"}], "smell", embeddings=e)


def test_write_report(tmp_path):
    write_report(tmp_path / "r.json", {"b": 1, "a": 0.5})
    assert json.loads((tmp_path / "r.json").read_text()) == {"a": 0.5, "b": 1}
