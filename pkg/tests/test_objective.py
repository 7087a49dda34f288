import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trimodal import tensor as T
from trimodal.errors import ContractError, DimensionError
from trimodal.objective import (
    INIT_LOG_SCALE,
    MAX_LOG_SCALE,
    LogitScale,
    present_pairs,
    similarity,
    symmetric_ce,
    trimodal_loss,
)
from trimodal.tensor import Tensor, backward


def unit_rows(rng, n, d=6):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _ce_reference(S):
    """Plain numpy cross-entropy, diagonal targets, both directions."""
    def one_way(M):
        m = M.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(M - m).sum(axis=1))
        return np.mean(lse - np.diag(M))
    return 0.5 * (one_way(S) + one_way(S.T))


@pytest.mark.parametrize("n", [2, 4, 8])
def test_collapsed_embeddings_give_pairs_times_ln_n(n):
    e = Tensor(np.tile(np.eye(5)[0], (n, 1)))
    loss, parts = trimodal_loss({"text": e, "image": e, "audio": e}, LogitScale())
    assert loss.item() == pytest.approx(3 * math.log(n), rel=1e-12)
    assert set(parts) == {"TI", "TA", "IA"}


@pytest.mark.parametrize("n", [2, 4, 8])
def test_two_modalities_single_pair(n):
    e = Tensor(np.tile(np.eye(3)[1], (n, 1)))
    loss, parts = trimodal_loss({"text": e, "audio": e, "image": None}, LogitScale())
    assert list(parts) == ["TA"]
    assert loss.item() == pytest.approx(math.log(n))


def test_symmetric_ce_matches_reference(rng):
    S = rng.standard_normal((7, 7)) * 5
    assert symmetric_ce(Tensor(S)).item() == pytest.approx(_ce_reference(S), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 9), st.integers(0, 2 ** 31))
def test_symmetric_ce_transpose_and_permutation_invariant(n, seed):
    rng = np.random.default_rng(seed)
    S = rng.standard_normal((n, n)) * 3
    base = symmetric_ce(Tensor(S)).item()
    assert symmetric_ce(Tensor(S.T)).item() == pytest.approx(base, rel=1e-10)
    perm = rng.permutation(n)
    assert symmetric_ce(Tensor(S[perm][:, perm])).item() == pytest.approx(base, rel=1e-10)


def test_perfect_alignment_drives_loss_down(rng):
    e = unit_rows(rng, 4, 4)
    e = np.linalg.qr(e)[0]  # orthonormal rows
    loss, _ = trimodal_loss({"text": Tensor(e), "audio": Tensor(e)}, LogitScale(MAX_LOG_SCALE))
    # each row: log(1 + 3 e^-100)
    assert loss.item() == pytest.approx(math.log1p(3 * math.exp(-100)), rel=1e-6)


def test_scale_clamped_at_100():
    s = LogitScale(init=10.0)
    assert s.scale("TA").item() == pytest.approx(100.0)
    assert LogitScale().scale("TI").item() == pytest.approx(1 / 0.07)
    assert INIT_LOG_SCALE == pytest.approx(math.log(1 / 0.07))


def test_similarity_rejects_non_unit_rows(rng):
    a = Tensor(unit_rows(rng, 3))
    with pytest.raises(ContractError):
        similarity(a, Tensor(np.ones((3, 6))), 1.0)
    with pytest.raises(DimensionError):
        similarity(a, Tensor(unit_rows(rng, 3, 5)), 1.0)


@pytest.mark.parametrize("embs", [
    {"text": None, "audio": None},
    {"text": "x"},
])
def test_needs_two_modalities(embs, rng):
    e = Tensor(unit_rows(rng, 3))
    embs = {k: (e if v == "x" else v) for k, v in embs.items()}
    with pytest.raises(ContractError):
        trimodal_loss(embs, LogitScale())


def test_batch_size_and_name_checks(rng):
    with pytest.raises(ContractError):
        trimodal_loss({"text": Tensor(unit_rows(rng, 3)), "audio": Tensor(unit_rows(rng, 4))}, LogitScale())
    with pytest.raises(ContractError):
        trimodal_loss({"text": Tensor(unit_rows(rng, 3)), "video": Tensor(unit_rows(rng, 3))}, LogitScale())


def test_frozen_scale_gets_no_gradient(rng):
    scales = LogitScale()
    scales.freeze()
    a = Tensor(unit_rows(rng, 3), requires_grad=True)
    loss, _ = trimodal_loss({"text": a, "image": Tensor(unit_rows(rng, 3))}, scales)
    backward(loss)
    assert all(t.grad is None for t in scales.parameters().values())
    assert a.grad is not None
    scales.unfreeze()
    assert all(t.requires_grad for t in scales.parameters().values())


def test_present_pairs():
    assert present_pairs(["audio", "text"]) == ["TA"]
    assert present_pairs(["text", "image", "audio"]) == ["TI", "TA", "IA"]


def test_scale_gradient_flows_until_clamp(rng):
    a, b = Tensor(unit_rows(rng, 4)), Tensor(unit_rows(rng, 4))
    for init, expect_grad in [(1.0, True), (MAX_LOG_SCALE + 1.0, False)]:
        scales = LogitScale(init)
        loss, _ = trimodal_loss({"image": a, "audio": b}, scales)
        backward(loss)
        g = scales.log_scales["IA"].grad
        assert (abs(g) > 0) == expect_grad
        T.get_tape().clear()
