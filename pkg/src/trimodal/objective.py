"""Cosine-similarity logits and the pairwise symmetric contrastive loss."""

from __future__ import annotations

import itertools
import math

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

MODALITIES = ("text", "image", "audio")
PAIRS = (("text", "image"), ("text", "audio"), ("image", "audio"))
PAIR_TAGS = {("text", "image"): "TI", ("text", "audio"): "TA", ("image", "audio"): "IA"}
MAX_LOG_SCALE = math.log(100.0)
INIT_LOG_SCALE = math.log(1.0 / 0.07)
UNIT_TOL = 1e-9


class LogitScale:
    """One trainable log-temperature per modality pair.

    The effective scale is ``exp(min(log_scale, ln 100))``.
    """

    def __init__(self, init: float = INIT_LOG_SCALE):
        self.log_scales = {tag: Tensor(init, requires_grad=True, name=f"logit_scale.{tag}")
                           for tag in ("TI", "TA", "IA")}

    def parameters(self) -> dict[str, Tensor]:
        return {t.name: t for t in self.log_scales.values()}

    def scale(self, tag: str) -> Tensor:
        return T.exp(T.clamp(self.log_scales[tag], hi=MAX_LOG_SCALE))

    def freeze(self):
        for t in self.log_scales.values():
            t.requires_grad = False
            t.grad = None

    def unfreeze(self):
        for t in self.log_scales.values():
            t.requires_grad = True


def _check_unit_rows(x: Tensor, what: str):
    if x.ndim != 2:
        raise DimensionError(f"{what} must be rank 2, got {x.shape}")
    norms = np.sqrt((x.values ** 2).sum(axis=1))
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ContractError(f"{what} rows are not unit-norm")


def similarity(a: Tensor, b: Tensor, scale) -> Tensor:
    """``scale * a @ b.T`` for unit-norm rows ``a`` [N, d] and ``b`` [M, d]."""
    _check_unit_rows(a, "a")
    _check_unit_rows(b, "b")
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"embedding widths differ: {a.shape} vs {b.shape}")
    logits = T.matmul(a, T.transpose(b))
    if isinstance(scale, Tensor):
        return T.mul(logits, scale)
    return T.scale(logits, float(scale))


def symmetric_ce(S: Tensor) -> Tensor:
    """Mean of row-wise and column-wise cross-entropy with diagonal targets."""
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ContractError(f"symmetric_ce needs a square matrix, got {S.shape}")
    n = S.shape[0]
    eye = Tensor(np.eye(n))
    rows = T.sum(T.mul(T.log_softmax(S), eye))
    cols = T.sum(T.mul(T.log_softmax(T.transpose(S)), eye))
    return T.scale(T.add(rows, cols), -0.5 / n)


def trimodal_loss(embeddings: dict, scales: LogitScale):
    """Sum of :func:`symmetric_ce` over every pair of present modalities.

    ``embeddings`` maps modality name to unit-row [N, d] tensors (missing or
    ``None`` entries are skipped).  Returns ``(loss, {pair_tag: float})``.
    """
    present = {m: e for m, e in embeddings.items() if e is not None}
    unknown = set(present) - set(MODALITIES)
    if unknown:
        raise ContractError(f"unknown modalities {sorted(unknown)}")
    if len(present) < 2:
        raise ContractError("the contrastive loss needs at least two modalities")
    sizes = {e.shape[0] for e in present.values()}
    if len(sizes) != 1:
        raise ContractError(f"modalities disagree on batch size: {sizes}")
    total = None
    breakdown = {}
    for pair in PAIRS:
        if pair[0] not in present or pair[1] not in present:
            continue
        tag = PAIR_TAGS[pair]
        term = symmetric_ce(similarity(present[pair[0]], present[pair[1]], scales.scale(tag)))
        breakdown[tag] = term.item()
        total = term if total is None else T.add(total, term)
    return total, breakdown


def present_pairs(modalities) -> list[str]:
    mods = set(modalities)
    return [PAIR_TAGS[p] for p in itertools.combinations(MODALITIES, 2) if set(p) <= mods]
