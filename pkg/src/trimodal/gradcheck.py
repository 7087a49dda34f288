"""Central finite-difference checks of every backward rule.

The suite perturbs each input coordinate by ``+-h`` in float64 and compares
the resulting slope with the tape gradient.  Errors are reported relative to
the largest gradient magnitude of the tensor under test, which keeps tiny
gradient entries from producing meaningless ratios.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .audio import FbspFilterBank, build_filterbank, fbsp_log_power
from .encoders import AudioHead, EncoderConfig, ImageHead, TextHead, tokenize_batch
from .errors import ContractError
from .objective import LogitScale, trimodal_loss
from .tensor import Tensor, backward

DEFAULT_H = 1e-5
OP_TOL = 1e-4
FILTERBANK_TOL = 1e-3


@dataclass
class GradcheckResult:
    """Outcome of one named check."""

    name: str
    max_rel_error: float
    tol: float
    n_checked: int
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tol)

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag} {self.name:<32} rel_err={self.max_rel_error:.2e} tol={self.tol:.0e} n={self.n_checked}"


def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """``max|a - n| / max(max|a|, max|n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ContractError(f"gradient shapes differ: {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    scale = max(np.max(np.abs(a)), np.max(np.abs(n)), floor)
    return float(np.max(np.abs(a - n)) / scale)


def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = DEFAULT_H,
                       coords=None) -> np.ndarray:
    """Central differences of ``f`` with respect to the array ``x``.

    ``x`` is perturbed in place and restored.  When ``coords`` (flat indices)
    is given only those entries are filled; the rest stay zero.
    """
    flat = x.reshape(-1)
    grad = np.zeros(flat.size)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        grad[i] = (up - down) / (2.0 * h)
    return grad.reshape(x.shape)


def check_gradients(fn: Callable[[], Tensor], inputs: dict, h: float = DEFAULT_H,
                    max_coords: int | None = None, rng: np.random.Generator | None = None) -> tuple[float, int]:
    """Compare tape and finite-difference gradients of a scalar ``fn()``.

    Parameters
    ----------
    fn : callable
        Builds the scalar loss from the tensors in ``inputs``.
    inputs : dict of str to Tensor
        Tensors to check; each must have ``requires_grad`` set.
    max_coords : int, optional
        Check at most this many randomly chosen entries per tensor.

    Returns
    -------
    (max relative error, number of coordinates checked)
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs.values():
        t.grad = None
    loss = fn()
    backward(loss)
    analytic = {k: (np.zeros(t.shape) if t.grad is None else t.grad.copy()) for k, t in inputs.items()}

    def value() -> float:
        with T.no_grad():
            return fn().item()

    worst, count = 0.0, 0
    for key, t in inputs.items():
        coords = None
        if max_coords is not None and t.size > max_coords:
            coords = np.sort(rng.choice(t.size, size=max_coords, replace=False))
        num = numerical_gradient(value, t.values, h, coords)
        ana = analytic[key]
        if coords is not None:
            num, ana = num.reshape(-1)[coords], ana.reshape(-1)[coords]
        worst = max(worst, relative_error(ana, num))
        count += num.size
    return worst, count


# -- the suite ---------------------------------------------------------------

def _leaf(rng, shape, lo=-1.0, hi=1.0, away_from=None):
    v = rng.uniform(lo, hi, size=shape)
    if away_from is not None:
        # keep kinks of relu / clamp farther than h away
        for k in np.atleast_1d(away_from):
            near = np.abs(v - k) < 0.05
            v[near] += 0.1
    return Tensor(v, requires_grad=True)


def _op_cases(rng):
    cases = {}

    def case(name, builder, **leaves):
        cases[name] = (builder, leaves)

    a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 4))
    case("add", lambda a, b: T.add(a, b), a=a, b=b)
    case("add.rowwise", lambda a, b: T.add(a, b), a=_leaf(rng, (3, 4)), b=_leaf(rng, (4,)))
    case("sub", lambda a, b: T.sub(a, b), a=_leaf(rng, (3, 4)), b=_leaf(rng, (3, 4)))
    case("mul", lambda a, b: T.mul(a, b), a=_leaf(rng, (3, 4)), b=_leaf(rng, (3, 4)))
    case("mul.keepdims", lambda a, b: T.mul(a, b), a=_leaf(rng, (2, 3, 4)), b=_leaf(rng, (2, 1, 4)))
    case("mul.scalar_tensor", lambda a, b: T.mul(a, b), a=_leaf(rng, (3, 4)), b=_leaf(rng, ()))
    case("scale", lambda x: T.scale(x, -2.5), x=_leaf(rng, (5,)))
    case("exp", T.exp, x=_leaf(rng, (3, 4)))
    case("log", T.log, x=_leaf(rng, (3, 4), 0.5, 2.0))
    case("relu", T.relu, x=_leaf(rng, (4, 5), away_from=0.0))
    case("clamp", lambda x: T.clamp(x, -0.5, 0.5), x=_leaf(rng, (4, 5), away_from=(-0.5, 0.5)))
    case("matmul", T.matmul, a=_leaf(rng, (3, 4)), b=_leaf(rng, (4, 2)))
    case("matmul.batched", T.matmul, a=_leaf(rng, (2, 3, 4)), b=_leaf(rng, (2, 4, 5)))
    case("matmul.shared_rhs", T.matmul, a=_leaf(rng, (2, 3, 4)), b=_leaf(rng, (4, 5)))
    case("transpose", lambda x: T.transpose(x, (2, 0, 1)), x=_leaf(rng, (2, 3, 4)))
    case("reshape", lambda x: T.reshape(x, (4, 6)), x=_leaf(rng, (2, 3, 4)))
    case("concat", lambda a, b: T.concat([a, b], axis=1), a=_leaf(rng, (2, 3)), b=_leaf(rng, (2, 5)))
    ids = rng.integers(0, 6, size=(2, 4))
    case("embedding", lambda w: T.embedding(w, ids), w=_leaf(rng, (6, 3)))
    case("sum.axis", lambda x: T.sum(x, axis=1), x=_leaf(rng, (3, 4, 2)))
    case("mean.keepdims", lambda x: T.mean(x, axis=(0, 2), keepdims=True), x=_leaf(rng, (3, 4, 2)))
    case("softmax", T.softmax, x=_leaf(rng, (3, 5), -2, 2))
    case("log_softmax", T.log_softmax, x=_leaf(rng, (3, 5), -2, 2))
    case("l2_normalize", T.l2_normalize, x=_leaf(rng, (3, 4)))
    targets = (rng.uniform(size=(3, 4)) < 0.5).astype(float)
    case("bce_with_logits", lambda z: T.bce_with_logits(z, targets), z=_leaf(rng, (3, 4), -3, 3))
    case("conv2d", lambda x, w, b: T.conv2d(x, w, b, stride=1, padding=1),
         x=_leaf(rng, (2, 2, 5, 5)), w=_leaf(rng, (3, 2, 3, 3)), b=_leaf(rng, (3,)))
    case("conv2d.stride2", lambda x, w: T.conv2d(x, w, stride=2, padding=(0, 1)),
         x=_leaf(rng, (1, 2, 6, 7)), w=_leaf(rng, (2, 2, 3, 3)))
    return cases


def check_ops(rng=None, h: float = DEFAULT_H) -> list[GradcheckResult]:
    rng = rng or np.random.default_rng(0)
    results = []
    for name, (builder, leaves) in _op_cases(rng).items():
        t0 = time.perf_counter()
        proj_rng = np.random.default_rng(len(name))
        with T.no_grad():
            shape = builder(**leaves).shape
        r = Tensor(proj_rng.standard_normal(shape))

        def fn(builder=builder, leaves=leaves, r=r):
            return T.sum(T.mul(builder(**leaves), r))

        err, n = check_gradients(fn, leaves, h)
        results.append(GradcheckResult(f"op.{name}", err, OP_TOL, n, time.perf_counter() - t0))
    return results


def _small_bank(n_bands=4, sample_rate=8000, kernel_len=63) -> FbspFilterBank:
    return build_filterbank(n_bands, sample_rate, kernel_len)


def check_filterbank(rng=None, h: float = DEFAULT_H) -> list[GradcheckResult]:
    """Both fbsp parameters through the log-power transform."""
    rng = rng or np.random.default_rng(1)
    bank = _small_bank()
    waves = rng.standard_normal((2, 1, 400))
    r = Tensor(rng.standard_normal(fbsp_log_power(waves, bank, 64).shape) * 0.1)
    out = []
    for key in ("fc", "fb"):
        t0 = time.perf_counter()
        leaf = getattr(bank, key)
        err, n = check_gradients(lambda: T.sum(T.mul(fbsp_log_power(waves, bank, 64), r)), {key: leaf}, h)
        out.append(GradcheckResult(f"filterbank.{key}", err, FILTERBANK_TOL, n, time.perf_counter() - t0))
    return out


def tiny_config(**overrides) -> EncoderConfig:
    """A desk-sized encoder configuration fast enough for finite differences."""
    base = dict(embed_dim=6, context_len=8, token_dim=4, n_mix_layers=1, image_size=8,
                image_channels=(3, 4), sample_rate=8000, n_bands=4, kernel_len=63, hop=64,
                target_len=400, audio_channels=(3, 4), n_classes=3)
    base.update(overrides)
    return EncoderConfig(**base)


def _head_check(name, head, forward, rng, h, tol, max_coords):
    t0 = time.perf_counter()
    params = head.parameters()
    with T.no_grad():
        shape = forward().shape
    r = Tensor(rng.standard_normal(shape))
    err, n = check_gradients(lambda: T.sum(T.mul(forward(), r)), params, h, max_coords, rng)
    return GradcheckResult(name, err, tol, n, time.perf_counter() - t0)


def check_heads(rng=None, h: float = DEFAULT_H, max_coords: int = 40) -> list[GradcheckResult]:
    """Every head end-to-end, from its earliest parameter to its output."""
    rng = rng or np.random.default_rng(2)
    cfg = tiny_config()
    text = TextHead(cfg, np.random.default_rng(3))
    ids = tokenize_batch(["abc", "hello there"], text.vocab, cfg.context_len)
    image = ImageHead(cfg, np.random.default_rng(4))
    imgs = rng.uniform(size=(2, 3, cfg.image_size, cfg.image_size))
    audio = AudioHead(cfg, np.random.default_rng(5), mode="embedding")
    logits_head = AudioHead(cfg, np.random.default_rng(6), mode="logits")
    waves = rng.standard_normal((2, 1, cfg.target_len))
    return [
        _head_check("head.text", text, lambda: text(ids), rng, h, OP_TOL, max_coords),
        _head_check("head.image", image, lambda: image(imgs), rng, h, OP_TOL, max_coords),
        _head_check("head.audio.embedding", audio, lambda: audio(waves), rng, h, FILTERBANK_TOL, max_coords),
        _head_check("head.audio.logits", logits_head, lambda: logits_head(waves), rng, h,
                    FILTERBANK_TOL, max_coords),
    ]


def check_loss(rng=None, h: float = DEFAULT_H) -> list[GradcheckResult]:
    """trimodal_loss with respect to raw embeddings and the log-scales."""
    rng = rng or np.random.default_rng(3)
    scales = LogitScale(init=np.log(3.0))
    raw = {m: _leaf(rng, (4, 5)) for m in ("text", "image", "audio")}
    leaves = dict(raw)
    leaves.update(scales.parameters())
    t0 = time.perf_counter()

    def fn():
        emb = {m: T.l2_normalize_rows(x) for m, x in raw.items()}
        return trimodal_loss(emb, scales)[0]

    err, n = check_gradients(fn, leaves, h)
    return [GradcheckResult("loss.trimodal", err, OP_TOL, n, time.perf_counter() - t0)]


SECTIONS = {"ops": check_ops, "filterbank": check_filterbank, "heads": check_heads, "loss": check_loss}


def run_suite(sections=None, h: float = DEFAULT_H) -> list[GradcheckResult]:
    """Run the named sections (all by default) and return every result."""
    sections = list(SECTIONS) if sections is None else list(sections)
    unknown = set(sections) - set(SECTIONS)
    if unknown:
        raise ContractError(f"unknown gradcheck sections {sorted(unknown)}")
    results = []
    for key in sections:
        results.extend(SECTIONS[key](h=h))
    return results
