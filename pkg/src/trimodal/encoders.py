"""Tokenizer and the three modality heads mapping into the shared space."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .audio import FbspFilterBank, build_filterbank, fbsp_log_power
from .errors import ConfigurationError, ContractError, DimensionError
from .tensor import Tensor

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"


class Vocabulary:
    """Character vocabulary: four specials followed by printable ASCII."""

    def __init__(self):
        specials = [PAD, BOS, EOS, UNK]
        chars = [chr(c) for c in range(32, 127)]
        self.tokens = specials + chars
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        self.pad_id = self.index[PAD]
        self.bos_id = self.index[BOS]
        self.eos_id = self.index[EOS]
        self.unk_id = self.index[UNK]

    def __len__(self):
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id_of(self, ch: str) -> int:
        return self.index.get(ch, self.unk_id)


def tokenize(text: str, vocab: Vocabulary, context_len: int = 76) -> np.ndarray:
    """Lower-case ``text`` and map it to ``context_len`` token ids.

    The sequence is ``[BOS] + chars + [EOS]`` hard-clipped at ``context_len``
    (a clipped sequence loses its EOS) and right-padded with PAD.
    """
    ids = [vocab.bos_id] + [vocab.id_of(ch) for ch in text.lower()] + [vocab.eos_id]
    ids = ids[:context_len]
    out = np.full(context_len, vocab.pad_id, dtype=np.int64)
    out[:len(ids)] = ids
    return out


def tokenize_batch(texts, vocab: Vocabulary, context_len: int = 76) -> np.ndarray:
    return np.stack([tokenize(t, vocab, context_len) for t in texts])


@dataclass
class EncoderConfig:
    """Sizes of the three heads; ``embed_dim`` is shared by all of them."""

    embed_dim: int = 64
    context_len: int = 76
    token_dim: int = 32
    n_mix_layers: int = 2
    image_size: int = 32
    image_channels: tuple = (8, 16, 32)
    sample_rate: int = 16000
    n_bands: int = 16
    kernel_len: int = 511
    fbsp_order: int = 2
    hop: int = 256
    target_len: int = 16000
    audio_channels: tuple = (8, 16, 32)
    n_classes: int | None = None
    log_floor: float = -14.0

    def __post_init__(self):
        if self.embed_dim < 1:
            raise ConfigurationError("embed_dim must be positive")


class Head:
    """Named parameter container with a freeze switch."""

    prefix = ""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.frozen = False

    def _add(self, name: str, values) -> Tensor:
        t = Tensor(values, requires_grad=not self.frozen, name=f"{self.prefix}.{name}")
        self._params[name] = t
        return t

    def parameters(self) -> dict[str, Tensor]:
        """Ordered mapping of fully-qualified names to parameter tensors."""
        return {f"{self.prefix}.{k}": v for k, v in self._params.items()}

    def freeze(self):
        self.frozen = True
        for p in self._params.values():
            p.requires_grad = False
            p.grad = None

    def unfreeze(self):
        self.frozen = False
        for p in self._params.values():
            p.requires_grad = True


def _he(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def _lecun(rng, shape, fan_in):
    return rng.standard_normal(shape) / np.sqrt(fan_in)


class TextHead(Head):
    """Token + position embeddings, residual 1-D convolution mixing layers,
    masked mean pooling and a bias-free projection."""

    prefix = "text"

    def __init__(self, config: EncoderConfig, rng: np.random.Generator, vocab: Vocabulary | None = None):
        super().__init__()
        self.vocab = vocab or Vocabulary()
        self.context_len = config.context_len
        d = config.token_dim
        self.token_embedding = self._add("token_embedding", rng.standard_normal((self.vocab.size, d)) * 0.5)
        self.pos_embedding = self._add("pos_embedding", rng.standard_normal((config.context_len, d)) * 0.1)
        self.mix = []
        for i in range(config.n_mix_layers):
            w = self._add(f"mix{i}.weight", _he(rng, (d, d, 1, 3), 3 * d))
            b = self._add(f"mix{i}.bias", np.zeros(d))
            self.mix.append((w, b))
        self.proj = self._add("proj", _lecun(rng, (d, config.embed_dim), d))

    def __call__(self, ids) -> Tensor:
        ids = np.asarray(ids)
        if ids.ndim != 2 or ids.shape[1] != self.context_len:
            raise DimensionError(f"token ids must be [N, {self.context_len}], got {ids.shape}")
        if ids.max(initial=0) >= self.vocab.size or ids.min(initial=0) < 0:
            raise ContractError("token id outside the vocabulary")
        mask = (ids != self.vocab.pad_id).astype(np.float64)
        counts = mask.sum(axis=1, keepdims=True)
        if np.any(counts == 0):
            raise ContractError("all-PAD token sequence")
        n, length = ids.shape
        h = T.add(T.embedding(self.token_embedding, ids), self.pos_embedding)  # [N, L, D]
        d = h.shape[-1]
        pad_mask = Tensor(mask[:, :, None])
        for w, b in self.mix:
            # zero PAD positions so the width-3 kernel cannot read them
            x = T.reshape(T.transpose(T.mul(h, pad_mask), (0, 2, 1)), (n, d, 1, length))
            y = T.relu(T.conv2d(x, w, b, stride=1, padding=(0, 1)))
            h = T.add(h, T.transpose(T.reshape(y, (n, d, length)), (0, 2, 1)))
        pooled = T.sum(T.mul(h, pad_mask), axis=1)  # [N, D]
        pooled = T.mul(pooled, Tensor(1.0 / counts))
        return T.l2_normalize_rows(T.matmul(pooled, self.proj))

    def encode_texts(self, texts) -> Tensor:
        return self(tokenize_batch(texts, self.vocab, self.context_len))


class ImageHead(Head):
    """Stride-2 conv stages followed by single-head QKV attention pooling.

    Convolutions are unpadded, so a spatially constant image yields identical
    features at every position and therefore uniform attention.
    """

    prefix = "image"

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.image_size = config.image_size
        self.convs = []
        c_in = 3
        for i, c_out in enumerate(config.image_channels):
            w = self._add(f"conv{i}.weight", _he(rng, (c_out, c_in, 3, 3), 9 * c_in))
            b = self._add(f"conv{i}.bias", np.zeros(c_out))
            self.convs.append((w, b))
            c_in = c_out
        self.width = c_in
        self.wq = self._add("attn.q", _lecun(rng, (c_in, c_in), c_in))
        self.wk = self._add("attn.k", _lecun(rng, (c_in, c_in), c_in))
        self.wv = self._add("attn.v", _lecun(rng, (c_in, c_in), c_in))
        self.proj = self._add("proj", _lecun(rng, (c_in, config.embed_dim), c_in))
        self.last_attention = None

    def __call__(self, images, return_attention=False):
        x = images if isinstance(images, Tensor) else Tensor(images)
        s = self.image_size
        if x.ndim != 4 or x.shape[1:] != (3, s, s):
            raise DimensionError(f"images must be [N, 3, {s}, {s}], got {x.shape}")
        h = T.sub(x, 0.5)
        for w, b in self.convs:
            h = T.relu(T.conv2d(h, w, b, stride=2, padding=0))
        n, c, hh, ww = h.shape
        feats = T.transpose(T.reshape(h, (n, c, hh * ww)), (0, 2, 1))  # [N, P, C]
        q = T.matmul(T.mean(feats, axis=1), self.wq)  # [N, C]
        k = T.matmul(feats, self.wk)
        v = T.matmul(feats, self.wv)
        scores = T.scale(T.reshape(T.matmul(k, T.reshape(q, (n, c, 1))), (n, hh * ww)), 1.0 / np.sqrt(c))
        attn = T.softmax(scores)  # [N, P]
        pooled = T.reshape(T.matmul(T.reshape(attn, (n, 1, hh * ww)), v), (n, c))
        out = T.l2_normalize_rows(T.matmul(pooled, self.proj))
        self.last_attention = attn.values
        if return_attention:
            return out, attn
        return out


class AudioHead(Head):
    """fbsp front-end, stride-2 conv stages, mean and variance pooling over
    time, and a final layer that is either a class-logit layer or an
    embedding projection."""

    prefix = "audio"

    def __init__(self, config: EncoderConfig, rng: np.random.Generator, mode: str = "embedding"):
        super().__init__()
        self.config = dataclasses.replace(config)
        self.bank: FbspFilterBank = build_filterbank(config.n_bands, config.sample_rate,
                                                     config.kernel_len, config.fbsp_order)
        self.bank.fc.name, self.bank.fb.name = "audio.frontend.fc", "audio.frontend.fb"
        self._params["frontend.fc"] = self.bank.fc
        self._params["frontend.fb"] = self.bank.fb
        self.convs = []
        c_in = 1
        for i, c_out in enumerate(config.audio_channels):
            w = self._add(f"conv{i}.weight", _he(rng, (c_out, c_in, 3, 3), 9 * c_in))
            b = self._add(f"conv{i}.bias", np.zeros(c_out))
            self.convs.append((w, b))
            c_in = c_out
        rows = config.n_bands
        for _ in config.audio_channels:
            rows = (rows - 1) // 2 + 1
        self.width = 2 * c_in * rows
        self.mode = None
        self.replace_final_layer(mode, rng)

    def replace_final_layer(self, mode: str, rng: np.random.Generator, n_classes: int | None = None):
        """Install a freshly initialized final layer for ``mode``.

        Only the final layer's tensors are touched; the front-end and conv
        stages are kept as they are.
        """
        if n_classes is not None:
            self.config.n_classes = n_classes
        for key in ("classifier.weight", "classifier.bias", "proj"):
            self._params.pop(key, None)
        if mode == "logits":
            k = self.config.n_classes
            if not k:
                raise ConfigurationError("logits mode needs a configured class count")
            self.classifier_w = self._add("classifier.weight", _lecun(rng, (self.width, k), self.width))
            self.classifier_b = self._add("classifier.bias", np.zeros(k))
        elif mode == "embedding":
            self.proj = self._add("proj", _lecun(rng, (self.width, self.config.embed_dim), self.width))
        else:
            raise ConfigurationError(f"unknown audio head mode {mode!r}")
        self.mode = mode

    def spectrogram(self, waves) -> Tensor:
        return fbsp_log_power(waves, self.bank, self.config.hop)

    def encode_spectrogram(self, specs, mode: str | None = None) -> Tensor:
        mode = mode or self.mode
        if mode != self.mode:
            raise ConfigurationError(f"head is in {self.mode!r} mode, {mode!r} requested")
        x = specs if isinstance(specs, Tensor) else Tensor(specs)
        if x.ndim != 4 or x.shape[2] != self.config.n_bands:
            raise DimensionError(f"spectrograms must be [N, C, {self.config.n_bands}, F], got {x.shape}")
        if x.shape[1] != 1:
            x = T.mean(x, axis=1, keepdims=True)
        # floor silence and padding so they do not dominate the level estimate
        x = T.clamp(x, lo=self.config.log_floor)
        # per-sample level removal keeps the head insensitive to overall gain
        h = T.sub(x, T.mean(x, axis=(1, 2, 3), keepdims=True))
        for w, b in self.convs:
            h = T.relu(T.conv2d(h, w, b, stride=2, padding=1))
        # mean and variance over time only; the band axis carries pitch
        mu = T.mean(h, axis=3, keepdims=True)
        dev = T.sub(h, mu)
        var = T.mean(T.mul(dev, dev), axis=3, keepdims=True)
        pooled = T.reshape(T.concat([mu, var], axis=3), (h.shape[0], self.width))
        if mode == "logits":
            return T.add(T.matmul(pooled, self.classifier_w), self.classifier_b)
        return T.l2_normalize_rows(T.matmul(pooled, self.proj))

    def __call__(self, waves, mode: str | None = None) -> Tensor:
        return self.encode_spectrogram(self.spectrogram(waves), mode)


def encode_text(tokens, head: TextHead) -> Tensor:
    return head(tokens)


def encode_image(images, head: ImageHead) -> Tensor:
    return head(images)


def encode_audio(specs, head: AudioHead, mode: str = "embedding") -> Tensor:
    """Encode precomputed spectrograms [N, C, bands, frames]."""
    return head.encode_spectrogram(specs, mode)
