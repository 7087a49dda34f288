"""The three heads plus per-pair logit scales, and batch-wise embedding."""

from __future__ import annotations

import dataclasses

import numpy as np

from .audio import AugmentConfig, Waveform, augment_crop_pad
from .datakit import TriModalDataset, assemble_batch
from .encoders import AudioHead, EncoderConfig, ImageHead, TextHead
from .errors import ContractError
from .evalkit import EmbeddingSet
from .objective import LogitScale
from .tensor import Tensor, no_grad


class TriModalModel:
    """Text, image and audio heads sharing one embedding width."""

    def __init__(self, config: EncoderConfig, seed: int = 0, audio_mode: str = "embedding"):
        self.config = config
        rng = np.random.default_rng([seed, 7])
        self.text = TextHead(config, rng)
        self.image = ImageHead(config, rng)
        self.audio = AudioHead(config, rng, mode=audio_mode)
        self.scales = LogitScale()

    @property
    def heads(self) -> dict:
        return {"text": self.text, "image": self.image, "audio": self.audio}

    def parameters(self) -> dict[str, Tensor]:
        """Every head tensor by qualified name (logit scales excluded)."""
        params = {}
        for head in self.heads.values():
            params.update(head.parameters())
        return params

    def set_trainable(self, heads, scales: bool):
        for name, head in self.heads.items():
            if name in heads:
                head.unfreeze()
            else:
                head.freeze()
        if scales:
            self.scales.unfreeze()
        else:
            self.scales.freeze()

    def trainable_parameters(self) -> dict[str, Tensor]:
        params = {k: v for k, v in self.parameters().items() if v.requires_grad}
        params.update({k: v for k, v in self.scales.parameters().items() if v.requires_grad})
        return params

    def encode_batch(self, batch, modalities, audio_mode: str = "embedding") -> dict:
        """Forward pass of every requested head on an assembled batch."""
        out = {}
        if "text" in modalities:
            out["text"] = self.text(batch.tokens)
        if "image" in modalities:
            out["image"] = self.image(batch.images)
        if "audio" in modalities:
            if batch.specs is not None:
                out["audio"] = self.audio.encode_spectrogram(batch.specs, audio_mode)
            else:
                out["audio"] = self.audio(batch.waves, audio_mode)
        return out


def embed_dataset(model: TriModalModel, dataset: TriModalDataset, modality: str,
                  batch_size: int = 64) -> EmbeddingSet:
    """Eval-mode embeddings of every sample for one modality."""
    if modality not in ("audio", "image", "text"):
        raise ContractError(f"unknown modality {modality!r}")
    if model.audio.mode != "embedding" and modality == "audio":
        raise ContractError("audio head is in logits mode; no embeddings available")
    aug = AugmentConfig(target_len=model.config.target_len)
    rows = []
    samples = list(dataset.samples)
    with no_grad():
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo:lo + batch_size]
            batch = assemble_batch(chunk, {modality}, "eval", aug, model.config, dataset=dataset,
                                   bank=model.audio.bank if modality == "audio" else None,
                                   vocab=model.text.vocab)
            rows.append(model.encode_batch(batch, {modality})[modality].values)
    return EmbeddingSet(np.concatenate(rows), [s.id for s in samples], [s.labels for s in samples])


def embed_waveforms(model: TriModalModel, waves: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode audio outputs for raw clips [N, C, T] at the model's sample rate.

    Clips are center-cropped or padded to ``target_len`` first.  Returns
    embeddings, or class logits when the head is in logits mode.
    """
    cfg = model.config
    fixed = np.stack([augment_crop_pad(Waveform(w, cfg.sample_rate), cfg.target_len, "center").samples
                      for w in waves])
    rows = []
    with no_grad():
        for lo in range(0, len(fixed), batch_size):
            rows.append(model.audio(fixed[lo:lo + batch_size]).values)
    return np.concatenate(rows)


def audio_logits(model: TriModalModel, dataset: TriModalDataset, batch_size: int = 64) -> np.ndarray:
    """Eval-mode class logits [M, K] from a logits-mode audio head."""
    aug = AugmentConfig(target_len=model.config.target_len)
    rows = []
    with no_grad():
        for lo in range(0, len(dataset), batch_size):
            chunk = dataset.samples[lo:lo + batch_size]
            batch = assemble_batch(chunk, {"audio"}, "eval", aug, model.config, dataset=dataset,
                                   bank=model.audio.bank)
            rows.append(model.audio.encode_spectrogram(batch.specs, "logits").values)
    return np.concatenate(rows)


def encoder_config_to_dict(config: EncoderConfig) -> dict:
    d = dataclasses.asdict(config)
    d["image_channels"] = list(config.image_channels)
    d["audio_channels"] = list(config.audio_channels)
    return d


def encoder_config_from_dict(d: dict) -> EncoderConfig:
    d = dict(d)
    d["image_channels"] = tuple(d["image_channels"])
    d["audio_channels"] = tuple(d["audio_channels"])
    return EncoderConfig(**d)
