"""Staged training (standalone -> cooperative -> full -> finetune) and
checkpointing.

Checkpoint file layout (all integers little-endian u64, floats f64 LE)::

    b"ACLP1"
    str  phase                       str := u64 byte length + UTF-8 bytes
    u64  epoch                       completed epochs of that phase
    u64  n; n x tensor               tensor := str name, u64 ndim, ndim x u64, values
    u64  n; n x tensor               optimizer velocities
    u64  n; n x (str tag, f64)       log logit scales
    str  rng state (JSON)
    str  config snapshot (JSON)
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .audio import AugmentConfig
from .datakit import TriModalDataset, assemble_batch
from .encoders import EncoderConfig
from .errors import CheckpointFormatError, ConfigurationError, ContractError, DataError, NumericalError
from .evalkit import multilabel_map
from .model import TriModalModel, encoder_config_from_dict, encoder_config_to_dict
from .objective import trimodal_loss
from .optim import NesterovSGD, lr_at_epoch

MAGIC = b"ACLP1"
PHASES = ("standalone", "cooperative", "full", "finetune")
PHASE_DEFAULTS = {
    "standalone": {"eta0": 1e-4, "gamma": 0.95, "epochs": 30},
    "cooperative": {"eta0": 1e-4, "gamma": 0.95, "epochs": 30},
    "full": {"eta0": 1e-4, "gamma": 0.95, "epochs": 30},
    "finetune": {"eta0": 5e-5, "gamma": 0.98, "epochs": 50},
}
PREDECESSORS = {
    "standalone": (),
    "cooperative": ("standalone",),
    "full": ("cooperative",),
    "finetune": ("full", "cooperative"),
}


# -- configuration -----------------------------------------------------------

@dataclass
class TrainingConfig:
    """Hyper-parameters of one phase.

    ``eta0``, ``gamma`` and ``epochs`` left as ``None`` take the phase
    defaults.  ``embed_dim``, ``n_bands`` and ``target_len`` only shape a
    freshly built model (standalone phase); later phases inherit the
    architecture stored in their input checkpoint.
    """

    phase: str = "standalone"
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 5e-4
    eta0: float | None = None
    gamma: float | None = None
    epochs: int | None = None
    seed: int = 0
    embed_dim: int = 64
    n_bands: int = 16
    target_len: int = 16000
    p_invert: float = 0.5
    p_noise: float = 0.25
    snr_db_min: float = 10.0
    snr_db_max: float = 120.0
    scale_exp_min: float = -1.5
    scale_exp_max: float = 1.5

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigurationError(f"unknown phase {self.phase!r}; expected one of {PHASES}")
        for key, value in PHASE_DEFAULTS[self.phase].items():
            if getattr(self, key) is None:
                setattr(self, key, value)
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2 for a contrastive batch")
        if self.eta0 <= 0 or not 0 < self.gamma <= 1:
            raise ConfigurationError("need eta0 > 0 and 0 < gamma <= 1")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        self.augment_config()

    @classmethod
    def keys(cls) -> tuple:
        return tuple(f.name for f in dataclasses.fields(cls))

    @classmethod
    def from_text(cls, text: str, phase: str | None = None) -> "TrainingConfig":
        """Parse ``key=value`` lines; blank lines and ``#`` comments are ignored."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigurationError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in types:
                raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
            try:
                if key == "phase":
                    values[key] = value
                elif "int" in types[key]:
                    values[key] = int(value)
                else:
                    values[key] = float(value)
            except ValueError as exc:
                raise ConfigurationError(f"line {lineno}: bad value for {key}: {value!r}") from exc
        if phase is not None:
            if values.setdefault("phase", phase) != phase:
                raise ConfigurationError(f"config is for phase {values['phase']!r}, not {phase!r}")
        return cls(**values)

    @classmethod
    def from_file(cls, path, phase: str | None = None) -> "TrainingConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except FileNotFoundError as exc:
            raise ConfigurationError(f"{path}: config file not found") from exc
        return cls.from_text(text, phase)

    def to_text(self) -> str:
        return "".join(f"{k}={getattr(self, k)}\n" for k in self.keys())

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def augment_config(self, target_len: int | None = None) -> AugmentConfig:
        return AugmentConfig(scale_exponent_range=(self.scale_exp_min, self.scale_exp_max),
                             p_invert=self.p_invert, p_noise=self.p_noise,
                             snr_db_range=(self.snr_db_min, self.snr_db_max),
                             target_len=target_len or self.target_len)


# -- checkpoint --------------------------------------------------------------

@dataclass
class Checkpoint:
    """Everything needed to rebuild a model and resume its training phase."""

    phase: str
    epoch: int
    params: dict
    velocities: dict = field(default_factory=dict)
    logit_scales: dict = field(default_factory=dict)
    rng_state: str = "{}"
    config_snapshot: str = "{}"

    @property
    def snapshot(self) -> dict:
        return json.loads(self.config_snapshot)

    @property
    def training_config(self) -> TrainingConfig:
        return TrainingConfig(**self.snapshot["training"])

    @property
    def complete(self) -> bool:
        return self.epoch >= self.snapshot["training"]["epochs"]

    def to_bytes(self) -> bytes:
        out = bytearray(MAGIC)

        def put_str(s):
            b = s.encode("utf-8")
            out.extend(struct.pack("<Q", len(b)))
            out.extend(b)

        def put_tensors(d):
            out.extend(struct.pack("<Q", len(d)))
            for name, arr in d.items():
                arr = np.asarray(arr, dtype="<f8")
                put_str(name)
                out.extend(struct.pack("<Q", arr.ndim))
                out.extend(struct.pack(f"<{arr.ndim}Q", *arr.shape))
                out.extend(np.ascontiguousarray(arr).tobytes())

        put_str(self.phase)
        out.extend(struct.pack("<Q", self.epoch))
        put_tensors(self.params)
        put_tensors(self.velocities)
        out.extend(struct.pack("<Q", len(self.logit_scales)))
        for tag, value in self.logit_scales.items():
            put_str(tag)
            out.extend(struct.pack("<d", value))
        put_str(self.rng_state)
        put_str(self.config_snapshot)
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        reader = _Reader(data)
        if reader.take(len(MAGIC), "magic") != MAGIC:
            raise CheckpointFormatError("bad magic, not an ACLP1 checkpoint", 0)
        phase = reader.string("phase")
        if phase not in PHASES:
            raise CheckpointFormatError(f"unknown phase tag {phase!r}", reader.pos)
        epoch = reader.u64("epoch")
        params = reader.tensors("parameters")
        velocities = reader.tensors("velocities")
        scales = {}
        for _ in range(reader.u64("logit scale count")):
            tag = reader.string("logit scale tag")
            scales[tag] = struct.unpack("<d", reader.take(8, "logit scale"))[0]
        rng_state = reader.string("rng state")
        snapshot = reader.string("config snapshot")
        if reader.pos != len(data):
            raise CheckpointFormatError("trailing bytes after checkpoint", reader.pos)
        for what, text in (("rng state", rng_state), ("config snapshot", snapshot)):
            try:
                json.loads(text)
            except json.JSONDecodeError as exc:
                raise CheckpointFormatError(f"{what} is not valid JSON", reader.pos) from exc
        return cls(phase, epoch, params, velocities, scales, rng_state, snapshot)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(f"truncated while reading {what}", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def string(self, what: str) -> str:
        start = self.pos
        n = self.u64(what)
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"{what} is not UTF-8", start) from exc

    def tensors(self, what: str) -> dict:
        out = {}
        for _ in range(self.u64(f"{what} count")):
            name = self.string(f"{what} name")
            ndim = self.u64(f"{name} rank")
            if ndim > 8:
                raise CheckpointFormatError(f"implausible rank {ndim} for {name}", self.pos)
            shape = struct.unpack(f"<{ndim}Q", self.take(8 * ndim, f"{name} shape"))
            count = int(np.prod(shape)) if ndim else 1
            raw = self.take(8 * count, f"{name} values")
            out[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
        return out


def save_checkpoint(ckpt: Checkpoint, path):
    """Write atomically: temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(ckpt.to_bytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"{path}: checkpoint not found") from exc
    return Checkpoint.from_bytes(data)


def _snapshot(model: TriModalModel, config: TrainingConfig, classes) -> str:
    return json.dumps({
        "training": config.to_dict(),
        "encoder": encoder_config_to_dict(model.audio.config),
        "audio_mode": model.audio.mode,
        "classes": list(classes or []),
    }, sort_keys=True)


def checkpoint_from_model(model: TriModalModel, phase: str, epoch: int, config: TrainingConfig,
                          optimizer: NesterovSGD | None = None, rng: np.random.Generator | None = None,
                          classes=None) -> Checkpoint:
    params = {name: p.values.copy() for name, p in model.parameters().items()}
    velocities = {} if optimizer is None else {k: v.copy() for k, v in optimizer.state.velocities.items()}
    scales = {tag: t.item() for tag, t in model.scales.log_scales.items()}
    rng_state = "{}" if rng is None else json.dumps(rng.bit_generator.state, sort_keys=True)
    return Checkpoint(phase, epoch, params, velocities, scales, rng_state,
                      _snapshot(model, config, classes))


def model_from_checkpoint(ckpt: Checkpoint) -> TriModalModel:
    snap = ckpt.snapshot
    enc = encoder_config_from_dict(snap["encoder"])
    model = TriModalModel(enc, seed=snap["training"]["seed"], audio_mode=snap["audio_mode"])
    own = model.parameters()
    if set(own) != set(ckpt.params):
        missing = sorted(set(own) ^ set(ckpt.params))
        raise CheckpointFormatError(f"parameter set mismatch: {missing[:4]}", 0)
    for name, arr in ckpt.params.items():
        if own[name].shape != arr.shape:
            raise CheckpointFormatError(f"shape mismatch for {name}: {arr.shape}", 0)
        own[name].values[...] = arr
    for tag, value in ckpt.logit_scales.items():
        model.scales.log_scales[tag].values[...] = value
    return model


# -- training loop -----------------------------------------------------------

@dataclass
class PhaseResult:
    checkpoint: Checkpoint
    model: TriModalModel
    history: list


def _check_dataset(dataset, need_audio=True):
    if len(dataset) == 0:
        raise ContractError("empty dataset")
    if len(dataset) < 2:
        raise ContractError("need at least two samples to form a batch")
    if need_audio and any(s.wav is None for s in dataset.samples):
        raise ContractError("every training sample needs audio")


def _batches(order: np.ndarray, batch_size: int) -> list:
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks.pop()
    return chunks


def _run_phase(phase: str, model: TriModalModel, dataset: TriModalDataset, config: TrainingConfig,
               loss_fn: Callable, modalities: set, resume: Checkpoint | None, classes,
               on_epoch: Callable | None, max_epochs: int | None) -> PhaseResult:
    params = model.trainable_parameters()
    opt = NesterovSGD(params, lr=config.eta0, momentum=config.momentum, weight_decay=config.weight_decay)
    rng = np.random.default_rng([config.seed, PHASES.index(phase)])
    start = 0
    if resume is not None:
        if set(resume.velocities) != set(params):
            raise ContractError("resume checkpoint does not match this phase's trainable set")
        for name, v in resume.velocities.items():
            opt.state.velocities[name][...] = v
        rng.bit_generator.state = json.loads(resume.rng_state)
        start = resume.epoch
    aug = config.augment_config(model.config.target_len)
    history = []
    stop = config.epochs if max_epochs is None else min(config.epochs, max_epochs)
    ckpt = checkpoint_from_model(model, phase, start, config, opt, rng, classes)
    for epoch in range(start, stop):
        lr = lr_at_epoch(config.eta0, config.gamma, epoch)
        opt.set_lr(lr)
        shuffle_seed, aug_seed = rng.integers(0, 2 ** 63 - 1, size=2)
        order = np.random.default_rng(int(shuffle_seed)).permutation(len(dataset))
        aug_rng = np.random.default_rng(int(aug_seed))
        losses, parts, extras = [], {}, []
        for idx in _batches(order, config.batch_size):
            batch = assemble_batch([dataset[i] for i in idx], modalities, "train", aug, model.config,
                                   aug_rng, dataset=dataset, vocab=model.text.vocab)
            T.get_tape().clear()
            opt.zero_grad()
            loss, breakdown, extra = loss_fn(model, batch)
            if not math.isfinite(loss.item()):
                raise NumericalError(f"non-finite loss in {phase} epoch {epoch}")
            T.backward(loss)
            opt.step()
            losses.append(loss.item())
            extras.append(extra)
            for tag, value in breakdown.items():
                parts.setdefault(tag, []).append(value)
        record = {"epoch": epoch, "lr": lr, "loss": float(np.mean(losses)),
                  "per_pair_losses": {k: float(np.mean(v)) for k, v in parts.items()}}
        if phase == "standalone":
            scores = np.concatenate([e[0] for e in extras])
            truth = np.concatenate([e[1] for e in extras])
            record["map"] = multilabel_map(scores, truth) if truth.any() else float("nan")
        history.append(record)
        ckpt = checkpoint_from_model(model, phase, epoch + 1, config, opt, rng, classes)
        if on_epoch is not None:
            on_epoch(record, ckpt)
    return PhaseResult(ckpt, model, history)


def _resume_or_start(ckpt: Checkpoint | None, phase: str):
    """Split an input checkpoint into (predecessor, same-phase resume point)."""
    if ckpt is None:
        if PREDECESSORS[phase]:
            raise ContractError(f"{phase} phase needs a checkpoint from {' or '.join(PREDECESSORS[phase])}")
        return None, None
    if ckpt.phase == phase:
        return None, ckpt
    if ckpt.phase not in PREDECESSORS[phase]:
        raise ContractError(f"{phase} phase cannot start from a {ckpt.phase!r} checkpoint")
    return ckpt, None


def _multi_hot(label_sets, classes) -> np.ndarray:
    index = {c: i for i, c in enumerate(classes)}
    out = np.zeros((len(label_sets), len(classes)))
    for r, labels in enumerate(label_sets):
        for lab in labels:
            if lab not in index:
                raise ContractError(f"label {lab!r} not among the configured classes")
            out[r, index[lab]] = 1.0
    return out


def _contrastive_loss(model, batch):
    emb = model.encode_batch(batch, [m for m in ("text", "image", "audio") if _has(batch, m)])
    loss, breakdown = trimodal_loss(emb, model.scales)
    return loss, breakdown, None


def _has(batch, modality):
    return {"text": batch.tokens, "image": batch.images, "audio": batch.waves}[modality] is not None


def pretrain_standalone(dataset: TriModalDataset, config: TrainingConfig, ckpt: Checkpoint | None = None,
                        on_epoch=None, max_epochs=None, classes=None) -> PhaseResult:
    """Supervised multi-label training of the audio head (sigmoid BCE)."""
    _check_dataset(dataset)
    _, resume = _resume_or_start(ckpt, "standalone")
    if resume is not None:
        model = model_from_checkpoint(resume)
        classes = resume.snapshot["classes"]
        config = TrainingConfig(**{**config.to_dict(), "phase": "standalone"})
    else:
        classes = list(classes or dataset.class_names)
        enc = EncoderConfig(embed_dim=config.embed_dim, n_bands=config.n_bands,
                            target_len=config.target_len, n_classes=len(classes))
        model = TriModalModel(enc, seed=config.seed, audio_mode="logits")
        # start from the label prior so early epochs go to features, not biases
        freq = _multi_hot([s.labels for s in dataset.samples], classes).mean(axis=0)
        freq = np.clip(freq, 1e-3, 1 - 1e-3)
        model.audio.classifier_b.values[...] = np.log(freq / (1 - freq))
    model.set_trainable({"audio"}, scales=False)

    def loss_fn(m, batch):
        logits = m.audio(batch.waves, "logits")
        truth = _multi_hot(batch.label_sets, classes)
        return T.bce_with_logits(logits, truth), {}, (logits.values.copy(), truth)

    return _run_phase("standalone", model, dataset, config, loss_fn, {"audio"}, resume, classes,
                      on_epoch, max_epochs)


def train_cooperative(ckpt: Checkpoint, dataset: TriModalDataset, config: TrainingConfig,
                      on_epoch=None, max_epochs=None) -> PhaseResult:
    """Audio head learns against frozen text and image heads.

    Starting from a standalone checkpoint, the class-logit layer is replaced
    by a randomly initialized projection into the shared space.
    """
    _check_dataset(dataset)
    source, resume = _resume_or_start(ckpt, "cooperative")
    model = model_from_checkpoint(resume or source)
    if source is not None:
        model.audio.replace_final_layer("embedding", np.random.default_rng([config.seed, 1, 99]))
    model.set_trainable({"audio"}, scales=False)
    return _run_phase("cooperative", model, dataset, config, _contrastive_loss,
                      {"text", "image", "audio"}, resume, (resume or source).snapshot["classes"],
                      on_epoch, max_epochs)


def train_full(ckpt: Checkpoint, dataset: TriModalDataset, config: TrainingConfig,
               on_epoch=None, max_epochs=None) -> PhaseResult:
    """All three heads and the logit scales train together."""
    _check_dataset(dataset)
    source, resume = _resume_or_start(ckpt, "full")
    model = model_from_checkpoint(resume or source)
    model.set_trainable({"text", "image", "audio"}, scales=True)
    return _run_phase("full", model, dataset, config, _contrastive_loss,
                      {"text", "image", "audio"}, resume, (resume or source).snapshot["classes"],
                      on_epoch, max_epochs)


def finetune_audio(ckpt: Checkpoint, dataset: TriModalDataset, config: TrainingConfig,
                   on_epoch=None, max_epochs=None) -> PhaseResult:
    """Text-audio contrastive tuning of the audio head on single-label data."""
    _check_dataset(dataset)
    multi = [s.id for s in dataset.samples if len(s.labels) != 1]
    if multi:
        raise ContractError(f"fine-tuning needs single-label samples; {multi[0]!r} has several")
    source, resume = _resume_or_start(ckpt, "finetune")
    model = model_from_checkpoint(resume or source)
    model.set_trainable({"audio"}, scales=False)
    return _run_phase("finetune", model, dataset, config, _contrastive_loss, {"text", "audio"},
                      resume, dataset.class_names, on_epoch, max_epochs)


PHASE_RUNNERS = {
    "standalone": pretrain_standalone,
    "cooperative": train_cooperative,
    "full": train_full,
    "finetune": finetune_audio,
}
