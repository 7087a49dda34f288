"""Synthetic tri-modal corpus, manifest I/O, frame selection and batching.

Corpus layout under ``out_dir``::

    manifest.jsonl           one {"id", "wav", "frames", "labels"} per line
    audio/<id>.wav           16-bit PCM mono
    frames/<id>_<k>.ppm      binary PPM (P6), k = 0..9

Paths inside the manifest are relative to the manifest's directory.
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import AugmentConfig, FbspFilterBank, Waveform, augment_waveform, fbsp_log_power, read_wav, write_wav
from .encoders import EncoderConfig, Vocabulary, tokenize_batch
from .errors import ContractError, DataError
from .tensor import no_grad

N_FRAMES = 10
SAMPLE_RATE = 16000
IMAGE_SIZE = 32


def label_text(labels) -> str:
    """Canonical text for a label set: sorted class names joined by ", "."""
    return ", ".join(sorted(set(labels)))


@dataclass(frozen=True)
class ClassSpec:
    """Recipe coupling one sound to one picture.

    ``audio`` keys: family (see ``synth_audio``), base_hz, jitter
    (fractional).  ``image`` keys: shape (circle|square|triangle), color
    (RGB 0-255), size (fraction of the frame), jitter (fraction).
    """

    name: str
    audio: dict
    image: dict

    def to_json(self) -> dict:
        return {"name": self.name, "audio": dict(self.audio), "image": dict(self.image)}

    @classmethod
    def from_json(cls, d: dict) -> "ClassSpec":
        return cls(d["name"], dict(d["audio"]), dict(d["image"]))


def _cls(name, family, hz, shape, color, size=0.45):
    return ClassSpec(name, {"family": family, "base_hz": hz, "jitter": 0.1},
                     {"shape": shape, "color": list(color), "size": size, "jitter": 0.15})


DEFAULT_CLASSES = (
    _cls("low hum", "sine", 150.0, "circle", (230, 40, 40)),
    _cls("buzzer", "sawtooth", 300.0, "square", (240, 220, 30)),
    _cls("hiss", "white", 700.0, "triangle", (220, 60, 220)),
    _cls("rumble", "brown", 700.0, "square", (150, 90, 40)),
    _cls("siren", "vibrato", 900.0, "circle", (250, 150, 30)),
    _cls("ticking", "clicks", 700.0, "triangle", (40, 220, 60)),
    _cls("doorbell", "chord", 500.0, "circle", (60, 80, 240)),
    _cls("beeping", "beeping", 900.0, "square", (40, 210, 230)),
    _cls("sweep", "chirp", 400.0, "triangle", (250, 120, 150)),
    _cls("tremolo", "tremolo", 700.0, "square", (110, 60, 200)),
    _cls("static", "bursts", 700.0, "circle", (200, 200, 200)),
    _cls("plucks", "plucks", 700.0, "triangle", (120, 240, 160)),
)


def default_classes(n: int) -> list[ClassSpec]:
    if not 2 <= n <= len(DEFAULT_CLASSES):
        raise ContractError(f"class count must be in [2, {len(DEFAULT_CLASSES)}], got {n}")
    return list(DEFAULT_CLASSES[:n])


# -- synthesis ---------------------------------------------------------------

def _gate(t, rate_hz, duty, phase):
    return ((t * rate_hz + phase) % 1.0 < duty).astype(np.float64)


def _unit_power(x, level=0.5):
    return x * (level / (np.sqrt(np.mean(x ** 2)) + 1e-12))


def synth_audio(spec: ClassSpec, duration_s: float, rng: np.random.Generator,
                sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Mono waveform of ``spec``'s sound family with jittered base frequency.

    Families differ in texture (harmonic layout, spectral tilt, modulation,
    gating) rather than in pitch alone, so classes stay distinct when the
    waveform is time-scaled or reversed.
    """
    a = spec.audio
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    f = a["base_hz"] * (1.0 + rng.uniform(-a["jitter"], a["jitter"]))
    phase = rng.uniform(0, 2 * np.pi)
    cyc = rng.uniform()
    family = a["family"]
    if family == "sine":
        x = np.sin(2 * np.pi * f * t + phase)
    elif family == "square":
        x = np.sign(np.sin(2 * np.pi * f * t + phase))
    elif family == "noise-band":
        spec_f = np.fft.rfft(rng.standard_normal(n))
        freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
        spec_f[(freqs < f / 1.25) | (freqs > f * 1.25)] = 0.0
        x = np.fft.irfft(spec_f, n)
    elif family == "sawtooth":
        x = 2.0 * ((f * t + phase / (2 * np.pi)) % 1.0) - 1.0
    elif family == "chord":
        x = 0.6 * (np.sin(2 * np.pi * f * t + phase) + np.sin(2 * np.pi * 2.5 * f * t))
    elif family == "chirp":
        # sweep f -> 4f over the clip
        x = np.sin(2 * np.pi * (f * t + 1.5 * f / duration_s * t ** 2) + phase)
    elif family == "vibrato":
        # +-50 % frequency swing at 3 Hz
        x = np.sin(2 * np.pi * f * t + 0.5 * f / 3.0 * np.sin(2 * np.pi * 3.0 * t + 2 * np.pi * cyc) + phase)
    elif family == "tremolo":
        x = np.sin(2 * np.pi * f * t + phase) * (0.5 + 0.5 * np.sin(2 * np.pi * 8.0 * t + 2 * np.pi * cyc))
    elif family == "beeping":
        x = np.sin(2 * np.pi * f * t + phase) * _gate(t, 6.0, 0.4, cyc)
    elif family == "clicks":
        # click rate tied to base frequency: f / 60 clicks per second
        period = max(int(round(sample_rate * 60.0 / f)), 2)
        x = np.zeros(n)
        x[int(rng.integers(period))::period] = 1.0
        x = np.convolve(x, np.exp(-np.arange(40) / 6.0), mode="same")
    elif family == "white":
        x = rng.standard_normal(n)
    elif family == "brown":
        x = np.cumsum(rng.standard_normal(n))
        x -= np.convolve(x, np.ones(401) / 401, mode="same")
    elif family == "bursts":
        x = rng.standard_normal(n) * _gate(t, 2.5, 0.35, cyc)
    elif family == "plucks":
        x = np.sin(2 * np.pi * f * t + phase) * np.exp(-((t * 4.0 + cyc) % 1.0) * 12.0)
    else:
        raise ContractError(f"unknown waveform family {family!r}")
    return _unit_power(x)


def _draw_shape(img, shape, color, cx, cy, radius):
    h, w, _ = img.shape
    yy, xx = np.mgrid[0:h, 0:w]
    dx, dy = xx + 0.5 - cx, yy + 0.5 - cy
    if shape == "circle":
        mask = dx ** 2 + dy ** 2 <= radius ** 2
    elif shape == "square":
        mask = (np.abs(dx) <= radius * 0.85) & (np.abs(dy) <= radius * 0.85)
    elif shape == "triangle":
        mask = (dy <= radius * 0.8) & (dy >= -radius) & (np.abs(dx) <= (dy + radius) * 0.6)
    else:
        raise ContractError(f"unknown shape {shape!r}")
    img[mask] = color


def synth_frames(specs, rng: np.random.Generator, size: int = IMAGE_SIZE, n_frames: int = N_FRAMES) -> list:
    """``n_frames`` uint8 RGB frames; each class's shape drifts across frames."""
    tracks = []
    scale = 1.0 if len(specs) == 1 else 0.7
    for k, spec in enumerate(specs):
        im = spec.image
        radius = 0.5 * im["size"] * size * scale
        j = im["jitter"] * size
        anchor_x = size / 2 if len(specs) == 1 else size * (0.3 + 0.4 * k)
        start = np.array([anchor_x, size / 2]) + rng.uniform(-j, j, 2)
        drift = rng.uniform(-j, j, 2) / n_frames
        tracks.append((spec, radius, start, drift))
    background = rng.integers(10, 40)
    frames = []
    for f in range(n_frames):
        img = np.full((size, size, 3), background, dtype=np.uint8)
        for spec, radius, start, drift in tracks:
            cx, cy = start + drift * f
            _draw_shape(img, spec.image["shape"], spec.image["color"], cx, cy, radius)
        noise = rng.integers(-6, 7, img.shape)
        frames.append(np.clip(img.astype(np.int16) + noise, 0, 255).astype(np.uint8))
    return frames


def write_ppm(path, img: np.ndarray):
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary (P6, maxval 255) PPM as uint8 [H, W, 3]."""
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"{path}: no such file") from exc
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise DataError(f"{path}: truncated PPM header")
        fields.append(data[pos:end])
        pos = end
    pos += 1
    if fields[0] != b"P6" or fields[3] != b"255":
        raise DataError(f"{path}: only P6 PPM with maxval 255 is supported")
    w, h = int(fields[1]), int(fields[2])
    body = data[pos:pos + w * h * 3]
    if len(body) != w * h * 3:
        raise DataError(f"{path}: truncated PPM body")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)


# -- manifest ----------------------------------------------------------------

@dataclass
class TriModalSample:
    """One aligned record; paths are absolute once loaded."""

    id: str
    wav: str | None
    frames: list = field(default_factory=list)
    labels: frozenset = frozenset()

    def __post_init__(self):
        self.labels = frozenset(self.labels)
        if not self.labels:
            raise ContractError(f"sample {self.id!r} has no labels")
        if self.wav is None and not self.frames:
            raise ContractError(f"sample {self.id!r} has neither audio nor frames")

    @property
    def text(self) -> str:
        return label_text(self.labels)


@dataclass
class Manifest:
    path: Path
    samples: list

    @property
    def ids(self) -> list:
        return [s.id for s in self.samples]

    def class_names(self) -> list:
        return sorted({lab for s in self.samples for lab in s.labels})


def write_manifest(path, samples):
    base = Path(path).parent
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            rec = {
                "id": s.id,
                "wav": None if s.wav is None else os.path.relpath(s.wav, base),
                "frames": [os.path.relpath(f, base) for f in s.frames],
                "labels": sorted(s.labels),
            }
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def load_manifest(path, check_files: bool = True) -> Manifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    if not path.exists():
        raise DataError(f"{path}: manifest not found")
    base = path.parent
    samples, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                sid = str(rec["id"])
                wav = rec.get("wav")
                frames = list(rec.get("frames") or [])
                labels = list(rec["labels"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed manifest record") from exc
            if sid in seen:
                raise DataError(f"{path}:{lineno}: duplicate id {sid!r}")
            seen.add(sid)
            wav = None if wav is None else str(base / wav)
            frames = [str(base / f) for f in frames]
            if check_files:
                for ref in ([wav] if wav else []) + frames:
                    if not os.path.exists(ref):
                        raise DataError(f"{path}:{lineno}: missing file {ref}")
            try:
                samples.append(TriModalSample(sid, wav, frames, labels))
            except ContractError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return Manifest(path, samples)


def generate_dataset(classes, n_per_class: int, multi_label_prob: float, seed: int, out_dir,
                     split: str = "train", duration_range=(1.0, 2.0)) -> Manifest:
    """Write a synthetic corpus and return its manifest.

    Each class contributes ``n_per_class`` samples as primary label; with
    probability ``multi_label_prob`` a second, different class is mixed into
    both the audio and the frames.  Identical arguments give a byte-identical
    corpus.
    """
    classes = list(classes)
    if len(classes) < 2:
        raise ContractError("need at least two classes")
    if len({c.name for c in classes}) != len(classes):
        raise ContractError("class names must be unique")
    out = Path(out_dir)
    try:
        (out / "audio").mkdir(parents=True, exist_ok=True)
        (out / "frames").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from exc
    split_key = zlib.crc32(split.encode("utf-8"))
    samples = []
    idx = 0
    for ci, spec in enumerate(classes):
        for _ in range(n_per_class):
            rng = np.random.default_rng([seed, split_key, idx])
            members = [spec]
            if rng.random() < multi_label_prob:
                other = int(rng.integers(len(classes) - 1))
                members.append(classes[other if other < ci else other + 1])
            duration = rng.uniform(*duration_range)
            x = sum(synth_audio(m, duration, rng) for m in members) / len(members)
            x = x + rng.standard_normal(x.shape) * 0.005
            sid = f"{split}-{idx:05d}"
            wav_path = out / "audio" / f"{sid}.wav"
            write_wav(wav_path, Waveform(np.clip(x, -1.0, 1.0), SAMPLE_RATE))
            frame_paths = []
            for k, img in enumerate(synth_frames(members, rng)):
                fp = out / "frames" / f"{sid}_{k}.ppm"
                write_ppm(fp, img)
                frame_paths.append(str(fp))
            samples.append(TriModalSample(sid, str(wav_path), frame_paths, [m.name for m in members]))
            idx += 1
    manifest_path = out / "manifest.jsonl"
    write_manifest(manifest_path, samples)
    with open(out / "classes.json", "w", encoding="utf-8") as fh:
        json.dump([c.to_json() for c in classes], fh, indent=1, sort_keys=True)
    return Manifest(manifest_path, samples)


# -- loading and batching ----------------------------------------------------

def select_frame(frames, mode: str = "eval", draw: float = 0.0):
    """Pick one of ``k`` frames: uniform by ``draw`` in train, center in eval."""
    k = len(frames)
    if k == 0:
        raise ContractError("no frames to select from")
    if mode == "eval":
        return frames[k // 2]
    if mode != "train":
        raise ContractError(f"unknown mode {mode!r}")
    return frames[min(int(draw * k), k - 1)]


class TriModalDataset:
    """Manifest-backed sample store with in-memory caching of decoded files."""

    def __init__(self, manifest: Manifest | str | os.PathLike):
        self.manifest = manifest if isinstance(manifest, Manifest) else load_manifest(manifest)
        self.samples = self.manifest.samples
        self._wav_cache: dict[str, Waveform] = {}
        self._img_cache: dict[str, np.ndarray] = {}

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def class_names(self) -> list:
        return self.manifest.class_names()

    def waveform(self, sample: TriModalSample) -> Waveform:
        if sample.wav is None:
            raise ContractError(f"sample {sample.id!r} has no audio")
        w = self._wav_cache.get(sample.wav)
        if w is None:
            w = self._wav_cache[sample.wav] = read_wav(sample.wav)
        return w

    def image(self, path) -> np.ndarray:
        img = self._img_cache.get(path)
        if img is None:
            img = self._img_cache[path] = read_ppm(path)
        return img

    def longest_track(self) -> int:
        return max(self.waveform(s).n_samples for s in self.samples if s.wav)


@dataclass
class TriModalBatch:
    """Preprocessed, sample-aligned tensors of one batch.

    ``waves`` is [N, C, target_len]; ``specs`` holds the log-power
    spectrograms [N, C, bands, frames] when a filterbank was supplied.
    """

    ids: list
    label_sets: list
    texts: list
    tokens: np.ndarray | None = None
    images: np.ndarray | None = None
    waves: np.ndarray | None = None
    specs: object = None
    draws: list = field(default_factory=list)

    def __len__(self):
        return len(self.ids)


def assemble_batch(samples, modalities, mode: str, augment_config: AugmentConfig,
                   encoders_config: EncoderConfig, rng: np.random.Generator | None = None,
                   dataset: TriModalDataset | None = None, bank: FbspFilterBank | None = None,
                   vocab: Vocabulary | None = None) -> TriModalBatch:
    """Turn samples into aligned model inputs.

    Train mode draws one seed per sample from ``rng`` and feeds the sample's
    augmentation and frame choice from that seed only.  Eval mode consumes no
    randomness.
    """
    modalities = set(modalities)
    if mode not in ("train", "eval"):
        raise ContractError(f"unknown mode {mode!r}")
    if mode == "train" and rng is None:
        raise ContractError("train mode needs a random generator")
    dataset = dataset or _AdHocLoader()
    samples = list(samples)
    for s in samples:
        if "audio" in modalities and s.wav is None:
            raise ContractError(f"sample {s.id!r} lacks audio")
        if "image" in modalities and not s.frames:
            raise ContractError(f"sample {s.id!r} lacks frames")
    seeds = rng.integers(0, 2 ** 63 - 1, size=len(samples)) if mode == "train" else [None] * len(samples)
    batch = TriModalBatch(ids=[s.id for s in samples], label_sets=[s.labels for s in samples],
                          texts=[s.text for s in samples])
    if "text" in modalities:
        batch.tokens = tokenize_batch(batch.texts, vocab or Vocabulary(), encoders_config.context_len)
    waves, images = [], []
    for s, seed in zip(samples, seeds):
        srng = np.random.default_rng(int(seed)) if seed is not None else None
        if "audio" in modalities:
            w, draws = augment_waveform(dataset.waveform(s), augment_config, srng, mode)
            waves.append(w.samples)
            batch.draws.append(draws)
        if "image" in modalities:
            draw = srng.random() if srng is not None else 0.0
            img = dataset.image(select_frame(s.frames, mode, draw))
            images.append(img.transpose(2, 0, 1).astype(np.float64) / 255.0)
    if waves:
        if len({w.shape[0] for w in waves}) > 1:
            waves = [w.mean(axis=0, keepdims=True) for w in waves]
        batch.waves = np.stack(waves)
        if bank is not None:
            with no_grad():
                batch.specs = fbsp_log_power(batch.waves, bank, encoders_config.hop)
    if images:
        batch.images = np.stack(images)
    return batch


class _AdHocLoader:
    """Uncached loader used when no dataset is supplied."""

    def waveform(self, sample):
        return read_wav(sample.wav)

    def image(self, path):
        return read_ppm(path)
