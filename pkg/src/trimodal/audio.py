"""Audio front-end: WAV I/O, fbsp wavelet filterbank, log-power transform and
waveform augmentations.

All augmentations take their random draws as explicit arguments so a caller
holding a per-sample generator gets reproducible results regardless of
execution order.
"""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass, field

import numpy as np
import scipy.fft

from .errors import ConfigurationError, ContractError, DataError, DimensionError
from .tensor import Tensor, make_op, reshape

LOG_EPS = 1e-10
LOW_EDGE_HZ = 50.0
HIGH_EDGE_FRACTION = 0.45


# -- waveform and WAV I/O ----------------------------------------------------

@dataclass
class Waveform:
    """Multi-channel audio, ``samples`` shaped [channels, n_samples]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim == 1:
            s = s[None, :]
        if s.ndim != 2 or s.shape[0] < 1:
            raise DimensionError(f"waveform samples must be [channels, n], got {s.shape}")
        if self.sample_rate <= 0:
            raise ContractError("sample_rate must be positive")
        self.samples = s

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    def power(self) -> float:
        """Mean squared sample value over all channels."""
        return float(np.mean(self.samples ** 2)) if self.samples.size else 0.0


def read_wav(path) -> Waveform:
    """Read 16-bit PCM little-endian WAV (mono or stereo) into [-1, 1]."""
    try:
        with wave.open(str(path), "rb") as fh:
            n_channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError) as exc:
        raise DataError(f"{path}: not a valid WAV file ({exc})") from exc
    except FileNotFoundError as exc:
        raise DataError(f"{path}: no such file") from exc
    if width != 2 or n_channels not in (1, 2):
        raise DataError(f"{path}: only 16-bit PCM mono/stereo is supported")
    pcm = np.frombuffer(raw, dtype="<i2").reshape(-1, n_channels).T
    return Waveform(pcm.astype(np.float64) / 32768.0, rate)


def write_wav(path, w: Waveform):
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(w.channels)
        fh.setsampwidth(2)
        fh.setframerate(int(w.sample_rate))
        fh.writeframes(pcm.T.tobytes())


# -- fbsp filterbank ---------------------------------------------------------

def _sinc_and_slope(u):
    """Normalized sinc and its derivative with respect to ``u``."""
    s = np.sinc(u)
    with np.errstate(divide="ignore", invalid="ignore"):
        ds = np.where(u == 0.0, 0.0, (np.cos(np.pi * u) - s) / u)
    return s, ds


def fbsp_kernels(fc, fb, order, t, with_grads=False):
    """Sampled complex frequency B-spline wavelets.

    ``psi(t) = dt * sqrt(fb) * sinc(fb * t / m)**m * exp(2j*pi*fc*t)`` for
    every band, evaluated on the time grid ``t`` (seconds).  ``dt`` is the grid
    step, making the discrete correlation a Riemann sum of the continuous one.

    Returns the [bands, len(t)] kernel matrix, plus its partial derivatives
    with respect to ``fc`` and ``fb`` when ``with_grads`` is set.
    """
    fc = np.asarray(fc, dtype=np.float64)[:, None]
    fb = np.asarray(fb, dtype=np.float64)[:, None]
    dt = t[1] - t[0] if len(t) > 1 else 1.0
    u = fb * t[None, :] / order
    s, ds = _sinc_and_slope(u)
    carrier = np.exp(2j * np.pi * fc * t[None, :])
    root = np.sqrt(fb)
    envelope = dt * root * s ** order
    k = envelope * carrier
    if not with_grads:
        return k
    dk_dfc = k * (2j * np.pi * t[None, :])
    d_env = dt * (s ** order / (2.0 * root) + root * s ** (order - 1) * ds * t[None, :])
    dk_dfb = d_env * carrier
    return k, dk_dfc, dk_dfb


class FbspFilterBank:
    """Trainable bank of complex frequency B-spline band filters.

    Parameters
    ----------
    fc, fb : Tensor
        Per-band center frequencies and bandwidths in Hz (trainable).
    sample_rate : int
    kernel_len : int
        Odd number of taps on a grid symmetric around zero.
    order : int
        B-spline order ``m``.
    """

    def __init__(self, fc: Tensor, fb: Tensor, sample_rate: int, kernel_len: int, order: int = 2):
        self.fc = fc
        self.fb = fb
        self.sample_rate = int(sample_rate)
        self.kernel_len = int(kernel_len)
        self.order = int(order)

    @property
    def n_bands(self) -> int:
        return self.fc.shape[0]

    @property
    def time_grid(self) -> np.ndarray:
        half = (self.kernel_len - 1) // 2
        return np.arange(-half, half + 1, dtype=np.float64) / self.sample_rate

    def parameters(self) -> dict:
        return {"fc": self.fc, "fb": self.fb}

    def kernels(self) -> np.ndarray:
        return fbsp_kernels(self.fc.values, self.fb.values, self.order, self.time_grid)


def build_filterbank(n_bands: int, sample_rate: int, kernel_len: int = 511, m: int = 2) -> FbspFilterBank:
    """Geometrically spaced bank between 50 Hz and 0.45 * sample_rate.

    The log-frequency range is cut into ``n_bands`` equal segments; each band
    sits at the geometric center of its segment with the segment width as
    initial bandwidth.
    """
    if n_bands < 1 or m < 1:
        raise ConfigurationError("n_bands and order must be >= 1")
    if kernel_len < 3 or kernel_len % 2 == 0:
        raise ConfigurationError("kernel_len must be odd and >= 3")
    high = HIGH_EDGE_FRACTION * sample_rate
    if high <= LOW_EDGE_HZ:
        raise ConfigurationError(f"sample rate {sample_rate} Hz too low for a {LOW_EDGE_HZ} Hz low edge")
    if n_bands > kernel_len // 2:
        raise ConfigurationError(
            f"{n_bands} bands cannot be resolved by {kernel_len}-tap kernels")
    edges = LOW_EDGE_HZ * (high / LOW_EDGE_HZ) ** (np.arange(n_bands + 1) / n_bands)
    centers = np.sqrt(edges[:-1] * edges[1:])
    widths = np.diff(edges)
    return FbspFilterBank(Tensor(centers, requires_grad=True, name="fc"),
                          Tensor(widths, requires_grad=True, name="fb"),
                          sample_rate, kernel_len, m)


@dataclass
class Spectrogram:
    """Log-power time-frequency map, ``values`` shaped [channels, bands, frames]."""

    values: Tensor
    hop: int


def n_frames_for(n_samples: int, hop: int) -> int:
    return -(-n_samples // hop)


def fbsp_log_power(waves: np.ndarray, bank: FbspFilterBank, hop: int, chunk: int = 8) -> Tensor:
    """Batched differentiable transform: [N, C, T] waveforms -> [N, C, B, F].

    Per band the waveform is correlated with the complex kernel, the squared
    magnitude is averaged over each hop-sized frame and ``log(power + 1e-10)``
    is returned.  Gradients flow to ``bank.fc`` and ``bank.fb``.
    """
    waves = np.asarray(waves, dtype=np.float64)
    if waves.ndim != 3:
        raise DimensionError(f"expected [N, C, T] waveforms, got {waves.shape}")
    n, c, length = waves.shape
    if length == 0 or n == 0:
        raise ContractError("empty waveform")
    if bank.kernel_len > length:
        raise ContractError(f"kernel_len {bank.kernel_len} exceeds {length} samples")
    if hop < 1:
        raise ContractError("hop must be >= 1")
    half = (bank.kernel_len - 1) // 2
    nfft = scipy.fft.next_fast_len(length + half)
    n_frames = n_frames_for(length, hop)
    counts = np.full(n_frames, float(hop))
    counts[-1] = length - (n_frames - 1) * hop
    padded_len = n_frames * hop

    kern, dk_dfc, dk_dfb = fbsp_kernels(bank.fc.values, bank.fb.values, bank.order,
                                        bank.time_grid, with_grads=True)
    kflip_f = scipy.fft.fft(kern[:, ::-1], nfft, axis=-1)  # [B, nfft]
    n_bands = kern.shape[0]

    def responses(lo, hi):
        xf = scipy.fft.fft(waves[lo:hi], nfft, axis=-1)  # [n, C, nfft]
        y = scipy.fft.ifft(xf[:, :, None, :] * kflip_f[None, None], axis=-1)
        return xf, y[..., half:half + length]  # [n, C, B, T]

    def frame_power(y):
        p = np.abs(y) ** 2
        if padded_len != length:
            p = np.concatenate([p, np.zeros(p.shape[:-1] + (padded_len - length,))], axis=-1)
        return p.reshape(p.shape[:-1] + (n_frames, hop)).sum(axis=-1) / counts

    power = np.empty((n, c, n_bands, n_frames))
    for lo in range(0, n, chunk):
        _, y = responses(lo, lo + chunk)
        power[lo:lo + chunk] = frame_power(y)
    out = np.log(power + LOG_EPS)

    def rule(g):
        dp = g / (power + LOG_EPS) / counts  # dL/d|y|^2 per sample in frame
        acc = np.zeros((n_bands, nfft), dtype=np.complex128)
        for lo in range(0, n, chunk):
            xf, y = responses(lo, lo + chunk)
            per_t = np.repeat(dp[lo:lo + chunk], hop, axis=-1)[..., :length]
            gy = 2.0 * y * per_t  # dL/dRe(y) + i dL/dIm(y)
            gy_f = scipy.fft.fft(np.conj(gy), nfft, axis=-1)
            acc += np.einsum("nct,ncbt->bt", xf, np.conj(gy_f))
        r = scipy.fft.ifft(acc, axis=-1)
        # r[tau mod nfft] = sum_t x(t + tau) g(t) for tau in [-half, half]
        g_kern = np.concatenate([r[:, nfft - half:], r[:, :half + 1]], axis=-1)
        g_fc = np.real(np.sum(np.conj(g_kern) * dk_dfc, axis=-1))
        g_fb = np.real(np.sum(np.conj(g_kern) * dk_dfb, axis=-1))
        return g_fc, g_fb

    return make_op("fbsp_log_power", (bank.fc, bank.fb), out, rule)


def transform(w: Waveform, bank: FbspFilterBank, hop: int) -> Spectrogram:
    """Single-waveform log-power spectrogram [channels, bands, frames]."""
    if w.n_samples == 0:
        raise ContractError("empty waveform")
    if w.sample_rate != bank.sample_rate:
        raise ContractError(f"waveform at {w.sample_rate} Hz, filterbank built for {bank.sample_rate} Hz")
    values = fbsp_log_power(w.samples[None], bank, hop)
    return Spectrogram(reshape(values, values.shape[1:]), hop)


# -- augmentations -----------------------------------------------------------

@dataclass
class AugmentConfig:
    """Training-time audio augmentation settings."""

    scale_exponent_range: tuple = (-1.5, 1.5)
    p_invert: float = 0.5
    p_noise: float = 0.25
    snr_db_range: tuple = (10.0, 120.0)
    target_len: int = 16000

    def __post_init__(self):
        for p in (self.p_invert, self.p_noise):
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError(f"probability {p} outside [0, 1]")
        lo, hi = self.snr_db_range
        if lo > hi:
            raise ConfigurationError("snr_db_range must be ordered")
        lo, hi = self.scale_exponent_range
        if lo > hi:
            raise ConfigurationError("scale_exponent_range must be ordered")
        if self.target_len <= 0:
            raise ConfigurationError("target_len must be positive")


def augment_time_scale(w: Waveform, s: float) -> Waveform:
    """Resample by factor ``2**s`` with linear interpolation.

    Duration and pitch change together; the sample rate is kept.  Endpoints
    map onto endpoints.
    """
    if s == 0:
        return Waveform(w.samples.copy(), w.sample_rate)
    n = w.n_samples
    new_len = max(1, int(round(n * 2.0 ** s)))
    if n == 1 or new_len == 1:
        return Waveform(np.repeat(w.samples[:, :1], new_len, axis=1), w.sample_rate)
    pos = np.linspace(0.0, n - 1, new_len)
    src = np.arange(n, dtype=np.float64)
    out = np.stack([np.interp(pos, src, ch) for ch in w.samples])
    return Waveform(out, w.sample_rate)


def augment_time_invert(w: Waveform, coin: float, p_invert: float = 0.5) -> Waveform:
    if coin < p_invert:
        return Waveform(w.samples[:, ::-1].copy(), w.sample_rate)
    return Waveform(w.samples.copy(), w.sample_rate)


def augment_crop_pad(w: Waveform, target_len: int, mode: str = "center", offset_draw: float = 0.0) -> Waveform:
    """Crop or zero-pad every channel to exactly ``target_len`` samples.

    ``mode="random"`` places the window (or the signal, when padding) at an
    offset chosen by ``offset_draw`` in [0, 1); ``mode="center"`` centers it.
    """
    if target_len <= 0:
        raise ContractError("target_len must be positive")
    if mode not in ("random", "center"):
        raise ContractError(f"unknown crop mode {mode!r}")
    n = w.n_samples
    slack = abs(n - target_len)
    if mode == "center":
        offset = slack // 2
    else:
        offset = min(int(math.floor(offset_draw * (slack + 1))), slack)
    if n >= target_len:
        out = w.samples[:, offset:offset + target_len].copy()
    else:
        out = np.zeros((w.channels, target_len))
        out[:, offset:offset + n] = w.samples
    return Waveform(out, w.sample_rate)


def augment_awgn(w: Waveform, apply_draw: float, snr_db_draw: float, rng: np.random.Generator,
                 p_noise: float = 0.25) -> Waveform:
    """Add white Gaussian noise at ``snr_db_draw`` dB when ``apply_draw < p_noise``.

    Noise variance is ``P_signal * 10**(-snr/10)`` with ``P_signal`` the mean
    squared sample.  Silent input is returned unchanged.
    """
    if apply_draw >= p_noise:
        return Waveform(w.samples.copy(), w.sample_rate)
    p_signal = w.power()
    if p_signal <= 0.0:
        return Waveform(w.samples.copy(), w.sample_rate)
    sigma = math.sqrt(p_signal * 10.0 ** (-snr_db_draw / 10.0))
    noise = rng.standard_normal(w.samples.shape) * sigma
    return Waveform(w.samples + noise, w.sample_rate)


@dataclass
class AugmentDraws:
    """The random values consumed by one call of :func:`augment_waveform`."""

    scale_exponent: float
    invert_coin: float
    noise_coin: float
    snr_db: float
    offset: float
    inverted: bool = False
    noised: bool = False
    extras: dict = field(default_factory=dict)


def augment_waveform(w: Waveform, config: AugmentConfig, rng: np.random.Generator,
                     mode: str = "train") -> tuple[Waveform, AugmentDraws | None]:
    """Full preprocessing chain up to the fixed-length waveform.

    Train mode: time scaling, time inversion, AWGN, random crop/pad.
    Eval mode: center crop/pad only; ``rng`` is not touched.
    """
    if mode == "eval":
        return augment_crop_pad(w, config.target_len, "center"), None
    if mode != "train":
        raise ContractError(f"unknown mode {mode!r}")
    lo, hi = config.scale_exponent_range
    snr_lo, snr_hi = config.snr_db_range
    draws = AugmentDraws(
        scale_exponent=float(rng.uniform(lo, hi)),
        invert_coin=float(rng.random()),
        noise_coin=float(rng.random()),
        snr_db=float(rng.uniform(snr_lo, snr_hi)),
        offset=float(rng.random()),
    )
    out = augment_time_scale(w, draws.scale_exponent)
    out = augment_time_invert(out, draws.invert_coin, config.p_invert)
    draws.inverted = draws.invert_coin < config.p_invert
    out = augment_awgn(out, draws.noise_coin, draws.snr_db, rng, config.p_noise)
    draws.noised = draws.noise_coin < config.p_noise and w.power() > 0.0
    out = augment_crop_pad(out, config.target_len, "random", draws.offset)
    return out, draws
