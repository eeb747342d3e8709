"""Audio I/O and DSP at a fixed 16 kHz / 20 ms frame geometry.

Every function here is a pure function of its inputs (plus an explicit
``numpy.random.Generator`` where randomness is involved), so corpus
preparation can be run per file in parallel without shared state.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import signal as sps
from scipy.io import wavfile

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
N_FFT = 1280
WIN_LENGTH = 1280
HOP_LENGTH = 320
N_MELS = 80
N_FREQ = N_FFT // 2 + 1
MEL_FMIN = 0.0
MEL_FMAX = 8000.0
LOG_FLOOR = 1e-10

F0_MIN = 65.0
F0_MAX = 1000.0
YIN_THRESHOLD = 0.15


# ----------------------------------------------------------------------------
# I/O
# ----------------------------------------------------------------------------

def load_wav(path: str | Path) -> np.ndarray:
    """Read a mono PCM WAV file, resampled to 16 kHz, as float64 in [-1, 1]."""
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    else:
        samples = data.astype(np.float64)
    if rate != SAMPLE_RATE:
        g = np.gcd(int(rate), SAMPLE_RATE)
        samples = sps.resample_poly(samples, SAMPLE_RATE // g, int(rate) // g)
    if not np.all(np.isfinite(samples)):
        raise ValueError(f"{path}: non-finite samples")
    return samples


def save_wav(path: str | Path, samples: np.ndarray) -> None:
    """Write 16-bit PCM at 16 kHz. Samples are clipped to [-1, 1]."""
    pcm = np.round(np.clip(samples, -1.0, 1.0) * 32767.0).astype("<i2")
    wavfile.write(str(path), SAMPLE_RATE, pcm)


_RECORD_HEADER = struct.Struct("<II")


def write_record(path: str | Path, array: np.ndarray) -> None:
    """Feature cache record: ``<u32 T><u32 bins>`` then row-major little-endian f32."""
    arr = np.asarray(array, dtype=np.float32)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"records are 1-D or 2-D, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(_RECORD_HEADER.pack(arr.shape[0], arr.shape[1]))
        fh.write(arr.astype("<f4").tobytes(order="C"))


def read_record(path: str | Path, squeeze: bool = True) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _RECORD_HEADER.size:
        raise ValueError(f"{path}: truncated record header")
    rows, cols = _RECORD_HEADER.unpack_from(raw)
    body = raw[_RECORD_HEADER.size:]
    if len(body) != rows * cols * 4:
        raise ValueError(f"{path}: expected {rows}x{cols} floats, found {len(body)} bytes")
    arr = np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float32)
    if squeeze and cols == 1:
        return arr[:, 0]
    return arr


# ----------------------------------------------------------------------------
# Framing, STFT, mel
# ----------------------------------------------------------------------------

def num_frames(num_samples: int) -> int:
    return 1 + num_samples // HOP_LENGTH


@lru_cache(maxsize=None)
def _window() -> np.ndarray:
    return sps.get_window("hann", WIN_LENGTH, fftbins=True)


def _frame(samples: np.ndarray, frame_length: int) -> np.ndarray:
    """Centered frames with reflection padding, one per hop."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("waveform must be a non-empty 1-D array")
    pad = frame_length // 2
    mode = "reflect" if x.size > 1 else "constant"
    padded = np.pad(x, pad, mode=mode)
    n = num_frames(x.size)
    frames = np.lib.stride_tricks.sliding_window_view(padded, frame_length)[::HOP_LENGTH]
    return frames[:n]


def stft(samples: np.ndarray) -> np.ndarray:
    """Complex spectrogram, shape (T, 641)."""
    frames = _frame(samples, N_FFT) * _window()
    return np.fft.rfft(frames, n=N_FFT, axis=1)


def istft(spec: np.ndarray, length: int) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`."""
    n = spec.shape[0]
    win = _window()
    frames = np.fft.irfft(spec, n=N_FFT, axis=1) * win
    total = N_FFT + HOP_LENGTH * (n - 1)
    out = np.zeros(total)
    wsum = np.zeros(total)
    for i in range(n):
        s = i * HOP_LENGTH
        out[s:s + N_FFT] += frames[i]
        wsum[s:s + N_FFT] += win ** 2
    nz = wsum > 1e-8
    out[nz] /= wsum[nz]
    pad = N_FFT // 2
    out = out[pad:pad + length]
    if out.size < length:
        out = np.pad(out, (0, length - out.size))
    return out


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=None)
def mel_filterbank() -> np.ndarray:
    """Triangular filters with unit area, (80, 641)."""
    freqs = np.linspace(0.0, SAMPLE_RATE / 2, N_FREQ)
    edges = mel_to_hz(np.linspace(hz_to_mel(MEL_FMIN), hz_to_mel(MEL_FMAX), N_MELS + 2))
    fb = np.zeros((N_MELS, N_FREQ))
    for m in range(N_MELS):
        lo, c, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / (c - lo)
        down = (hi - freqs) / (hi - c)
        fb[m] = np.maximum(0.0, np.minimum(up, down)) * (2.0 / (hi - lo))
    fb.setflags(write=False)
    return fb


def power_to_logmel(power: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(power @ mel_filterbank().T, LOG_FLOOR))


def mel_spectrogram(samples: np.ndarray) -> np.ndarray:
    """Log mel energies, (T, 80)."""
    spec = stft(samples)
    return power_to_logmel(np.abs(spec) ** 2)


def frame_energy(mel: np.ndarray) -> np.ndarray:
    """Per-frame mean over mel bins."""
    mel = np.asarray(mel)
    if mel.ndim != 2:
        raise ValueError(f"expected (T, bins) mel, got shape {mel.shape}")
    return mel.mean(axis=1)


# ----------------------------------------------------------------------------
# Pitch
# ----------------------------------------------------------------------------

def _difference(frames: np.ndarray, tau_max: int) -> np.ndarray:
    """YIN difference function d(tau) for tau in [0, tau_max], per frame."""
    length = frames.shape[1]
    w = length - tau_max
    head = frames[:, :w]
    size = 1 << int(np.ceil(np.log2(length + w)))
    corr = np.fft.irfft(
        np.fft.rfft(frames, size, axis=1) * np.conj(np.fft.rfft(head, size, axis=1)),
        size, axis=1,
    )[:, :tau_max + 1]
    sq = np.concatenate([np.zeros((frames.shape[0], 1)), np.cumsum(frames ** 2, axis=1)], axis=1)
    taus = np.arange(tau_max + 1)
    energy_tau = sq[:, taus + w] - sq[:, taus]
    energy_0 = sq[:, [w]]
    d = energy_0 + energy_tau - 2.0 * corr
    return np.maximum(d, 0.0)


def _analysis_frames(samples: np.ndarray, frame_length: int) -> np.ndarray:
    """One window per hop, centered where possible but clamped inside the signal.

    Reflection padding breaks periodicity at the edges, which YIN is sensitive
    to; shifting edge windows inward keeps every window a genuine excerpt.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("waveform must be a non-empty 1-D array")
    if x.size < frame_length:
        return _frame(x, frame_length)
    n = num_frames(x.size)
    starts = np.clip(np.arange(n) * HOP_LENGTH - frame_length // 2, 0, x.size - frame_length)
    return np.lib.stride_tricks.sliding_window_view(x, frame_length)[starts]


def cmndf(diff: np.ndarray) -> np.ndarray:
    """Cumulative mean normalized difference; column 0 is 1 by definition."""
    out = np.ones_like(diff)
    cum = np.cumsum(diff[:, 1:], axis=1)
    taus = np.arange(1, diff.shape[1])
    with np.errstate(divide="ignore", invalid="ignore"):
        out[:, 1:] = np.where(cum > 0, diff[:, 1:] * taus / cum, 1.0)
    return out


def extract_pitch(
    samples: np.ndarray,
    f_min: float = F0_MIN,
    f_max: float = F0_MAX,
    threshold: float = YIN_THRESHOLD,
    median: int = 5,
) -> np.ndarray:
    """Frame-level f0 in Hz (0 = unvoiced), aligned with :func:`mel_spectrogram`.

    YIN with absolute threshold and parabolic refinement, followed by a median
    filter over the track. Each analysis window spans two periods of ``f_min``
    so that it rarely straddles a pitch change.
    """
    if not 0 < f_min < f_max:
        raise ValueError(f"need 0 < f_min < f_max, got f_min={f_min}, f_max={f_max}")
    tau_min = max(2, int(np.floor(SAMPLE_RATE / f_max)))
    tau_max = int(np.ceil(SAMPLE_RATE / f_min)) + 1
    frame_length = 2 * tau_max
    if frame_length > N_FFT:
        raise ValueError(f"f_min={f_min} too low for a {N_FFT}-sample analysis frame")
    frames = _analysis_frames(samples, frame_length)
    frames = frames - frames.mean(axis=1, keepdims=True)
    dn = cmndf(_difference(frames, tau_max))

    f0 = np.zeros(frames.shape[0])
    power = np.mean(frames ** 2, axis=1)
    for t in range(frames.shape[0]):
        if power[t] < 1e-10:
            continue
        row = dn[t]
        below = np.nonzero(row[tau_min:tau_max] < threshold)[0]
        if below.size == 0:
            continue
        tau = tau_min + int(below[0])
        while tau + 1 < tau_max and row[tau + 1] < row[tau]:
            tau += 1
        a, b, c = row[tau - 1], row[tau], row[tau + 1]
        denom = a - 2.0 * b + c
        shift = 0.5 * (a - c) / denom if denom > 0 else 0.0
        freq = SAMPLE_RATE / (tau + float(np.clip(shift, -1.0, 1.0)))
        if f_min <= freq <= f_max:
            f0[t] = freq
    if median > 1 and f0.size >= median:
        f0 = sps.medfilt(f0, median)
    return f0


# ----------------------------------------------------------------------------
# Information perturbation
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class PerturbConfig:
    formant_shift_ratio_range: tuple[float, float] = (1.0, 1.4)
    pitch_shift_ratio_range: tuple[float, float] = (1.0, 2.0)
    eq_band_count: int = 8
    eq_gain_db_range: tuple[float, float] = (-12.0, 12.0)
    eq_center_hz_range: tuple[float, float] = (60.0, 7600.0)
    eq_q_range: tuple[float, float] = (0.5, 4.0)
    seed: int = 0

    def __post_init__(self):
        for name in ("formant_shift_ratio_range", "pitch_shift_ratio_range"):
            lo, hi = getattr(self, name)
            if lo < 1.0 or hi < lo:
                raise ValueError(f"{name} must satisfy 1 <= lo <= hi, got {(lo, hi)}")
        if self.eq_band_count < 1:
            raise ValueError("eq_band_count must be >= 1")

    @classmethod
    def identity(cls, seed: int = 0) -> "PerturbConfig":
        return cls((1.0, 1.0), (1.0, 1.0), 1, (0.0, 0.0), seed=seed)


def _random_ratio(rng: np.random.Generator, bounds: tuple[float, float]) -> float:
    ratio = rng.uniform(*bounds)
    if rng.random() < 0.5:
        ratio = 1.0 / ratio
    return float(ratio)


def time_stretch(samples: np.ndarray, length: int) -> np.ndarray:
    """Phase-vocoder stretch of ``samples`` to ``length`` samples, pitch kept."""
    spec = stft(samples)
    n_in = spec.shape[0]
    n_out = num_frames(length)
    rate = (n_in - 1) / max(n_out - 1, 1)
    positions = np.arange(n_out) * rate
    mag = np.abs(spec)
    phase = np.angle(spec)
    out = np.empty((n_out, spec.shape[1]), dtype=complex)
    acc = phase[0].copy()
    for k, pos in enumerate(positions):
        i = min(int(np.floor(pos)), n_in - 1)
        j = min(i + 1, n_in - 1)
        frac = pos - i
        m = (1.0 - frac) * mag[i] + frac * mag[j] if frac else mag[i]
        out[k] = m * np.exp(1j * acc)
        acc = acc + (phase[j] - phase[i])
    return istft(out, length)


def pitch_shift(samples: np.ndarray, ratio: float) -> np.ndarray:
    """Resample by ``ratio`` (moving every frequency), then stretch back."""
    n = samples.size
    shrunk = sps.resample(samples, max(2, int(round(n / ratio))))
    return time_stretch(shrunk, n)


def _envelope(mag: np.ndarray, n_lifter: int = 30) -> np.ndarray:
    cep = np.fft.irfft(np.log(np.maximum(mag, 1e-8)), n=N_FFT, axis=1)
    cep[:, n_lifter:N_FFT - n_lifter + 1] = 0.0
    return np.exp(np.fft.rfft(cep, n=N_FFT, axis=1).real)


def formant_shift(samples: np.ndarray, ratio: float) -> np.ndarray:
    """Warp the cepstral spectral envelope along frequency, keeping fine structure."""
    spec = stft(samples)
    mag = np.abs(spec)
    env = _envelope(mag)
    bins = np.arange(N_FREQ, dtype=np.float64)
    warped = np.stack([np.interp(bins / ratio, bins, row) for row in env])
    return istft(spec * (warped / env), samples.size)


def peaking_biquad(center_hz: float, gain_db: float, q: float) -> tuple[np.ndarray, np.ndarray]:
    amp = 10.0 ** (gain_db / 40.0)
    w0 = 2.0 * np.pi * center_hz / SAMPLE_RATE
    alpha = np.sin(w0) / (2.0 * q)
    b = np.array([1.0 + alpha * amp, -2.0 * np.cos(w0), 1.0 - alpha * amp])
    a = np.array([1.0 + alpha / amp, -2.0 * np.cos(w0), 1.0 - alpha / amp])
    return b / a[0], a / a[0]


def frequency_shape(samples: np.ndarray, cfg: PerturbConfig, rng: np.random.Generator) -> np.ndarray:
    out = samples
    lo_c, hi_c = np.log(cfg.eq_center_hz_range[0]), np.log(cfg.eq_center_hz_range[1])
    for _ in range(cfg.eq_band_count):
        center = float(np.exp(rng.uniform(lo_c, hi_c)))
        gain = float(rng.uniform(*cfg.eq_gain_db_range))
        q = float(rng.uniform(*cfg.eq_q_range))
        if gain == 0.0:
            # exact identity filter; lfilter would still add rounding noise
            continue
        b, a = peaking_biquad(center, gain, q)
        out = sps.lfilter(b, a, out)
    return out


def perturb(samples: np.ndarray, cfg: PerturbConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Pitch randomization, formant shift, then random peaking-EQ cascade."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        raise ValueError("waveform must be non-empty")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    pitch_ratio = _random_ratio(rng, cfg.pitch_shift_ratio_range)
    formant_ratio = _random_ratio(rng, cfg.formant_shift_ratio_range)
    y = pitch_shift(x, pitch_ratio)
    y = formant_shift(y, formant_ratio)
    y = frequency_shape(y, cfg, rng)
    peak = np.max(np.abs(y))
    if peak > 1.0:
        y = y * (0.99 / peak)
    return y


# ----------------------------------------------------------------------------
# Mel inversion
# ----------------------------------------------------------------------------

def mel_to_magnitude(mel: np.ndarray, iters: int = 200) -> np.ndarray:
    """Non-negative linear magnitudes whose mel projection approximates ``mel``.

    Projected-gradient least squares on the power spectrum, warm-started from
    the filterbank transpose.
    """
    fb = mel_filterbank()
    target = np.exp(np.asarray(mel, dtype=np.float64))
    target = np.where(target <= LOG_FLOOR * 1.0001, 0.0, target)
    gram = fb @ fb.T
    step = 1.0 / np.linalg.eigvalsh(gram)[-1]
    power = np.maximum(target @ np.linalg.pinv(fb).T, 0.0)
    for _ in range(iters):
        resid = power @ fb.T - target
        power = np.maximum(power - step * (resid @ fb), 0.0)
    return np.sqrt(power)


def griffin_lim(mel: np.ndarray, iters: int = 32, seed: int = 0) -> np.ndarray:
    """Waveform from a log-mel spectrogram via Griffin-Lim phase recovery."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    mag = mel_to_magnitude(mel)
    length = (mag.shape[0] - 1) * HOP_LENGTH
    length = max(length, 1)
    rng = np.random.default_rng(seed)
    angles = np.exp(2j * np.pi * rng.random(mag.shape))
    y = istft(mag * angles, length)
    for _ in range(iters - 1):
        spec = stft(y)
        angles = np.exp(1j * np.angle(spec))
        y = istft(mag * angles, length)
    return y
