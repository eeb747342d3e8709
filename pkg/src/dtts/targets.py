"""Supervision targets: token-level binary rise/fall sequences, per-speaker
standardized frame pitch, and linguistic features from a pluggable SSL provider.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from . import signal

log = logging.getLogger(__name__)

SSL_DIM = 1024


def _check_durations(n_frames: int, durations) -> np.ndarray:
    d = np.asarray(durations)
    if d.ndim != 1 or d.size == 0:
        raise ValueError("durations must be a non-empty 1-D sequence")
    if np.any(d < 0) or not np.all(d == np.round(d)):
        raise ValueError("durations must be non-negative integers")
    d = d.astype(np.int64)
    if int(d.sum()) != n_frames:
        raise ValueError(f"durations sum to {int(d.sum())} but there are {n_frames} frames")
    return d


def average_per_token(frames, durations) -> np.ndarray:
    """Mean of each token's frames; zero-length tokens repeat the previous value."""
    x = np.asarray(frames, dtype=np.float64)
    d = _check_durations(x.shape[0], durations)
    out = np.empty(d.size)
    prev = 0.0
    start = 0
    for i, n in enumerate(d):
        if n > 0:
            seg = x[start:start + n]
            # offset by the first frame so constant segments average exactly
            prev = seg[0] + (seg - seg[0]).mean()
            start += n
        out[i] = prev
    return out


def binarize(avg) -> np.ndarray:
    """1 where a token's value strictly exceeds the previous token's, else 0.

    The first token has no predecessor and is always 0.
    """
    a = np.asarray(avg, dtype=np.float64)
    if a.ndim != 1 or a.size == 0:
        raise ValueError("binarize expects a non-empty 1-D sequence")
    out = np.zeros(a.size, dtype=np.int64)
    out[1:] = (a[:-1] < a[1:]).astype(np.int64)
    return out


def build_ld_targets(pitch, energy, durations) -> tuple[np.ndarray, np.ndarray]:
    """Binary language-dependent (pitch, energy) targets, one entry per token."""
    pitch = np.asarray(pitch)
    energy = np.asarray(energy)
    if pitch.shape != energy.shape:
        raise ValueError(f"pitch {pitch.shape} and energy {energy.shape} differ in length")
    return (binarize(average_per_token(pitch, durations)),
            binarize(average_per_token(energy, durations)))


# ----------------------------------------------------------------------------
# Speaker-dependent targets
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class PitchStats:
    mean: float
    std: float


def compute_speaker_stats(tracks: Iterable[tuple[int, np.ndarray]]) -> dict[int, PitchStats]:
    """Voiced-frame f0 mean/std per speaker from ``(speaker, f0)`` pairs."""
    voiced: dict[int, list[np.ndarray]] = {}
    for spk, f0 in tracks:
        f0 = np.asarray(f0, dtype=np.float64)
        voiced.setdefault(int(spk), []).append(f0[f0 > 0])
    stats = {}
    for spk in sorted(voiced):
        v = np.concatenate(voiced[spk])
        if v.size == 0:
            log.warning("speaker %d has no voiced frames; using mean 0, std 1", spk)
            stats[spk] = PitchStats(0.0, 1.0)
            continue
        stats[spk] = PitchStats(float(v.mean()), float(v.std()))
    return stats


def build_sd_targets(pitch, energy, stats: PitchStats) -> tuple[np.ndarray, np.ndarray]:
    """Standardized voiced pitch (0 when unvoiced) and unchanged energy."""
    f0 = np.asarray(pitch, dtype=np.float64)
    energy = np.asarray(energy, dtype=np.float64)
    if f0.shape != energy.shape:
        raise ValueError(f"pitch {f0.shape} and energy {energy.shape} differ in length")
    std = stats.std
    if not std > 0:
        log.warning("speaker pitch std is %r; using 1", std)
        std = 1.0
    out = np.where(f0 > 0, (f0 - stats.mean) / std, 0.0)
    return out, energy.copy()


# ----------------------------------------------------------------------------
# SSL feature providers
# ----------------------------------------------------------------------------

class MissingFeatureError(FileNotFoundError):
    pass


class StubSslProvider:
    """Deterministic pseudo-SSL encoder: a seeded random projection of
    per-frame standardized log-mel, at the 50 Hz mel frame rate.
    """

    mode = "stub"

    def __init__(self, seed: int = 0, dim: int = SSL_DIM):
        self.seed = seed
        self.dim = dim
        rng = np.random.default_rng([seed, dim])
        self._proj = rng.standard_normal((signal.N_MELS, dim)) / np.sqrt(signal.N_MELS)

    def features(self, samples: np.ndarray, utt_id: str | None = None) -> np.ndarray:
        mel = signal.mel_spectrogram(samples)
        mel = (mel - mel.mean(axis=1, keepdims=True)) / (mel.std(axis=1, keepdims=True) + 1e-5)
        return (mel @ self._proj).astype(np.float32)


class FileSslProvider:
    """Reads precomputed features from ``<root>/<utt_id>.f32`` records.

    With ``dim=None`` the width is taken from the first file read and every
    later file must match it.
    """

    mode = "file"

    def __init__(self, root: str | Path, dim: int | None = None):
        self.root = Path(root)
        self.dim = dim

    def path_for(self, utt_id: str) -> Path:
        return self.root / f"{utt_id}.f32"

    def features(self, samples: np.ndarray | None, utt_id: str | None = None) -> np.ndarray:
        if utt_id is None:
            raise ValueError("file provider needs an utterance id")
        path = self.path_for(utt_id)
        if not path.exists():
            raise MissingFeatureError(f"no SSL features for utterance {utt_id!r} at {path}")
        feats = signal.read_record(path, squeeze=False)
        if self.dim is None:
            self.dim = feats.shape[1]
        if feats.shape[1] != self.dim:
            raise ValueError(f"{path}: feature dim {feats.shape[1]} != expected {self.dim}")
        return feats

    def write(self, utt_id: str, feats: np.ndarray) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        signal.write_record(self.path_for(utt_id), feats)


def make_provider(mode: str, seed: int = 0, root: str | Path | None = None, dim: int | None = None):
    if mode == "stub":
        return StubSslProvider(seed, dim or SSL_DIM)
    if mode == "file":
        if root is None:
            raise ValueError("file provider needs a feature directory")
        return FileSslProvider(root, dim)
    raise ValueError(f"unknown SSL provider mode {mode!r}")


def perturb_seed(seed: int, utt_id: str) -> int:
    digest = hashlib.sha256(f"{seed}:{utt_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def ssl_features(samples, provider, utt_id: str | None = None, cfg: signal.PerturbConfig | None = None,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """SSL features of the perturbed waveform (file mode reads the cache as is)."""
    if provider.mode == "file":
        return provider.features(samples, utt_id)
    if cfg is not None:
        samples = signal.perturb(samples, cfg, rng)
    return provider.features(samples, utt_id)


def trim_to(features: np.ndarray, n_frames: int) -> np.ndarray:
    """Cut or zero-pad ``features`` to exactly ``n_frames`` rows."""
    if abs(features.shape[0] - n_frames) > 2:
        log.warning("feature length %d differs from %d frames by more than 2", features.shape[0], n_frames)
    if features.shape[0] >= n_frames:
        return features[:n_frames]
    pad = np.zeros((n_frames - features.shape[0],) + features.shape[1:], dtype=features.dtype)
    return np.concatenate([features, pad])


def build_linguistic_targets(samples, cfg: signal.PerturbConfig, provider,
                             encoder: Callable[[np.ndarray], np.ndarray], n_frames: int,
                             utt_id: str | None = None, rng=None) -> np.ndarray:
    """Encode perturbed-audio SSL features and trim them to the mel length."""
    feats = ssl_features(samples, provider, utt_id, cfg, rng)
    return trim_to(np.asarray(encoder(feats)), n_frames)


def speaker_stats_to_json(stats: Mapping[int, PitchStats]) -> dict:
    return {str(k): {"mean": v.mean, "std": v.std} for k, v in stats.items()}


def speaker_stats_from_json(data: Mapping) -> dict[int, PitchStats]:
    return {int(k): PitchStats(float(v["mean"]), float(v["std"])) for k, v in data.items()}
