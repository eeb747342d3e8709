import numpy as np

from dtts.corpus import CachedUtterance


def fake_utterance(rng: np.random.Generator, n_tokens: int, n_frames: int, *, vocab: int = 8, ssl_dim: int = 8,
                   language: int = 0, speaker: int = 0, utt_id: str = "u") -> CachedUtterance:
    """Random but well-formed utterance record (no immediate token repeats, so CTC is feasible)."""
    tokens = [int(rng.integers(1, vocab + 1))]
    while len(tokens) < n_tokens:
        t = int(rng.integers(1, vocab + 1))
        if t != tokens[-1]:
            tokens.append(t)
    pitch = rng.uniform(90, 260, n_frames)
    pitch[rng.random(n_frames) < 0.2] = 0.0
    mel = rng.normal(-4.0, 1.5, (n_frames, 80))
    sd = np.where(pitch > 0, (pitch - 170) / 50, 0.0)
    return CachedUtterance(utt_id, np.array(tokens), language, speaker, mel.astype(np.float32),
                           pitch.astype(np.float32), mel.mean(1).astype(np.float32), sd.astype(np.float32),
                           rng.standard_normal((n_frames, ssl_dim)).astype(np.float32))
