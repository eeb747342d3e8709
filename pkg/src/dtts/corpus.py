"""Manifests, the synthetic toy corpus, feature-cache preparation and loading."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import signal, targets

log = logging.getLogger(__name__)

PREP_VERSION = "1"
CACHE_ENV = "DTTS_CACHE"
RECORDS = ("mel", "pitch", "energy", "ssl")


class ManifestError(ValueError):
    pass


@dataclass
class Utterance:
    utt_id: str
    wav: Path
    tokens: list[str]
    language: int
    speaker: int


@dataclass
class Vocabulary:
    """Symbol <-> id map; id 0 is padding and doubles as the CTC blank."""

    symbols: list[str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ManifestError("vocabulary has duplicate symbols")
        self.index = {s: i + 1 for i, s in enumerate(self.symbols)}

    def __len__(self):
        return len(self.symbols) + 1

    def encode(self, tokens) -> list[int]:
        unknown = [t for t in tokens if t not in self.index]
        if unknown:
            raise ManifestError(f"unknown IPA symbol(s): {' '.join(unknown)}")
        return [self.index[t] for t in tokens]

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln.strip() for ln in lines if ln.strip() and not ln.startswith("#")])

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.symbols) + "\n", encoding="utf-8")


def resolve_cache(path: str | Path | None) -> Path:
    env = os.environ.get(CACHE_ENV)
    if env:
        return Path(env)
    if path is None:
        raise ValueError(f"no cache directory given and {CACHE_ENV} is not set")
    return Path(path)


def read_manifest(path: str | Path) -> list[Utterance]:
    """Tab-separated: id, wav path, space-separated IPA tokens, language id, speaker id."""
    path = Path(path)
    utts: list[Utterance] = []
    seen: set[str] = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 5:
            raise ManifestError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(cols)}")
        utt_id, wav, ipa, lang, spk = (c.strip() for c in cols)
        if utt_id in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate utterance id {utt_id!r}")
        seen.add(utt_id)
        wav_path = Path(wav)
        if not wav_path.is_absolute():
            wav_path = path.parent / wav_path
        try:
            utts.append(Utterance(utt_id, wav_path, ipa.split(), int(lang), int(spk)))
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: bad language/speaker id") from exc
    for kind in ("language", "speaker"):
        ids = sorted({getattr(u, kind) for u in utts})
        if ids != list(range(len(ids))):
            raise ManifestError(f"{kind} ids must be dense 0..n-1, got {ids}")
    return utts


def write_manifest(path: str | Path, utts: list[Utterance]) -> None:
    root = Path(path).parent
    lines = []
    for u in utts:
        wav = os.path.relpath(u.wav, root)
        lines.append("\t".join([u.utt_id, wav, " ".join(u.tokens), str(u.language), str(u.speaker)]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def split_ids(utts: list[Utterance], seed: int = 0, fractions=(0.8, 0.1, 0.1)) -> dict[str, list[str]]:
    """Per-speaker train/valid/test split."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {fractions}")
    out = {"train": [], "valid": [], "test": []}
    for spk in sorted({u.speaker for u in utts}):
        ids = sorted(u.utt_id for u in utts if u.speaker == spk)
        order = np.random.default_rng([seed, spk]).permutation(len(ids))
        ids = [ids[i] for i in order]
        n_train = int(round(fractions[0] * len(ids)))
        n_valid = int(round(fractions[1] * len(ids)))
        out["train"] += ids[:n_train]
        out["valid"] += ids[n_train:n_train + n_valid]
        out["test"] += ids[n_train + n_valid:]
    return {k: sorted(v) for k, v in out.items()}


# ----------------------------------------------------------------------------
# Preparation
# ----------------------------------------------------------------------------

def content_hash(utt: Utterance, provider_mode: str, seed: int) -> str:
    h = hashlib.sha256()
    h.update(Path(utt.wav).read_bytes())
    h.update(json.dumps([PREP_VERSION, utt.tokens, utt.language, utt.speaker, provider_mode, seed]).encode())
    return h.hexdigest()


def read_meta(path: Path) -> dict[str, str]:
    meta = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    return meta


def _write_meta(path: Path, meta: dict) -> None:
    path.write_text("".join(f"{k}={v}\n" for k, v in meta.items()), encoding="utf-8")


def _cached(utt_dir: Path, digest: str) -> bool:
    meta = utt_dir / "meta.txt"
    if not meta.exists() or not all((utt_dir / f"{r}.f32").exists() for r in RECORDS):
        return False
    return read_meta(meta).get("hash") == digest


def prepare_utterance(utt: Utterance, vocab: Vocabulary, utt_dir: Path, provider, seed: int,
                      perturb_cfg: signal.PerturbConfig, digest: str) -> None:
    token_ids = vocab.encode(utt.tokens)
    samples = signal.load_wav(utt.wav)
    mel = signal.mel_spectrogram(samples)
    f0 = signal.extract_pitch(samples)
    energy = signal.frame_energy(mel)
    rng = np.random.default_rng(targets.perturb_seed(seed, utt.utt_id))
    ssl = targets.ssl_features(samples, provider, utt.utt_id, perturb_cfg, rng)
    if mel.shape[0] < len(token_ids):
        raise ManifestError(f"{mel.shape[0]} frames is too short for {len(token_ids)} tokens")
    utt_dir.mkdir(parents=True, exist_ok=True)
    signal.write_record(utt_dir / "mel.f32", mel)
    signal.write_record(utt_dir / "pitch.f32", f0)
    signal.write_record(utt_dir / "energy.f32", energy)
    signal.write_record(utt_dir / "ssl.f32", ssl)
    _write_meta(utt_dir / "meta.txt", {
        "id": utt.utt_id,
        "T": mel.shape[0],
        "L": len(token_ids),
        "speaker": utt.speaker,
        "language": utt.language,
        "tokens": " ".join(utt.tokens),
        "hash": digest,
    })


@dataclass
class PrepareReport:
    processed: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    failed: dict[str, str] = field(default_factory=dict)


def prepare(manifest: str | Path, out: str | Path, provider_mode: str = "stub", seed: int = 0,
            vocab_path: str | Path | None = None, ssl_dir: str | Path | None = None,
            perturb_cfg: signal.PerturbConfig | None = None) -> PrepareReport:
    """Build the per-utterance feature cache plus corpus-level speaker stats and splits."""
    manifest = Path(manifest)
    out = Path(out)
    utts = read_manifest(manifest)
    vocab = Vocabulary.load(vocab_path or manifest.parent / "vocab.txt")
    provider = targets.make_provider(provider_mode, seed, ssl_dir or manifest.parent / "ssl")
    perturb_cfg = perturb_cfg or signal.PerturbConfig(seed=seed)
    out.mkdir(parents=True, exist_ok=True)

    report = PrepareReport()
    for utt in utts:
        utt_dir = out / utt.utt_id
        try:
            digest = content_hash(utt, provider_mode, seed)
            if _cached(utt_dir, digest):
                report.skipped.append(utt.utt_id)
                continue
            prepare_utterance(utt, vocab, utt_dir, provider, seed, perturb_cfg, digest)
            report.processed.append(utt.utt_id)
        except Exception as exc:  # reported per utterance, run continues
            log.error("%s: %s", utt.utt_id, exc)
            report.failed[utt.utt_id] = str(exc)

    good = [u for u in utts if u.utt_id not in report.failed]
    if not good:
        return report
    dims = {signal.read_record(out / u.utt_id / "ssl.f32", squeeze=False).shape[1] for u in good}
    if len(dims) != 1:
        raise ManifestError(f"cached SSL features disagree in width: {sorted(dims)}")
    stats = targets.compute_speaker_stats(
        (u.speaker, signal.read_record(out / u.utt_id / "pitch.f32")) for u in good)
    _write_if_changed(out / "speakers.json", json.dumps(targets.speaker_stats_to_json(stats), indent=1, sort_keys=True))
    _write_if_changed(out / "vocab.txt", "\n".join(vocab.symbols) + "\n")
    _write_if_changed(out / "corpus.json", json.dumps({
        "utterances": [u.utt_id for u in good],
        "n_languages": 1 + max((u.language for u in utts), default=0),
        "n_speakers": 1 + max((u.speaker for u in utts), default=0),
        "ssl_dim": dims.pop(),
        "provider": provider_mode,
    }, indent=1, sort_keys=True))
    splits = split_ids(good, seed)
    (out / "splits").mkdir(exist_ok=True)
    for name, ids in splits.items():
        _write_if_changed(out / "splits" / f"{name}.txt", "".join(i + "\n" for i in ids))
    return report


def _write_if_changed(path: Path, text: str) -> None:
    if path.exists() and path.read_text(encoding="utf-8") == text:
        return
    path.write_text(text, encoding="utf-8")


# ----------------------------------------------------------------------------
# Loading
# ----------------------------------------------------------------------------

@dataclass
class CachedUtterance:
    utt_id: str
    token_ids: np.ndarray
    language: int
    speaker: int
    mel: np.ndarray
    pitch: np.ndarray
    energy: np.ndarray
    sd_pitch: np.ndarray
    ssl: np.ndarray


class Corpus:
    """In-memory view of a prepared cache."""

    def __init__(self, cache: str | Path, split: str = "all"):
        cache = Path(cache)
        if not (cache / "corpus.json").exists():
            raise FileNotFoundError(f"{cache} is not a prepared cache; run `dtts prepare` first")
        self.root = cache
        info = json.loads((cache / "corpus.json").read_text())
        self.vocab = Vocabulary.load(cache / "vocab.txt")
        self.n_languages = info["n_languages"]
        self.n_speakers = info["n_speakers"]
        self.ssl_dim = info["ssl_dim"]
        self.stats = targets.speaker_stats_from_json(json.loads((cache / "speakers.json").read_text()))
        ids = info["utterances"] if split == "all" else (cache / "splits" / f"{split}.txt").read_text().split()
        self.items = [self._load(cache / i) for i in ids]

    def _load(self, d: Path) -> CachedUtterance:
        meta = read_meta(d / "meta.txt")
        pitch = signal.read_record(d / "pitch.f32")
        energy = signal.read_record(d / "energy.f32")
        spk = int(meta["speaker"])
        sd_pitch, _ = targets.build_sd_targets(pitch, energy, self.stats[spk])
        return CachedUtterance(
            utt_id=meta["id"],
            token_ids=np.asarray(self.vocab.encode(meta["tokens"].split()), dtype=np.int64),
            language=int(meta["language"]),
            speaker=spk,
            mel=signal.read_record(d / "mel.f32", squeeze=False),
            pitch=pitch,
            energy=energy,
            sd_pitch=sd_pitch.astype(np.float32),
            ssl=signal.read_record(d / "ssl.f32", squeeze=False),
        )

    def __len__(self):
        return len(self.items)


# ----------------------------------------------------------------------------
# Synthetic toy corpus
# ----------------------------------------------------------------------------

# symbol: (F1, F2, F3 in Hz, tone in semitones, level in dB); None formants = noise
TOY_LANGUAGES = [
    {
        "a": (800, 1300, 2600, 0.0, 0.0),
        "e": (450, 2000, 2700, 4.0, -3.0),
        "i": (300, 2300, 3000, 8.0, -6.0),
        "o": (500, 900, 2500, -4.0, -2.0),
        "u": (320, 800, 2300, -8.0, -8.0),
        "s": None,
    },
    {
        "ɑ": (750, 1100, 2500, -2.0, -1.0),
        "ɛ": (550, 1800, 2600, 6.0, -5.0),
        "ɪ": (400, 2100, 2900, 2.0, -3.0),
        "ɔ": (550, 850, 2400, -6.0, 0.0),
        "ʊ": (380, 1000, 2300, 10.0, -7.0),
        "y": (300, 1900, 2400, -10.0, -4.0),
        "ʃ": None,
    },
]

# (language, base f0, formant scale, spectral tilt dB per kHz)
TOY_SPEAKERS = [
    (0, 110.0, 1.00, -2.0),
    (0, 210.0, 1.15, -4.0),
    (1, 135.0, 0.95, -1.0),
    (1, 250.0, 1.20, -3.0),
]


def toy_vocabulary() -> Vocabulary:
    return Vocabulary([s for lang in TOY_LANGUAGES for s in lang])


def _smooth(x: np.ndarray, width: int) -> np.ndarray:
    kernel = np.hanning(width)
    kernel /= kernel.sum()
    padded = np.pad(x, (width // 2, width - width // 2 - 1), mode="edge")
    return np.convolve(padded, kernel, mode="valid")


def synth_toy_utterance(tokens: list[str], language: int, speaker: int, durations: list[int],
                        rng: np.random.Generator) -> np.ndarray:
    """Harmonic vowels with formant envelopes and band-limited noise fricatives."""
    sr, hop = signal.SAMPLE_RATE, signal.HOP_LENGTH
    lang = TOY_LANGUAGES[language]
    _, base_f0, fscale, tilt = TOY_SPEAKERS[speaker]
    n = sum(durations) * hop
    f0 = np.empty(n)
    level = np.empty(n)
    voiced = np.empty(n)
    formants = np.empty((3, n))
    pos = 0
    last_f = (500.0, 1500.0, 2500.0)
    last_tone = 0.0
    for tok, dur in zip(tokens, durations):
        seg = slice(pos, pos + dur * hop)
        spec = lang[tok]
        if spec is None:
            f0[seg] = base_f0 * 2 ** (last_tone / 12)
            level[seg] = 10 ** (-6.0 / 20)
            voiced[seg] = 0.0
            formants[:, seg] = np.array(last_f)[:, None]
        else:
            f1, f2, f3, tone, db = spec
            last_f = (f1 * fscale, f2 * fscale, f3 * fscale)
            last_tone = tone
            f0[seg] = base_f0 * 2 ** (tone / 12)
            level[seg] = 10 ** (db / 20)
            voiced[seg] = 1.0
            formants[:, seg] = np.array(last_f)[:, None]
        pos += dur * hop
    glide = int(0.03 * sr)
    f0 = _smooth(f0, glide)
    level = _smooth(level, glide // 2)
    voiced = _smooth(voiced, glide // 3)
    formants = np.stack([_smooth(f, glide) for f in formants])

    phase = 2 * np.pi * np.cumsum(f0) / sr
    harmonic = np.zeros(n)
    for k in range(1, int(7600 / f0.min()) + 1):
        fk = k * f0
        # vocal-tract floor between formants plus a -6 dB/octave source, so the
        # fundamental never vanishes when a formant sits on the second harmonic
        gain = np.full(n, 0.2)
        for j, bw in enumerate((90.0, 120.0, 180.0)):
            gain += (0.6 ** j) / (1.0 + ((fk - formants[j]) / bw) ** 2)
        gain *= 10 ** (tilt * fk / 1000.0 / 20.0) / k
        gain[fk > 7600] = 0.0
        harmonic += gain * np.sin(k * phase)
    harmonic /= max(np.max(np.abs(harmonic)), 1e-9)

    noise = rng.standard_normal(n)
    b = np.array([1.0, -0.95])
    fricative = np.convolve(noise, b, mode="same")
    fricative /= np.max(np.abs(fricative))

    fade = np.minimum(1.0, np.minimum(np.arange(n), np.arange(n)[::-1]) / (0.01 * sr))
    y = level * fade * (voiced * harmonic + (1.0 - voiced) * 0.5 * fricative)
    y = 0.5 * y + 1e-3 * rng.standard_normal(n)
    return y


def make_toy_corpus(out: str | Path, per_speaker: int = 8, seed: int = 0) -> Path:
    """Write wavs, ``manifest.tsv`` and ``vocab.txt`` for the synthetic corpus; returns the manifest path."""
    out = Path(out)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    utts: list[Utterance] = []
    for spk, (language, *_rest) in enumerate(TOY_SPEAKERS):
        symbols = list(TOY_LANGUAGES[language])
        for k in range(per_speaker):
            n_tok = int(rng.integers(5, 9))
            tokens: list[str] = []
            while len(tokens) < n_tok:
                s = symbols[int(rng.integers(len(symbols)))]
                if tokens and s == tokens[-1]:
                    continue
                if TOY_LANGUAGES[language][s] is None and (not tokens or TOY_LANGUAGES[language][tokens[-1]] is None):
                    continue
                tokens.append(s)
            durations = [int(rng.integers(3, 7)) if TOY_LANGUAGES[language][t] is None else int(rng.integers(4, 8))
                         for t in tokens]
            samples = synth_toy_utterance(tokens, language, spk, durations, rng)
            utt_id = f"s{spk}_{k:03d}"
            wav = out / "wav" / f"{utt_id}.wav"
            signal.save_wav(wav, samples)
            utts.append(Utterance(utt_id, wav, tokens, language, spk))
    write_manifest(out / "manifest.tsv", utts)
    toy_vocabulary().save(out / "vocab.txt")
    return out / "manifest.tsv"
