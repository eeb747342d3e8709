"""Read-only model diagnostics: projection images, PCA scatters, the
between-speaker variance ratio and alignment dumps.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import align
from .model import CrossLingualTTS


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """8-bit binary PGM; ``image`` is rescaled from its own min/max."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def spectrogram_image(mel: np.ndarray) -> np.ndarray:
    """(T, bins) -> image with low frequencies at the bottom."""
    return np.asarray(mel).T[::-1]


def pca_2d(points: np.ndarray) -> np.ndarray:
    """Project rows onto the two leading principal axes; signs fixed so each axis' largest loading is positive."""
    x = np.asarray(points, dtype=np.float64)
    x = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    axes = vt[:2]
    signs = np.sign(axes[np.arange(axes.shape[0]), np.argmax(np.abs(axes), axis=1)])
    axes = axes * np.where(signs == 0, 1.0, signs)[:, None]
    out = x @ axes.T
    if out.shape[1] < 2:
        out = np.pad(out, ((0, 0), (0, 2 - out.shape[1])))
    return out


def scatter_image(xy: np.ndarray, labels: Sequence[int], size: int = 256, radius: int = 3) -> np.ndarray:
    """White canvas, one filled square per point, gray level by label."""
    xy = np.asarray(xy, dtype=np.float64)
    img = np.full((size, size), 255.0)
    span = np.ptp(xy, axis=0)
    span[span == 0] = 1.0
    pix = (xy - xy.min(axis=0)) / span * (size - 1 - 2 * radius) + radius
    levels = sorted(set(labels))
    shade = {lab: 200.0 * i / max(len(levels) - 1, 1) for i, lab in enumerate(levels)}
    for (px, py), lab in zip(pix, labels):
        c, r = int(round(px)), size - 1 - int(round(py))
        img[max(r - radius, 0):r + radius + 1, max(c - radius, 0):c + radius + 1] = shade[lab]
    img[0, 0], img[-1, -1] = 0.0, 255.0
    return img


def between_variance(features: np.ndarray, labels: Sequence[int]) -> float:
    """Trace of the between-group covariance: variance of group means around their average."""
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    means = np.stack([x[labels == g].mean(axis=0) for g in np.unique(labels)])
    return float(((means - means.mean(axis=0)) ** 2).sum(axis=1).mean())


def disentanglement_ratio(ld_pooled: np.ndarray, sd_pooled: np.ndarray, speakers: Sequence[int]) -> float:
    """Between-speaker variance of pooled LD features over that of pooled SD features."""
    denom = between_variance(sd_pooled, speakers)
    num = between_variance(ld_pooled, speakers)
    return num / denom if denom > 0 else float("inf")


@dataclass
class Probe:
    language: int
    tokens: list[int]
    text: str


@dataclass
class ProbeResult:
    sentence: int
    speaker: int
    mel: np.ndarray
    mel_ld: np.ndarray
    mel_sd: np.ndarray
    durations: np.ndarray


def run_probes(model: CrossLingualTTS, probes: Sequence[Probe], speakers: Sequence[int]) -> list[ProbeResult]:
    results = []
    for s, probe in enumerate(probes):
        for spk in speakers:
            out = model.synthesize(probe.tokens, probe.language, spk)
            results.append(ProbeResult(s, spk, out["mel"].numpy(), out["mel_ld"].numpy(), out["mel_sd"].numpy(),
                                       out["durations"].numpy()))
    return results


def swap_effect(model: CrossLingualTTS, probe: Probe, spk_a: int, spk_b: int) -> tuple[float, float]:
    """Mean |change| of the LD and SD projections when only the speaker id changes.

    Durations are fixed to speaker A's prediction so both passes share the frame grid.
    """
    a = model.synthesize(probe.tokens, probe.language, spk_a)
    b = model.synthesize(probe.tokens, probe.language, spk_b, durations=a["durations"])
    ld = float((a["mel_ld"] - b["mel_ld"]).abs().mean())
    sd = float((a["mel_sd"] - b["mel_sd"]).abs().mean())
    return ld, sd


def swap_grid(model: CrossLingualTTS, probes: Sequence[Probe], speakers: Sequence[int]) -> dict:
    """Swap effects summed over every probe and ordered speaker pair."""
    ld_total = sd_total = 0.0
    for probe in probes:
        for a, b in itertools.permutations(speakers, 2):
            ld, sd = swap_effect(model, probe, a, b)
            ld_total += ld
            sd_total += sd
    ratio = sd_total / ld_total if ld_total > 0 else math.inf
    return {"swap_ld": ld_total, "swap_sd": sd_total, "swap_ratio": ratio}


def write_bundle(out: str | Path, results: Sequence[ProbeResult], extra: dict | None = None) -> dict:
    """Images, scatter points and the ratio for a probe grid; returns a summary dict."""
    out = Path(out)
    (out / "ld").mkdir(parents=True, exist_ok=True)
    (out / "sd").mkdir(parents=True, exist_ok=True)
    for r in results:
        write_pgm(out / "ld" / f"s{r.sentence}_spk{r.speaker}.pgm", spectrogram_image(r.mel_ld))
        write_pgm(out / "sd" / f"s{r.sentence}_spk{r.speaker}.pgm", spectrogram_image(r.mel_sd))
    speakers = [r.speaker for r in results]
    ld_pooled = np.stack([r.mel_ld.mean(axis=0) for r in results])
    sd_pooled = np.stack([r.mel_sd.mean(axis=0) for r in results])
    mel_pooled = np.stack([r.mel.mean(axis=0) for r in results])
    for name, feats in (("ld", ld_pooled), ("mel", mel_pooled)):
        xy = pca_2d(feats)
        lines = ["sentence\tspeaker\tpc1\tpc2"]
        lines += [f"{r.sentence}\t{r.speaker}\t{p[0]!r}\t{p[1]!r}" for r, p in zip(results, xy)]
        (out / f"scatter_{name}.tsv").write_text("\n".join(lines) + "\n")
        write_pgm(out / f"scatter_{name}.pgm", scatter_image(xy, speakers))
    rho = disentanglement_ratio(ld_pooled, sd_pooled, speakers)
    summary = {
        "rho": rho,
        "between_ld": between_variance(ld_pooled, speakers),
        "between_sd": between_variance(sd_pooled, speakers),
        "probes": len(results),
        **(extra or {}),
    }
    (out / "report.txt").write_text("".join(f"{k}\t{v!r}\n" for k, v in summary.items()))
    return summary


@torch.no_grad()
def dump_alignment(model: CrossLingualTTS, tokens: np.ndarray, mel: np.ndarray, out_stem: str | Path) -> np.ndarray:
    """Soft alignment image with the hard path overlaid, plus a duration listing."""
    was_training = model.training
    model.eval()
    try:
        dtype = next(model.parameters()).dtype
        tok = torch.as_tensor(tokens, dtype=torch.long)[None]
        m = torch.as_tensor(mel, dtype=dtype)[None]
        log_attn = model.align(tok, m, torch.ones_like(tok, dtype=torch.bool),
                               torch.ones(m.shape[:2], dtype=torch.bool))[0].numpy()
    finally:
        model.train(was_training)
    durations = align.viterbi_durations(log_attn)
    img = np.exp(log_attn).T[::-1].copy()
    path = align.durations_to_path(durations)
    img[img.shape[0] - 1 - path, np.arange(len(path))] = 1.0
    write_pgm(f"{out_stem}.pgm", img)
    Path(f"{out_stem}.txt").write_text("".join(f"{i}\t{int(d)}\n" for i, d in enumerate(durations)))
    return durations
