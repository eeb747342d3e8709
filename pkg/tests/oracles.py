"""Independent reference implementations used as test oracles.

These are deliberately naive: explicit enumeration, explicit loops, no shared
code with the package.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def monotonic_paths(n_frames: int, n_tokens: int):
    """Every frame->token map that starts at token 0, ends at the last token
    and advances by 0 or 1 per frame (so each token gets >= 1 frame)."""
    for steps in itertools.product((0, 1), repeat=n_frames - 1):
        path = [0]
        for s in steps:
            path.append(path[-1] + s)
        if path[-1] == n_tokens - 1:
            yield path


def path_log_score(log_attn: np.ndarray, path) -> float:
    return float(sum(log_attn[t, i] for t, i in enumerate(path)))


def forward_sum_oracle(attn: np.ndarray) -> float:
    n_frames, n_tokens = attn.shape
    total = sum(math.prod(attn[t, i] for t, i in enumerate(p)) for p in monotonic_paths(n_frames, n_tokens))
    return -math.log(total) / n_frames


def best_path_score(log_attn: np.ndarray) -> float:
    n_frames, n_tokens = log_attn.shape
    return max(path_log_score(log_attn, p) for p in monotonic_paths(n_frames, n_tokens))


def path_to_durations(path, n_tokens: int) -> list[int]:
    return [sum(1 for i in path if i == j) for j in range(n_tokens)]


def ctc_collapse(labels) -> tuple:
    out = []
    prev = None
    for x in labels:
        if x != prev and x != 0:
            out.append(x)
        prev = x
    return tuple(out)


def ctc_oracle(probs: np.ndarray, target) -> float:
    """-log of the summed probability of every frame labelling that collapses to ``target``."""
    n_frames, n_classes = probs.shape
    target = tuple(target)
    total = 0.0
    for labels in itertools.product(range(n_classes), repeat=n_frames):
        if ctc_collapse(labels) == target:
            total += math.prod(probs[t, c] for t, c in enumerate(labels))
    return -math.log(total)


def segment_means(frames, durations) -> list[float]:
    """Per-token means via an explicit frame->token label array."""
    labels = []
    for i, d in enumerate(durations):
        labels += [i] * int(d)
    labels = np.array(labels)
    x = np.asarray(frames, dtype=np.float64)
    out = []
    prev = 0.0
    for i in range(len(durations)):
        sel = x[labels == i] if labels.size else np.array([])
        if sel.size:
            prev = float(np.sum(sel) / sel.size)
        out.append(prev)
    return out


def binarize_oracle(values) -> list[int]:
    out = []
    for i, v in enumerate(values):
        out.append(0 if i == 0 else int(values[i - 1] < v))
    return out


def bce_oracle(logits, target) -> float:
    total = 0.0
    for z, t in zip(logits, target):
        p = 1.0 / (1.0 + math.exp(-z))
        p = min(max(p, 1e-7), 1 - 1e-7)
        total += -(t * math.log(p) + (1 - t) * math.log(1 - p))
    return total


def central_difference(f, x: np.ndarray, index, eps: float = 1e-6) -> float:
    x = x.copy()
    orig = x[index]
    x[index] = orig + eps
    up = f(x)
    x[index] = orig - eps
    down = f(x)
    return (up - down) / (2 * eps)


def torch_fd_check(loss_fn, tensors, n_coords: int, rng: np.random.Generator, eps: float = 1e-6,
                   floor: float = 1e-8) -> tuple[float, int]:
    """Compare autograd with central differences on randomly sampled coordinates.

    ``tensors`` are float64 leaf tensors with requires_grad; ``loss_fn()`` returns a scalar.
    Returns (max relative error, number of coordinates checked).
    """
    import torch

    for t in tensors:
        t.grad = None
    loss_fn().backward()
    grads = [t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t) for t in tensors]
    sizes = np.array([t.numel() for t in tensors], dtype=np.float64)
    worst = 0.0
    for _ in range(n_coords):
        k = int(rng.choice(len(tensors), p=sizes / sizes.sum()))
        flat_idx = int(rng.integers(tensors[k].numel()))
        flat = tensors[k].data.view(-1)
        orig = flat[flat_idx].item()
        with torch.no_grad():
            flat[flat_idx] = orig + eps
            up = float(loss_fn())
            flat[flat_idx] = orig - eps
            down = float(loss_fn())
            flat[flat_idx] = orig
        numeric = (up - down) / (2 * eps)
        analytic = float(grads[k].view(-1)[flat_idx])
        rel = abs(numeric - analytic) / max(abs(numeric), abs(analytic), floor)
        worst = max(worst, rel)
    return worst, n_coords
