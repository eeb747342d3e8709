"""Monotonic text-to-mel alignment: soft attention, forward-sum marginal,
Viterbi hard durations and the binarization term.

Soft alignments are handled as log-probabilities ``log_attn`` of shape
(B, T, L). Padded token columns carry a large finite negative value rather
than -inf so that log-space recursions stay differentiable.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

NEG = -1e4


class InfeasibleAlignmentError(ValueError):
    pass


def soft_alignment(queries: torch.Tensor, keys: torch.Tensor, key_mask: torch.Tensor | None = None,
                   log_prior: torch.Tensor | None = None) -> torch.Tensor:
    """log softmax over tokens of -||q_t - k_i||^2 (optionally plus a log prior).

    queries (B, T, D), keys (B, L, D), key_mask (B, L) True on real tokens.
    """
    dist = (queries.unsqueeze(2) - keys.unsqueeze(1)).pow(2).sum(-1)
    energies = -dist
    if log_prior is not None:
        energies = energies + log_prior
    if key_mask is not None:
        energies = energies.masked_fill(~key_mask[:, None, :], float("-inf"))
    log_attn = F.log_softmax(energies, dim=-1)
    if key_mask is not None:
        log_attn = torch.where(key_mask[:, None, :], log_attn, torch.full_like(log_attn, NEG))
    return log_attn


def diagonal_log_prior(n_frames: int, n_tokens: int, width: float = 0.2) -> np.ndarray:
    """Gaussian band around the straight diagonal; std of ``width * n_frames`` frames."""
    t = np.arange(n_frames)[:, None] + 0.5
    centers = (np.arange(n_tokens)[None, :] + 0.5) * n_frames / n_tokens
    sigma = max(width * n_frames, 1.0)
    return -0.5 * ((t - centers) / sigma) ** 2


def batch_log_prior(frame_lens, token_lens, width: float = 0.2) -> torch.Tensor:
    t_max, l_max = int(max(frame_lens)), int(max(token_lens))
    out = np.zeros((len(frame_lens), t_max, l_max))
    for b, (t, l) in enumerate(zip(frame_lens, token_lens)):
        out[b, :t, :l] = diagonal_log_prior(int(t), int(l), width)
    return torch.from_numpy(out)


def forward_sum_loss(log_attn: torch.Tensor, frame_lens, token_lens) -> torch.Tensor:
    """Per-item -log sum over monotonic complete paths, divided by T. Shape (B,)."""
    frame_lens = torch.as_tensor(frame_lens, device=log_attn.device)
    token_lens = torch.as_tensor(token_lens, device=log_attn.device)
    if torch.any(frame_lens < token_lens):
        bad = int(torch.nonzero(frame_lens < token_lens)[0])
        raise InfeasibleAlignmentError(
            f"item {bad}: {int(frame_lens[bad])} frames cannot cover {int(token_lens[bad])} tokens")
    bsz, t_max, l_max = log_attn.shape
    neg = log_attn.new_full((bsz, 1), NEG)
    alpha = torch.cat([log_attn[:, 0, :1], log_attn.new_full((bsz, l_max - 1), NEG)], dim=1)
    for t in range(1, t_max):
        shifted = torch.cat([neg, alpha[:, :-1]], dim=1)
        step = torch.logaddexp(alpha, shifted) + log_attn[:, t]
        alpha = torch.where((t < frame_lens)[:, None], step, alpha)
    final = alpha.gather(1, (token_lens - 1)[:, None])[:, 0]
    return -final / frame_lens.to(log_attn.dtype)


def viterbi_durations(log_attn: np.ndarray) -> np.ndarray:
    """Most probable monotonic path through one (T, L) matrix, as frames per token.

    Every token receives at least one frame.
    """
    la = np.asarray(log_attn, dtype=np.float64)
    n_frames, n_tokens = la.shape
    if n_frames < n_tokens:
        raise InfeasibleAlignmentError(f"{n_frames} frames cannot cover {n_tokens} tokens")
    score = np.full((n_frames, n_tokens), -np.inf)
    advanced = np.zeros((n_frames, n_tokens), dtype=bool)
    score[0, 0] = la[0, 0]
    for t in range(1, n_frames):
        stay = score[t - 1]
        move = np.concatenate([[-np.inf], score[t - 1, :-1]])
        advanced[t] = move > stay
        score[t] = np.maximum(stay, move) + la[t]
    durations = np.zeros(n_tokens, dtype=np.int64)
    j = n_tokens - 1
    for t in range(n_frames - 1, -1, -1):
        durations[j] += 1
        if t > 0 and advanced[t, j]:
            j -= 1
    return durations


def batch_viterbi(log_attn: torch.Tensor, frame_lens, token_lens) -> list[np.ndarray]:
    la = log_attn.detach().cpu().numpy()
    return [viterbi_durations(la[b, :int(t), :int(l)]) for b, (t, l) in enumerate(zip(frame_lens, token_lens))]


def durations_to_path(durations) -> np.ndarray:
    return np.repeat(np.arange(len(durations)), durations)


def binarization_loss(log_attn: torch.Tensor, durations, frame_lens) -> torch.Tensor:
    """Per-item -(1/T) sum_t log A[t, token(t)] along the hard path. Shape (B,)."""
    losses = []
    for b, d in enumerate(durations):
        t = int(frame_lens[b])
        path = torch.as_tensor(durations_to_path(d), device=log_attn.device)
        picked = log_attn[b, torch.arange(t, device=log_attn.device), path]
        losses.append(-picked.sum() / t)
    return torch.stack(losses)
