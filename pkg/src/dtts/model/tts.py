"""Decoupled language-dependent / speaker-dependent acoustic model."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import torch
import torch.nn.functional as F
from torch import nn

from ..align import soft_alignment
from .conformer import ConformerStack, masked
from .norm import SpeakerCondition, batch_shuffle
from .predictors import LinguisticEncoder, MaskedConv1d, TextPredictor, VariancePredictor


@dataclass
class ModelConfig:
    n_tokens: int
    n_languages: int
    n_speakers: int
    dim: int = 192
    ld_encoder_blocks: int = 4
    ld_decoder_blocks: int = 2
    sd_encoder_blocks: int = 2
    sd_decoder_blocks: int = 2
    text_predictor_blocks: int = 2
    ff_mult: int = 4
    conv_kernel: int = 7
    dsln_kernel: int = 3
    variance_filters: int = 192
    dropout: float = 0.1
    ssl_dim: int = 1024
    n_mels: int = 80
    aligner_scale: float = 0.1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


def length_regulate(h: torch.Tensor, durations: torch.Tensor, n_frames: int | None = None):
    """Repeat token i of each item ``durations[b, i]`` times; returns (frames, frame_mask).

    h is (B, L, C) or (L, C).
    """
    squeeze = h.ndim == 2
    if squeeze:
        h, durations = h.unsqueeze(0), torch.as_tensor(durations).unsqueeze(0)
    durations = torch.as_tensor(durations, dtype=torch.long, device=h.device)
    if torch.any(durations < 0):
        raise ValueError("durations must be non-negative")
    lens = durations.sum(1)
    if n_frames is not None and (squeeze or lens.numel() == 1) and int(lens[0]) != n_frames:
        raise ValueError(f"durations sum to {int(lens[0])}, expected {n_frames} frames")
    t_max = int(lens.max())
    rows = [torch.repeat_interleave(h[b], durations[b], dim=0) for b in range(h.shape[0])]
    out = h.new_zeros(h.shape[0], t_max, h.shape[2])
    for b, r in enumerate(rows):
        out[b, :r.shape[0]] = r
    mask = torch.arange(t_max, device=h.device)[None, :] < lens[:, None]
    if squeeze:
        return out[0], mask[0]
    return out, mask


class Aligner(nn.Module):
    """Projects mel frames and token embeddings into a shared space for soft alignment."""

    def __init__(self, n_mels: int = 80, dim: int = 192, scale: float = 0.1):
        super().__init__()
        self.n_mels = n_mels
        self.scale = scale
        self.query_in = MaskedConv1d(n_mels, dim, 3)
        self.query_out = MaskedConv1d(dim, dim, 1)
        self.key_in = MaskedConv1d(dim, dim, 3)
        self.key_out = MaskedConv1d(dim, dim, 1)

    def forward(self, token_emb, mel, token_mask, frame_mask, log_prior=None):
        mel = F.layer_norm(mel, (self.n_mels,))
        q = self.query_out(F.relu(self.query_in(mel, frame_mask)), frame_mask) * self.scale
        k = self.key_out(F.relu(self.key_in(token_emb, token_mask)), token_mask) * self.scale
        return soft_alignment(q, k, token_mask, log_prior)


class LDVAdaptor(nn.Module):
    """Duration, binary pitch and binary energy heads; binary values are conv-embedded and added."""

    def __init__(self, dim, filters, dropout):
        super().__init__()
        self.duration = VariancePredictor(dim, filters, dropout=dropout)
        self.pitch = VariancePredictor(dim, filters, dropout=dropout)
        self.energy = VariancePredictor(dim, filters, dropout=dropout)
        self.pitch_embed = MaskedConv1d(1, dim, 3)
        self.energy_embed = MaskedConv1d(1, dim, 3)

    def forward(self, h, mask, pitch_target=None, energy_target=None):
        log_dur = self.duration(h, mask)
        pitch_logits = self.pitch(h, mask)
        energy_logits = self.energy(h, mask)
        pitch_bin = pitch_target if pitch_target is not None else (torch.sigmoid(pitch_logits) >= 0.5)
        energy_bin = energy_target if energy_target is not None else (torch.sigmoid(energy_logits) >= 0.5)
        pitch_bin = masked(pitch_bin.to(h.dtype).unsqueeze(-1), mask)
        energy_bin = masked(energy_bin.to(h.dtype).unsqueeze(-1), mask)
        out = h + self.pitch_embed(pitch_bin, mask) + self.energy_embed(energy_bin, mask)
        return out, log_dur, pitch_logits, energy_logits, pitch_bin.squeeze(-1), energy_bin.squeeze(-1)


class LinguisticAdaptor(nn.Module):
    def __init__(self, dim, filters, dropout):
        super().__init__()
        self.predictor = VariancePredictor(dim, filters, dropout=dropout, out_dim=dim)
        self.embed = MaskedConv1d(dim, dim, 3)

    def forward(self, h, mask, target=None):
        pred = self.predictor(h, mask)
        source = target if target is not None else pred
        return h + self.embed(source, mask), pred


class SDVAdaptor(nn.Module):
    def __init__(self, dim, filters, dropout):
        super().__init__()
        self.pitch = VariancePredictor(dim, filters, dropout=dropout)
        self.energy = VariancePredictor(dim, filters, dropout=dropout)
        self.pitch_embed = MaskedConv1d(1, dim, 3)
        self.energy_embed = MaskedConv1d(1, dim, 3)

    def forward(self, h, mask, pitch_target=None, energy_target=None):
        pitch = self.pitch(h, mask)
        energy = self.energy(h, mask)
        p = pitch if pitch_target is None else pitch_target.to(h.dtype)
        e = energy if energy_target is None else energy_target.to(h.dtype)
        out = h + self.pitch_embed(p.unsqueeze(-1), mask) + self.energy_embed(e.unsqueeze(-1), mask)
        return out, pitch, energy


class CrossLingualTTS(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.dim
        block = dict(ff_mult=cfg.ff_mult, kernel_size=cfg.conv_kernel, dropout=cfg.dropout,
                     speaker_dim=d, dsln_kernel=cfg.dsln_kernel)
        self.token_embed = nn.Embedding(cfg.n_tokens, d, padding_idx=0)
        self.language_embed = nn.Embedding(cfg.n_languages, d)
        self.speaker_embed = nn.Embedding(cfg.n_speakers, d)
        nn.init.normal_(self.token_embed.weight, std=d ** -0.5)
        nn.init.normal_(self.language_embed.weight, std=d ** -0.5)
        nn.init.normal_(self.speaker_embed.weight, std=1.0)
        with torch.no_grad():
            self.token_embed.weight[0].zero_()

        self.aligner = Aligner(cfg.n_mels, d, cfg.aligner_scale)
        self.ld_encoder = ConformerStack(cfg.ld_encoder_blocks, d, "mdsln", **block)
        self.ldv = LDVAdaptor(d, cfg.variance_filters, cfg.dropout)
        self.ld_decoder = ConformerStack(cfg.ld_decoder_blocks, d, "ln", **block)
        self.linguistic_adaptor = LinguisticAdaptor(d, cfg.variance_filters, cfg.dropout)
        self.linguistic_encoder = LinguisticEncoder(cfg.ssl_dim, d, dropout=cfg.dropout)
        self.text_predictor = TextPredictor(cfg.n_tokens, d, cfg.text_predictor_blocks, **block)
        self.sd_encoder = ConformerStack(cfg.sd_encoder_blocks, d, "dsln", **block)
        self.sdv = SDVAdaptor(d, cfg.variance_filters, cfg.dropout)
        self.sd_decoder = ConformerStack(cfg.sd_decoder_blocks, d, "ln", **block)
        self.proj_ld = MaskedConv1d(d, cfg.n_mels, 1)
        self.proj_sd = MaskedConv1d(d, cfg.n_mels, 1)

    # -- pieces -----------------------------------------------------------

    def _lookup(self, table: nn.Embedding, ids, what: str) -> torch.Tensor:
        ids = torch.as_tensor(ids, dtype=torch.long, device=table.weight.device)
        bad = (ids < 0) | (ids >= table.num_embeddings)
        if torch.any(bad):
            raise IndexError(f"unknown {what} id {int(ids[bad][0])} (table has {table.num_embeddings})")
        return table(ids)

    def embed_text(self, tokens, lang, spk):
        """Token embeddings plus language embedding; returns (h, e_l, e_s)."""
        tok = self._lookup(self.token_embed, tokens, "token")
        e_l = self._lookup(self.language_embed, lang, "language")
        e_s = self._lookup(self.speaker_embed, spk, "speaker")
        return tok + e_l.unsqueeze(-2), e_l, e_s

    def align(self, tokens, mel, token_mask, frame_mask, log_prior=None):
        return self.aligner(self.token_embed(tokens), mel, token_mask, frame_mask, log_prior)

    def encode_linguistic(self, ssl, mask=None):
        return self.linguistic_encoder(ssl, mask)

    def text_logits(self, z, mask=None):
        return self.text_predictor(z, mask)

    def speaker_condition(self, e_s, gamma=None, perm=None) -> SpeakerCondition:
        if gamma is None or perm is None:
            return SpeakerCondition(e_s)
        gamma = torch.as_tensor(gamma, dtype=e_s.dtype, device=e_s.device)
        return SpeakerCondition(e_s, batch_shuffle(e_s, perm), gamma)

    def sd_generator(self, h_ld, frame_mask, e_s, pitch_target=None, energy_target=None):
        cond = SpeakerCondition(e_s)
        h = self.sd_encoder(h_ld, frame_mask, cond)
        h, pitch, energy = self.sdv(h, frame_mask, pitch_target, energy_target)
        return self.sd_decoder(h, frame_mask), pitch, energy

    # -- full pass ----------------------------------------------------------

    def forward(self, tokens, token_mask, lang, spk, durations=None, *, ldp_target=None, lde_target=None,
                ling_target=None, sdp_target=None, sde_target=None, gamma=None, perm=None):
        """Teacher forcing is per stream: every target given is used in place of
        the corresponding prediction. With no targets this is plain inference.
        """
        if tokens.numel() == 0 or tokens.shape[-1] == 0:
            raise ValueError("empty token sequence")
        h, e_l, e_s = self.embed_text(tokens, lang, spk)
        h = masked(h, token_mask)
        cond = self.speaker_condition(e_s, gamma, perm)
        h = self.ld_encoder(h, token_mask, cond)
        h_adapt, log_dur, ldp_logits, lde_logits, ldp_bin, lde_bin = self.ldv(h, token_mask, ldp_target, lde_target)

        if durations is None:
            durations = torch.clamp(torch.round(torch.exp(log_dur.detach()) - 1.0), min=1).long()
            durations = durations * token_mask.long()
        durations = torch.as_tensor(durations, dtype=torch.long, device=h.device)
        frames, frame_mask = length_regulate(h_adapt, durations)

        h_dec = self.ld_decoder(frames, frame_mask)
        if ling_target is not None:
            ling_target = masked(ling_target[:, :frames.shape[1]], frame_mask)
        h_ld, ling_pred = self.linguistic_adaptor(h_dec, frame_mask, ling_target)
        h_sd, sdp, sde = self.sd_generator(h_ld, frame_mask, e_s, sdp_target, sde_target)

        mel_ld = self.proj_ld(h_ld, frame_mask)
        mel_sd = self.proj_sd(h_sd, frame_mask)
        return {
            "mel": mel_ld + mel_sd,
            "mel_ld": mel_ld,
            "mel_sd": mel_sd,
            "h_ld": h_ld,
            "h_sd": h_sd,
            "ld_encoded": h,
            "frame_mask": frame_mask,
            "durations": durations,
            "log_dur": log_dur,
            "ldp_logits": ldp_logits,
            "lde_logits": lde_logits,
            "ldp_bin": ldp_bin,
            "lde_bin": lde_bin,
            "ling_pred": ling_pred,
            "sdp": sdp,
            "sde": sde,
        }

    @torch.no_grad()
    def synthesize(self, tokens, lang: int, spk: int, durations=None) -> dict:
        """Single-utterance inference; tokens is a 1-D id sequence."""
        was_training = self.training
        self.eval()
        try:
            tokens = torch.as_tensor(tokens, dtype=torch.long).reshape(1, -1)
            if tokens.shape[1] == 0:
                raise ValueError("empty token sequence")
            mask = torch.ones_like(tokens, dtype=torch.bool)
            dur = None if durations is None else torch.as_tensor(durations, dtype=torch.long).reshape(1, -1)
            out = self(tokens, mask, torch.tensor([lang]), torch.tensor([spk]), dur)
        finally:
            self.train(was_training)
        return {k: (v[0] if torch.is_tensor(v) and v.ndim > 0 else v) for k, v in out.items()}
