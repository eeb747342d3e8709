"""Losses, optimizer schedule and the deterministic training loop."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import align, targets
from .corpus import CachedUtterance, Corpus
from .model import CrossLingualTTS, ModelConfig, sample_gamma

log = logging.getLogger(__name__)

LAMBDA = 0.1
PROB_FLOOR = 1e-7
CTC_SENTINEL = 1e4
TERMS = ("mel", "align", "dur", "ldp", "lde", "lin", "ctc", "sdp", "sde")
WEIGHTED = ("dur", "ldp", "lde", "lin", "ctc", "sdp", "sde")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"loss term {term!r} is not finite ({value})")
        self.term = term


# ----------------------------------------------------------------------------
# Loss terms (all per item, shape (B,))
# ----------------------------------------------------------------------------

def _mask_like(x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    if mask is None:
        return torch.ones(x.shape[:2], dtype=x.dtype, device=x.device)
    return mask.to(x.dtype)


def masked_l1(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean absolute error over the valid positions of each item.

    pred/target are (B, N) or (B, N, C); mask is (B, N).
    """
    if pred.shape != target.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    m = _mask_like(pred, mask)
    err = (pred - target).abs()
    width = 1
    if err.ndim == 3:
        width = err.shape[2]
        err = err.sum(-1)
    return (err * m).sum(1) / (m.sum(1) * width).clamp(min=1)


def bce_binary_loss(logits: torch.Tensor, target: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Binary cross-entropy summed over tokens; probabilities are clamped to [1e-7, 1 - 1e-7]."""
    if logits.shape != target.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and target {tuple(target.shape)} differ")
    p = torch.sigmoid(logits).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
    t = target.to(logits.dtype)
    bce = -(t * torch.log(p) + (1.0 - t) * torch.log1p(-p))
    return (bce * _mask_like(logits, mask)).sum(-1)


def ctc_min_frames(target: Sequence[int]) -> int:
    """Shortest input that can emit ``target``: one frame per label plus a blank between repeats."""
    target = list(target)
    return len(target) + sum(a == b for a, b in zip(target, target[1:]))


def ctc_loss(logits: torch.Tensor, targets_: Sequence[Sequence[int]], input_lens) -> torch.Tensor:
    """-log P(target | logits) with blank id 0; logits (B, T', V+1).

    Infeasible items (too few frames) get a constant sentinel loss and a warning.
    """
    log_probs = F.log_softmax(logits, dim=-1).clamp(min=math.log(PROB_FLOOR))
    input_lens = [int(n) for n in input_lens]
    target_lens = [len(t) for t in targets_]
    flat = torch.tensor([int(x) for t in targets_ for x in t], dtype=torch.long)
    losses = F.ctc_loss(log_probs.transpose(0, 1), flat, torch.tensor(input_lens), torch.tensor(target_lens),
                        blank=0, reduction="none", zero_infinity=True)
    feasible = torch.tensor([n >= ctc_min_frames(t) for n, t in zip(input_lens, targets_)])
    if not bool(feasible.all()):
        bad = [i for i, ok in enumerate(feasible.tolist()) if not ok]
        warnings.warn(f"CTC target longer than input for batch items {bad}; using sentinel loss {CTC_SENTINEL}")
        losses = torch.where(feasible, losses, losses.new_full((), CTC_SENTINEL))
    return losses


# ----------------------------------------------------------------------------
# Breakdown
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class LossBreakdown:
    mel: float
    align: float
    dur: float
    ldp: float
    lde: float
    lin: float
    ctc: float
    sdp: float
    sde: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def weighted_total(parts):
    """mel + align + 0.1 * (sum of the variance, linguistic and CTC terms)."""
    return parts["mel"] + parts["align"] + LAMBDA * sum(parts[k] for k in WEIGHTED)


def total_loss(parts: dict) -> tuple[torch.Tensor, LossBreakdown]:
    """Scalar objective plus a float breakdown; raises on the first non-finite term."""
    missing = [k for k in TERMS if k not in parts]
    if missing:
        raise KeyError(f"missing loss terms: {missing}")
    values = {}
    for k in TERMS:
        v = float(parts[k].detach()) if torch.is_tensor(parts[k]) else float(parts[k])
        if not math.isfinite(v):
            raise NonFiniteLossError(k, v)
        values[k] = v
    total = weighted_total(parts)
    return total, LossBreakdown(**values, total=float(total.detach()))


# ----------------------------------------------------------------------------
# Configuration
# ----------------------------------------------------------------------------

@dataclass
class OptimizerConfig:
    lr: float = 2e-4
    beta1: float = 0.8
    beta2: float = 0.99
    eps: float = 1e-9
    weight_decay: float = 0.01
    decay_per_epoch: float = 0.999875
    accumulation: int = 2


def learning_rate(cfg: OptimizerConfig, epoch: int) -> float:
    return cfg.lr * cfg.decay_per_epoch ** epoch


@dataclass
class TrainConfig:
    cache: str = ""
    out: str = "run"
    manifest: str = ""
    provider: str = "stub"
    seed: int = 0
    steps: int = 2000
    batch_size: int = 4
    split: str = "train"
    # optimizer
    lr: float = 2e-4
    beta1: float = 0.8
    beta2: float = 0.99
    eps: float = 1e-9
    weight_decay: float = 0.01
    lr_decay: float = 0.999875
    accumulation: int = 2
    # aligner
    prior_steps: int = 500
    prior_width: float = 0.2
    # misc
    mix: bool = True
    log_duration: bool = True
    ckpt_every: int = 500
    valid_every: int = 0
    threads: int = 1
    # model
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

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(self.lr, self.beta1, self.beta2, self.eps, self.weight_decay,
                               self.lr_decay, self.accumulation)

    def model(self, n_tokens: int, n_languages: int, n_speakers: int, ssl_dim: int) -> ModelConfig:
        own = asdict(self)
        base = {f.name: own[f.name] for f in fields(ModelConfig) if f.name in own}
        return ModelConfig(n_tokens=n_tokens, n_languages=n_languages, n_speakers=n_speakers,
                           ssl_dim=ssl_dim, **base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**{k: _coerce(known[k].type, v) for k, v in data.items()})

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        """``key = value`` per line; ``#`` starts a comment."""
        data = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            data[k] = v
        return cls.from_dict(data)

    def write(self, path: str | Path) -> None:
        Path(path).write_text("".join(f"{k} = {v}\n" for k, v in self.to_dict().items()), encoding="utf-8")


def _coerce(kind, value):
    kind = kind if isinstance(kind, str) else kind.__name__
    if not isinstance(value, str):
        return value
    if kind == "bool":
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if kind == "int":
        return int(value)
    if kind == "float":
        return float(value)
    return value


# ----------------------------------------------------------------------------
# Batching
# ----------------------------------------------------------------------------

@dataclass
class Batch:
    tokens: torch.Tensor
    token_mask: torch.Tensor
    token_lens: list[int]
    mel: torch.Tensor
    frame_mask: torch.Tensor
    frame_lens: list[int]
    ssl: torch.Tensor
    sd_pitch: torch.Tensor
    energy: torch.Tensor
    language: torch.Tensor
    speaker: torch.Tensor
    pitch_raw: list[np.ndarray]
    energy_raw: list[np.ndarray]
    ids: list[str]

    def __len__(self):
        return len(self.ids)


def _pad(arrays: list[np.ndarray], dtype) -> torch.Tensor:
    n = max(a.shape[0] for a in arrays)
    out = np.zeros((len(arrays), n) + arrays[0].shape[1:])
    for i, a in enumerate(arrays):
        out[i, :a.shape[0]] = a
    return torch.from_numpy(out).to(dtype)


def collate(items: Sequence[CachedUtterance], dtype=torch.float32) -> Batch:
    frame_lens = [u.mel.shape[0] for u in items]
    token_lens = [len(u.token_ids) for u in items]
    t_max, l_max = max(frame_lens), max(token_lens)
    return Batch(
        tokens=_pad([u.token_ids for u in items], torch.long),
        token_mask=torch.arange(l_max)[None, :] < torch.tensor(token_lens)[:, None],
        token_lens=token_lens,
        mel=_pad([u.mel for u in items], dtype),
        frame_mask=torch.arange(t_max)[None, :] < torch.tensor(frame_lens)[:, None],
        frame_lens=frame_lens,
        ssl=_pad([targets.trim_to(u.ssl, n) for u, n in zip(items, frame_lens)], dtype),
        sd_pitch=_pad([u.sd_pitch for u in items], dtype),
        energy=_pad([u.energy for u in items], dtype),
        language=torch.tensor([u.language for u in items]),
        speaker=torch.tensor([u.speaker for u in items]),
        pitch_raw=[u.pitch for u in items],
        energy_raw=[u.energy for u in items],
        ids=[u.utt_id for u in items],
    )


# ----------------------------------------------------------------------------
# Forward pass with losses
# ----------------------------------------------------------------------------

def compute_losses(model: CrossLingualTTS, batch: Batch, *, gamma=None, perm=None, use_prior: bool = False,
                   prior_width: float = 0.2, log_duration: bool = True) -> tuple[dict, dict]:
    """Teacher-forced forward pass; returns (per-item loss tensors, auxiliary outputs)."""
    dtype = next(model.parameters()).dtype
    log_prior = None
    if use_prior:
        log_prior = align.batch_log_prior(batch.frame_lens, batch.token_lens, prior_width).to(dtype)
    mel = batch.mel.to(dtype)
    log_attn = model.align(batch.tokens, mel, batch.token_mask, batch.frame_mask, log_prior)
    durations = align.batch_viterbi(log_attn, batch.frame_lens, batch.token_lens)
    align_loss = (align.forward_sum_loss(log_attn, batch.frame_lens, batch.token_lens)
                  + align.binarization_loss(log_attn, durations, batch.frame_lens))

    ldp, lde = zip(*(targets.build_ld_targets(p, e, d)
                     for p, e, d in zip(batch.pitch_raw, batch.energy_raw, durations)))
    ldp_t = _pad(list(ldp), dtype)
    lde_t = _pad(list(lde), dtype)
    dur_t = _pad(durations, torch.long)

    z = model.encode_linguistic(batch.ssl.to(dtype), batch.frame_mask)
    ctc = ctc_loss(model.text_logits(z, batch.frame_mask),
                   [u[:n].tolist() for u, n in zip(batch.tokens, batch.token_lens)], batch.frame_lens)
    z_target = z.detach()

    out = model(batch.tokens, batch.token_mask, batch.language, batch.speaker, dur_t,
                ldp_target=ldp_t, lde_target=lde_t, ling_target=z_target,
                sdp_target=batch.sd_pitch.to(dtype), sde_target=batch.energy.to(dtype),
                gamma=gamma, perm=perm)
    fm, tm = batch.frame_mask, batch.token_mask
    dur_target = torch.log1p(dur_t.to(dtype)) if log_duration else dur_t.to(dtype)
    parts = {
        "mel": masked_l1(out["mel"], mel, fm),
        "align": align_loss,
        "dur": masked_l1(out["log_dur"], dur_target, tm),
        "ldp": bce_binary_loss(out["ldp_logits"], ldp_t, tm),
        "lde": bce_binary_loss(out["lde_logits"], lde_t, tm),
        "lin": masked_l1(out["ling_pred"], z_target, fm),
        "ctc": ctc,
        "sdp": masked_l1(out["sdp"], batch.sd_pitch.to(dtype), fm),
        "sde": masked_l1(out["sde"], batch.energy.to(dtype), fm),
    }
    aux = {"durations": durations, "ldp_target": ldp_t, "lde_target": lde_t, "log_attn": log_attn, "out": out}
    return parts, aux


def reduce_parts(parts: dict) -> dict:
    return {k: v.mean() for k, v in parts.items()}


# ----------------------------------------------------------------------------
# Trainer
# ----------------------------------------------------------------------------

def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, 2, step])


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 1, epoch]).permutation(n)


@dataclass
class StepResult:
    step: int
    epoch: int
    lr: float
    losses: LossBreakdown | None
    status: str


class Trainer:
    """Owns model, optimizer and the step counter; every random draw is a
    function of (seed, step), so the counter is the whole RNG position.
    """

    def __init__(self, cfg: TrainConfig, corpus: Corpus | None = None, model: CrossLingualTTS | None = None,
                 items: Sequence[CachedUtterance] | None = None, vocab: list[str] | None = None):
        self.cfg = cfg
        self.items = list(items if items is not None else corpus.items)
        if not self.items:
            raise ValueError("no training utterances")
        self.vocab = vocab if vocab is not None else (corpus.vocab.symbols if corpus is not None else [])
        if model is None:
            torch.manual_seed(cfg.seed)
            model = CrossLingualTTS(cfg.model(len(corpus.vocab), corpus.n_languages, corpus.n_speakers,
                                              corpus.ssl_dim))
        self.model = model
        self.opt_cfg = cfg.optimizer()
        self.optimizer = torch.optim.AdamW(model.parameters(), lr=self.opt_cfg.lr,
                                           betas=(self.opt_cfg.beta1, self.opt_cfg.beta2),
                                           eps=self.opt_cfg.eps, weight_decay=self.opt_cfg.weight_decay,
                                           foreach=True)
        self.step = 0
        self.optimizer_steps = 0
        self.skipped = 0

    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(len(self.items) / self.cfg.batch_size)

    def epoch_of(self, step: int) -> int:
        return step // self.batches_per_epoch

    def batch_indices(self, step: int) -> np.ndarray:
        order = epoch_order(self.cfg.seed, self.epoch_of(step), len(self.items))
        k = step % self.batches_per_epoch
        return order[k * self.cfg.batch_size:(k + 1) * self.cfg.batch_size]

    def batch(self, step: int) -> Batch:
        dtype = next(self.model.parameters()).dtype
        return collate([self.items[i] for i in self.batch_indices(step)], dtype)

    def draws(self, step: int, batch_size: int):
        """(gamma, perm, dropout seed) for a step."""
        rng = step_rng(self.cfg.seed, step)
        torch_seed = int(rng.integers(2 ** 62))
        if not self.cfg.mix:
            return None, None, torch_seed
        gamma = sample_gamma(rng, batch_size, training=True)
        perm = rng.permutation(batch_size)
        return gamma, perm, torch_seed

    def train_step(self, batch: Batch | None = None) -> StepResult:
        step = self.step
        epoch = self.epoch_of(step)
        lr = learning_rate(self.opt_cfg, epoch)
        batch = batch if batch is not None else self.batch(step)
        gamma, perm, torch_seed = self.draws(step, len(batch))
        torch.manual_seed(torch_seed)
        self.model.train()
        status = "ok"
        breakdown = None
        try:
            parts, _ = compute_losses(self.model, batch, gamma=gamma, perm=perm,
                                      use_prior=step < self.cfg.prior_steps, prior_width=self.cfg.prior_width,
                                      log_duration=self.cfg.log_duration)
            total, breakdown = total_loss(reduce_parts(parts))
            (total / self.opt_cfg.accumulation).backward()
        except NonFiniteLossError as exc:
            log.warning("step %d: %s; step skipped", step, exc)
            status = f"nonfinite-{exc.term}"
        if (step + 1) % self.opt_cfg.accumulation == 0:
            if self._grads_finite():
                for group in self.optimizer.param_groups:
                    group["lr"] = lr
                self.optimizer.step()
                self.optimizer_steps += 1
            else:
                log.warning("step %d: non-finite gradient; optimizer update skipped", step)
                status = "nonfinite-grad"
                self.skipped += 1
            self.optimizer.zero_grad(set_to_none=True)
        self.step += 1
        return StepResult(step + 1, epoch, lr, breakdown, status)

    def _grads_finite(self) -> bool:
        grads = [p.grad for p in self.model.parameters() if p.grad is not None]
        return not grads or bool(torch.isfinite(torch.nn.utils.get_total_norm(grads)))

    # -- evaluation ----------------------------------------------------------

    @torch.no_grad()
    def evaluate(self, items: Sequence[CachedUtterance] | None = None, batch_size: int | None = None) -> dict:
        return evaluate(self.model, items if items is not None else self.items, batch_size or self.cfg.batch_size,
                        log_duration=self.cfg.log_duration)


@torch.no_grad()
def evaluate(model: CrossLingualTTS, items: Sequence[CachedUtterance], batch_size: int = 8,
             log_duration: bool = True) -> dict:
    """Teacher-forced mel L1, LD binary accuracy and aligner durations, eval mode, no prior."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    mel_sum, mel_n = 0.0, 0
    hits = {"ldp": 0, "lde": 0}
    n_tokens = 0
    durations = {}
    try:
        for start in range(0, len(items), batch_size):
            batch = collate(items[start:start + batch_size], dtype)
            parts, aux = compute_losses(model, batch, log_duration=log_duration)
            mel_sum += float(parts["mel"].sum())
            mel_n += len(batch)
            tm = batch.token_mask
            for key in hits:
                pred = (aux["out"][f"{key}_logits"] > 0).to(dtype)
                hits[key] += int(((pred == aux[f"{key}_target"]) & tm).sum())
            n_tokens += int(tm.sum())
            for uid, d in zip(batch.ids, aux["durations"]):
                durations[uid] = d
    finally:
        model.train(was_training)
    return {
        "mel_l1": mel_sum / max(mel_n, 1),
        "ldp_acc": hits["ldp"] / max(n_tokens, 1),
        "lde_acc": hits["lde"] / max(n_tokens, 1),
        "durations": durations,
    }


METRIC_COLUMNS = ("step", "epoch", "lr") + TERMS + ("total", "status")


def metrics_line(res: StepResult) -> str:
    vals = [str(res.step), str(res.epoch), repr(res.lr)]
    if res.losses is None:
        vals += ["nan"] * (len(TERMS) + 1)
    else:
        d = res.losses.as_dict()
        vals += [repr(d[k]) for k in TERMS + ("total",)]
    vals.append(res.status)
    return "\t".join(vals)
