"""Triplet fine-tuning of the sentence encoder.

Anchor: a uniformly drawn day. Positive: another day of the same participant
at most ``window_days`` away. Negative: a day of a different participant.
Loss: max(0, margin - cos(a, p) + cos(a, n)), averaged over the batch, fitted
with AdamW under a linear warm-up / linear decay learning rate.
"""

import datetime
import logging
import math
import os
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from csv_helper import write_csv
from daystring import DayStringRecord, Vocabulary, tokenize
from encoder import EncoderConfig, SentenceEncoder, forward_ids, init_params, param_group, save_checkpoint
from errors import GradientError, SamplingError, TrainingError
from settings import derive_seed

logger = logging.getLogger(__name__)

Key = Tuple[str, datetime.date]

BETAS = (0.9, 0.999)
EPS = 1e-8
MAX_ANCHOR_RETRIES = 100


@dataclass(frozen=True)
class Triplet:
    anchor: Key
    positive: Key
    negative: Key


@dataclass(frozen=True)
class TrainConfig:
    triplets_per_epoch: int = 10000
    batch_size: int = 256
    margin: float = 0.25
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    warmup_steps: int = 500
    total_steps: Optional[int] = None
    epochs: int = 1
    seed: int = 0
    window_days: int = 30
    negative_mode: str = 'day'

    def __post_init__(self):
        if self.margin <= 0:
            raise TrainingError(f"margin must be > 0, got {self.margin}")
        if self.batch_size <= 0 or self.triplets_per_epoch < 0 or self.epochs < 0:
            raise TrainingError("batch_size must be positive; epochs and triplets_per_epoch non-negative")
        if self.warmup_steps < 0 or self.window_days < 1:
            raise TrainingError("warmup_steps must be >= 0 and window_days >= 1")
        if self.negative_mode not in ('day', 'participant'):
            raise TrainingError(f"negative_mode must be 'day' or 'participant', got {self.negative_mode!r}")
        if self.total_steps is not None and self.warmup_steps > self.total_steps:
            raise TrainingError(f"warmup_steps ({self.warmup_steps}) exceeds total_steps ({self.total_steps})")

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(self.triplets_per_epoch / self.batch_size)

    def resolved_total_steps(self) -> int:
        planned = self.epochs * self.steps_per_epoch
        return planned if self.total_steps is None else min(planned, self.total_steps)


@dataclass
class OptimizerState:
    step: int = 0
    exp_avg: Dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: Dict[str, torch.Tensor] = field(default_factory=dict)


@dataclass(frozen=True)
class LossRecord:
    step: int
    epoch: int
    lr: float
    loss: float

    def to_dict(self):
        return {"step": self.step, "epoch": self.epoch, "lr": repr(self.lr), "loss": repr(self.loss)}


# ----------------------------------------------------------------------------
# Triplet sampling
# ----------------------------------------------------------------------------
class TripletSampler:
    """Index over corpus keys for O(log n) triplet draws."""

    def __init__(self, keys: Sequence[Key], window_days: int = 30, negative_mode: str = 'day'):
        self.keys: List[Key] = sorted(set(keys))
        self.window_days = window_days
        self.negative_mode = negative_mode
        self.participants: List[str] = []
        self._block: Dict[str, Tuple[int, int]] = {}
        for i, (pid, _) in enumerate(self.keys):
            if pid not in self._block:
                self.participants.append(pid)
                self._block[pid] = (i, i + 1)
            else:
                self._block[pid] = (self._block[pid][0], i + 1)
        self._ordinals = [date.toordinal() for _, date in self.keys]
        if len(self.participants) < 2:
            raise SamplingError("triplet sampling needs at least two participants")

    def positive_candidates(self, anchor: int) -> Tuple[int, int]:
        """Half-open row range around the anchor's window (anchor row included)."""
        start, end = self._block[self.keys[anchor][0]]
        d = self._ordinals[anchor]
        lo = bisect_left(self._ordinals, d - self.window_days, start, end)
        hi = bisect_right(self._ordinals, d + self.window_days, start, end)
        return lo, hi

    def sample(self, rng: np.random.Generator) -> Triplet:
        n = len(self.keys)
        for _ in range(MAX_ANCHOR_RETRIES):
            anchor = int(rng.integers(n))
            lo, hi = self.positive_candidates(anchor)
            count = hi - lo - 1
            if count > 0:
                break
        else:
            raise SamplingError(
                f"no anchor with a positive within {self.window_days} days after {MAX_ANCHOR_RETRIES} draws")
        positive = lo + int(rng.integers(count))
        if positive >= anchor:
            positive += 1
        return Triplet(self.keys[anchor], self.keys[positive], self.keys[self._negative(anchor, rng)])

    def _negative(self, anchor: int, rng: np.random.Generator) -> int:
        pid = self.keys[anchor][0]
        start, end = self._block[pid]
        if self.negative_mode == 'participant':
            others = [p for p in self.participants if p != pid]
            o_start, o_end = self._block[others[int(rng.integers(len(others)))]]
            return o_start + int(rng.integers(o_end - o_start))
        row = int(rng.integers(len(self.keys) - (end - start)))
        return row + (end - start) if row >= start else row


def sample_triplet(corpus, rng: np.random.Generator, window_days: int = 30, negative_mode: str = 'day') -> Triplet:
    """One triplet from a corpus (records or keys) or a prepared TripletSampler."""
    if isinstance(corpus, TripletSampler):
        return corpus.sample(rng)
    keys = [r.key if hasattr(r, 'key') else tuple(r) for r in corpus]
    return TripletSampler(keys, window_days, negative_mode).sample(rng)


# ----------------------------------------------------------------------------
# Loss and gradients
# ----------------------------------------------------------------------------
def triplet_loss(a, p, n, margin: float = 0.25):
    """max(0, margin - cos(a, p) + cos(a, n)); batched over the leading axes.

    numpy inputs give a float (or ndarray for batches); tensors stay tensors.
    """
    as_numpy = not isinstance(a, torch.Tensor)
    if as_numpy:
        a, p, n = (torch.as_tensor(np.asarray(v, dtype=np.float64)) for v in (a, p, n))
    if not (a.shape == p.shape == n.shape):
        raise TrainingError(f"triplet vectors differ in shape: {tuple(a.shape)}, {tuple(p.shape)}, {tuple(n.shape)}")
    na, np_, nn_ = a.norm(dim=-1), p.norm(dim=-1), n.norm(dim=-1)
    if bool((na == 0).any() or (np_ == 0).any() or (nn_ == 0).any()):
        raise TrainingError("cosine similarity of a zero-norm vector")
    cos_ap = (a * p).sum(dim=-1) / (na * np_)
    cos_an = (a * n).sum(dim=-1) / (na * nn_)
    loss = F.relu(margin - cos_ap + cos_an)
    if as_numpy:
        return float(loss) if loss.dim() == 0 else loss.numpy()
    return loss


def backward(params: SentenceEncoder, config: EncoderConfig,
             batch: Sequence[Tuple[Sequence[int], Sequence[int], Sequence[int]]],
             margin: float = 0.25) -> Tuple[Dict[str, torch.Tensor], float]:
    """Gradients of the mean batch triplet loss w.r.t. every parameter tensor.

    ``batch`` holds (anchor_ids, positive_ids, negative_ids) token sequences.
    Returns (gradients by parameter name, loss).
    """
    if not batch:
        raise TrainingError("empty batch")
    if config != params.config:
        raise TrainingError("config does not match the parameters' config")
    b = len(batch)
    sequences = [t[0] for t in batch] + [t[1] for t in batch] + [t[2] for t in batch]
    embeddings = forward_ids(params, sequences)
    if not bool(torch.isfinite(embeddings).all()):
        raise GradientError("non-finite values in sentence_embeddings")
    loss = triplet_loss(embeddings[:b], embeddings[b:2 * b], embeddings[2 * b:], margin).mean()
    if not bool(torch.isfinite(loss)):
        raise GradientError("non-finite values in loss")
    named = list(params.named_parameters())
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    out: Dict[str, torch.Tensor] = {}
    for (name, p), g in zip(named, grads):
        g = torch.zeros_like(p) if g is None else g.detach()
        if not bool(torch.isfinite(g).all()):
            raise GradientError(f"non-finite gradient for {name}")
        out[name] = g
    return out, float(loss.detach())


# ----------------------------------------------------------------------------
# Optimizer and schedule
# ----------------------------------------------------------------------------
def _adamw_update_(p: torch.Tensor, g: torch.Tensor, exp_avg: torch.Tensor, exp_avg_sq: torch.Tensor,
                   step: int, lr: float, weight_decay: float, betas=BETAS, eps: float = EPS):
    """In place: p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)."""
    beta1, beta2 = betas
    exp_avg.mul_(beta1).add_(g, alpha=1 - beta1)
    exp_avg_sq.mul_(beta2).addcmul_(g, g, value=1 - beta2)
    bias_correction1 = 1 - beta1 ** step
    bias_correction2 = 1 - beta2 ** step
    denom = (exp_avg_sq.sqrt() / math.sqrt(bias_correction2)).add_(eps)
    if weight_decay != 0:
        p.mul_(1 - lr * weight_decay)
    p.addcdiv_(exp_avg, denom, value=-lr / bias_correction1)


def adamw_step(params: Dict[str, torch.Tensor], grads: Dict[str, torch.Tensor], state: OptimizerState,
               lr: float, weight_decay: float) -> Tuple[Dict[str, torch.Tensor], OptimizerState]:
    """Functional AdamW: returns new parameters and state, inputs untouched."""
    step = state.step + 1
    new_params, exp_avg, exp_avg_sq = {}, {}, {}
    for name, value in params.items():
        if name not in grads or grads[name].shape != value.shape:
            raise TrainingError(f"gradient for {name} missing or misshapen")
        p = value.detach().clone()
        m = state.exp_avg[name].clone() if name in state.exp_avg else torch.zeros_like(p)
        v = state.exp_avg_sq[name].clone() if name in state.exp_avg_sq else torch.zeros_like(p)
        _adamw_update_(p, grads[name], m, v, step, lr, weight_decay)
        new_params[name], exp_avg[name], exp_avg_sq[name] = p, m, v
    return new_params, OptimizerState(step, exp_avg, exp_avg_sq)


class AdamW(torch.optim.Optimizer):
    def __init__(self, params, lr=1e-3, betas=BETAS, eps=EPS, weight_decay=0.0):
        defaults = dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if len(state) == 0:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_avg_sq"] = torch.zeros_like(p)
                state["step"] += 1
                _adamw_update_(p, p.grad, state["exp_avg"], state["exp_avg_sq"], state["step"],
                               group["lr"], group["weight_decay"], group["betas"], group["eps"])
        return loss


def lr_schedule(step: int, warmup_steps: int, total_steps: int, peak_lr: float) -> float:
    if not 0 <= step <= total_steps:
        raise TrainingError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return peak_lr
    return peak_lr * (total_steps - step) / (total_steps - warmup_steps)


# ----------------------------------------------------------------------------
# Training loop
# ----------------------------------------------------------------------------
def _param_groups(params: SentenceEncoder, weight_decay: float):
    decay, no_decay = [], []
    for name, p in params.named_parameters():
        if name.endswith('bias') or param_group(name) == 'layer_norm':
            no_decay.append(p)
        else:
            decay.append(p)
    return [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}]


def train(corpus: Sequence[DayStringRecord], encoder_config: EncoderConfig, train_config: TrainConfig,
          vocab: Optional[Vocabulary] = None, params: Optional[SentenceEncoder] = None,
          checkpoint_dir: Optional[str] = None) -> Tuple[SentenceEncoder, List[LossRecord]]:
    vocab = vocab or Vocabulary.default()
    if params is None:
        params = init_params(encoder_config, derive_seed(train_config.seed, 'encoder'))
    total = train_config.resolved_total_steps()
    history: List[LossRecord] = []
    if total == 0:
        logger.info("Zero training steps requested; returning initial parameters")
        return params, history

    ids = {record.key: tokenize(record.text, vocab) for record in corpus}
    sampler = TripletSampler(list(ids), train_config.window_days, train_config.negative_mode)
    rng = np.random.default_rng(derive_seed(train_config.seed, 'trainer'))
    warmup = min(train_config.warmup_steps, total)
    if warmup < train_config.warmup_steps:
        logger.warning(f"warmup_steps clipped to the {total} planned steps")
    optimizer = AdamW(_param_groups(params, train_config.weight_decay), lr=train_config.learning_rate)
    named = dict(params.named_parameters())

    step = 0
    for epoch in range(train_config.epochs):
        triplets = [sampler.sample(rng) for _ in range(train_config.triplets_per_epoch)]
        for start in range(0, len(triplets), train_config.batch_size):
            if step >= total:
                break
            lr = lr_schedule(step, warmup, total, train_config.learning_rate)
            for group in optimizer.param_groups:
                group["lr"] = lr
            batch = [(ids[t.anchor], ids[t.positive], ids[t.negative])
                     for t in triplets[start:start + train_config.batch_size]]
            grads, loss = backward(params, encoder_config, batch, train_config.margin)
            for name, p in named.items():
                p.grad = grads[name]
            optimizer.step()
            history.append(LossRecord(step, epoch, lr, loss))
            if step % 50 == 0 or step == total - 1:
                logger.info(f"epoch {epoch} step {step}/{total} lr={lr:.3g} loss={loss:.4f}")
            step += 1
        if checkpoint_dir:
            os.makedirs(checkpoint_dir, exist_ok=True)
            save_checkpoint(params, encoder_config, os.path.join(checkpoint_dir, f"epoch_{epoch:03d}.ckpt"))
        if step >= total:
            break
    for p in named.values():
        p.grad = None
    return params, history


def write_loss_history(history: Sequence[LossRecord], path):
    write_csv(path, (r.to_dict() for r in history), ["step", "epoch", "lr", "loss"])
