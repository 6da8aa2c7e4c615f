"""Deterministic training loop: truncated-normal init, linear warmup with
polynomial (power 1) decay, global-norm clipping, and decoupled-decay Adam
with beta = (0.9, 0.98). Loss is cross entropy in bits per byte over
unmasked positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .model import MegabyteDecoder, ModelConfig, Parameters, parameter_spec
from .tensor import Tensor

INIT_STD = 0.006
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.98
ADAM_EPS = 1e-8
LN2 = math.log(2.0)


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; carries the failing step."""


@dataclass
class TrainConfig:
    peak_lr: float
    total_updates: int
    batch_size: int
    warmup_updates: int = 500
    end_lr: float = 0.0
    clip_norm: float = 1.0
    weight_decay: float = 0.1
    dropout: float = 0.1
    seed: int = 0
    # Surfaced for checkpoint auditability; defaults are the recipe values.
    adam_beta1: float = ADAM_BETA1
    adam_beta2: float = ADAM_BETA2
    adam_eps: float = ADAM_EPS

    def __post_init__(self):
        if self.warmup_updates > self.total_updates:
            raise ValueError("warmup_updates must be <= total_updates")
        for name in ("peak_lr", "end_lr", "clip_norm", "weight_decay", "dropout"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def init_weights(cfg: ModelConfig, seed: int) -> Parameters:
    """Seeded parameter init: weights ~ N(0, 0.006^2) truncated at 2 sigma
    by rejection sampling; norm gains 1; biases and local positions 0."""
    rng = np.random.default_rng(seed)
    params = Parameters()
    for name, shape, decay, init in parameter_spec(cfg):
        if init == "normal":
            data = _trunc_normal(rng, shape, INIT_STD, 2.0)
        elif init == "ones":
            data = np.ones(shape, dtype=T.default_dtype())
        else:
            data = np.zeros(shape, dtype=T.default_dtype())
        params.add(name, Tensor(data), decay)
    return params


def _trunc_normal(rng: np.random.Generator, shape, std: float, bound_sigmas: float) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bound = bound_sigmas * std
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out.astype(T.default_dtype())


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> peak over warmup, then linear decay peak -> end_lr."""
    if not 0 <= step <= cfg.total_updates:
        raise ValueError("step out of range")
    if cfg.warmup_updates > 0 and step <= cfg.warmup_updates:
        return cfg.peak_lr * step / cfg.warmup_updates
    decay_span = cfg.total_updates - cfg.warmup_updates
    if decay_span == 0:
        return cfg.end_lr
    frac = (cfg.total_updates - step) / decay_span
    return cfg.end_lr + (cfg.peak_lr - cfg.end_lr) * frac


def grad_global_norm(params: Parameters) -> float:
    total = 0.0
    for _, t in params.items():
        if t.grad is not None:
            total += float(np.sum(t.grad.astype(np.float64) ** 2))
    return math.sqrt(total)


def clip_gradients(params: Parameters, max_norm: float = 1.0) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm.

    Returns the scale applied (1.0 when already under the limit).
    """
    norm = grad_global_norm(params)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    scale = max_norm / norm
    for _, t in params.items():
        if t.grad is not None:
            t.grad *= scale
    return scale


class OptimState:
    """Adam moments per parameter plus the shared step counter."""

    def __init__(self, params: Parameters):
        self.step = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}


def adam_step(params: Parameters, state: OptimState, lr: float, weight_decay: float,
              betas: tuple[float, float] = (ADAM_BETA1, ADAM_BETA2),
              eps: float = ADAM_EPS) -> None:
    """Bias-corrected Adam update with decoupled weight decay.

    Decay applies only to weight matrices, never to layer-norm parameters,
    biases, or embeddings (the decay flag in the parameter registry).
    """
    b1, b2 = betas
    state.step += 1
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, t in params.items():
        g = t.grad
        if g is None:
            g = np.zeros_like(t.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay > 0.0 and params.decays(name):
            update = update + weight_decay * t.data
        t.data = t.data - lr * update


def sequence_loss_bits(log_probs: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log2-likelihood of targets over unmasked positions."""
    picked = T.gather_last(log_probs, targets)
    kept = picked * Tensor(mask.astype(picked.data.dtype))
    count = float(mask.sum())
    if count == 0:
        raise ValueError("loss mask selects no positions")
    return kept.sum() * (-1.0 / (LN2 * count))


@dataclass
class StepRecord:
    step: int        # updates completed before this step's forward pass
    lr: float        # rate applied by this step's update
    loss_bits: float
    grad_norm: float


def train(model: MegabyteDecoder, windows, cfg: TrainConfig,
          log_every: int = 0) -> list[StepRecord]:
    """Run the full update budget over the window list, in seeded-shuffle
    order, and return the per-step loss curve.

    Each record holds the batch loss measured before that step's update,
    so record 0 is the untrained-model loss. Raises TrainingDiverged on a
    non-finite loss.
    """
    if not windows:
        raise ValueError("no training windows")
    order_rng = np.random.default_rng(cfg.seed)
    dropout_rng = np.random.default_rng(cfg.seed + 1)
    order = order_rng.permutation(len(windows))
    cursor = 0

    # The training-time dropout rate governs; eval always disables.
    active = model
    if cfg.dropout != model.config.dropout:
        active = MegabyteDecoder(replace(model.config, dropout=cfg.dropout), model.params)

    state = OptimState(model.params)
    curve: list[StepRecord] = []
    for step in range(cfg.total_updates):
        rows = []
        for _ in range(cfg.batch_size):
            if cursor == len(order):
                order = order_rng.permutation(len(windows))
                cursor = 0
            rows.append(windows[order[cursor]])
            cursor += 1
        inputs = np.stack([w.bytes for w in rows])
        mask = np.stack([w.mask for w in rows])

        model.params.zero_grad()
        try:
            log_probs = active.forward(inputs, rng=dropout_rng)
            loss = sequence_loss_bits(log_probs, inputs, mask)
            loss_bits = loss.item()
            if not math.isfinite(loss_bits):
                raise FloatingPointError("non-finite loss")
            loss.backward()
        except FloatingPointError as exc:
            raise TrainingDiverged(f"step {step}: {exc}") from exc

        norm = grad_global_norm(params=model.params)
        clip_gradients(model.params, cfg.clip_norm)
        lr = lr_at(step + 1, cfg)
        adam_step(model.params, state, lr, cfg.weight_decay,
                  betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps)

        curve.append(StepRecord(step, lr, loss_bits, norm))
        if log_every and step % log_every == 0:
            print(f"step {step:5d}  lr {lr:.3e}  loss {loss_bits:.4f} bpb  grad {norm:.3f}")
    return curve


def curve_to_csv(curve: list[StepRecord]) -> str:
    lines = ["step,lr,loss_bits_per_byte,grad_norm"]
    for r in curve:
        lines.append(f"{r.step},{r.lr!r},{r.loss_bits!r},{r.grad_norm!r}")
    return "\n".join(lines) + "\n"
