"""Deterministic masked-reconstruction training.

One optimizer step accumulates gradients over ``grad_accum`` physical
batches of freshly masked cells, clips the global norm, and applies a
decoupled AdamW update. Validation uses one fixed mask per cell, drawn
once per run, so best-checkpoint selection reflects parameter changes
only. Everything is a pure function of (corpus, config, seed).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import NumericError, Tape, Tensor, mul, scale, sub, tsum
from .corpus import NORMALIZED, CorpusError, ExpressionMatrix
from .model import ModelConfig, ParameterSet, forward_batch, init, param_count, save_checkpoint
from .rng import Rng

EVAL_CHUNK = 64  # cells per evaluation forward; fixed so results never depend on it


class TrainerError(RuntimeError):
    """Training aborted (non-finite loss, empty split, degenerate mask)."""


@dataclass
class TrainConfig:
    total_steps: int
    physical_batch: int = 4
    grad_accum: int = 8
    mask_rate: float = 0.15
    base_lr_reference: float = 2.5e-4
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_every: int = 1000
    seed: int = 7

    def __post_init__(self):
        if not 0.0 < self.mask_rate < 1.0:
            raise ValueError("mask_rate must be in (0, 1)")
        if min(self.total_steps, self.physical_batch, self.grad_accum,
               self.eval_every) < 1:
            raise ValueError("counts must be >= 1")

    @property
    def lr(self) -> float:
        """Scaled rate: base_lr_reference * effective_batch / 256."""
        return self.base_lr_reference * (self.physical_batch * self.grad_accum) / 256

    @property
    def effective_batch(self) -> int:
        return self.physical_batch * self.grad_accum

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr"] = self.lr
        return d

    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    history: list[dict] = field(default_factory=list)
    best_val_mse: float = math.inf
    best_step: int = -1
    param_count: int = 0


def mask_count(v: int, rate: float) -> int:
    return round(rate * v)


def sample_mask(v: int, rate: float, rng: Rng) -> np.ndarray:
    """Boolean mask with exactly round(rate*v) positions set, uniform
    without replacement."""
    k = mask_count(v, rate)
    if k <= 0 or k >= v:
        raise TrainerError(f"degenerate mask: {k} of {v} positions")
    mask = np.zeros(v, dtype=bool)
    mask[rng.sample_no_replace(v, k)] = True
    return mask


def masked_mse(pred, target, mask) -> float:
    """Mean squared error over masked positions only."""
    pred, target, mask = (np.asarray(a) for a in (pred, target, mask))
    mask = mask.astype(bool)
    if not mask.any():
        raise TrainerError("empty mask set")
    diff = pred[mask].astype(np.float64) - target[mask].astype(np.float64)
    return float(np.mean(diff * diff))


def masked_mae(pred, target, mask) -> float:
    """Mean absolute error over masked positions only."""
    pred, target, mask = (np.asarray(a) for a in (pred, target, mask))
    mask = mask.astype(bool)
    if not mask.any():
        raise TrainerError("empty mask set")
    diff = pred[mask].astype(np.float64) - target[mask].astype(np.float64)
    return float(np.mean(np.abs(diff)))


def masked_mse_loss(pred: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Differentiable masked MSE; unmasked positions contribute nothing."""
    dtype = pred.dtype
    n_masked = int(mask.sum())
    tgt = Tensor(np.where(mask, targets, 0.0).astype(dtype), dtype=dtype)
    mask_f = Tensor(mask.astype(dtype), dtype=dtype)
    diff = sub(mul(pred, mask_f), tgt)
    return scale(tsum(mul(diff, diff)), 1.0 / n_masked)


def _decays(name: str) -> bool:
    # decoupled decay exempts biases and layer-norm parameters
    short = name.rsplit(".", 1)[-1]
    return not (short.endswith("bias") or short.endswith("norm_gain"))


def adamw_state(params: dict[str, np.ndarray]) -> dict[str, tuple]:
    return {name: (np.zeros_like(p), np.zeros_like(p)) for name, p in params.items()}


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: dict[str, tuple], config: TrainConfig,
               step_index: int) -> tuple[dict, dict]:
    """In-place decoupled AdamW: theta -= lr * (m_hat/(sqrt(v_hat)+eps) + wd*theta).

    ``step_index`` is 1-based; bias correction uses beta^t.
    """
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    lr, wd = config.lr, config.weight_decay
    bc1 = 1.0 - b1 ** step_index
    bc2 = 1.0 - b2 ** step_index
    for name, p in params.items():
        g = grads[name]
        m, v = state[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if wd != 0.0 and _decays(name):
            update = update + wd * p
        p -= lr * update
    return params, state


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict:
    """Scale all gradients by max_norm/norm when the joint L2 norm exceeds it."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = 0.0
    for g in grads.values():
        total += float(np.dot(g.reshape(-1).astype(np.float64),
                              g.reshape(-1).astype(np.float64)))
    norm = math.sqrt(total)
    if norm > max_norm:
        # small denominator guard keeps the rescaled norm strictly under
        # the bound after float32 rounding
        factor = max_norm / (norm + 1e-6)
        for g in grads.values():
            g *= g.dtype.type(factor)
    return grads


def _fixed_eval_masks(n_cells: int, v: int, rate: float, seed: int) -> np.ndarray:
    rng = Rng(seed, "eval-mask")
    return np.stack([sample_mask(v, rate, rng) for _ in range(n_cells)])


def evaluate(params: ParameterSet, values: np.ndarray,
             masks: np.ndarray) -> tuple[float, float]:
    """Masked MSE/MAE over a split, fixed masks, fixed chunking."""
    preds = np.empty_like(values)
    for start in range(0, len(values), EVAL_CHUNK):
        chunk = slice(start, start + EVAL_CHUNK)
        pred, _ = forward_batch(params, values[chunk], masks[chunk])
        preds[chunk] = pred.data
    return masked_mse(preds, values, masks), masked_mae(preds, values, masks)


class _EpochSampler:
    """Shuffled epoch iteration; partial final batches are dropped."""

    def __init__(self, indices: np.ndarray, batch: int, rng: Rng):
        if len(indices) < batch:
            raise TrainerError(
                f"train split ({len(indices)} cells) smaller than one batch")
        self.indices = indices.copy()
        self.batch = batch
        self.rng = rng
        self._cursor = len(indices)  # force shuffle on first draw

    def next_batch(self) -> np.ndarray:
        if self._cursor + self.batch > len(self.indices):
            self.rng.shuffle(self.indices)
            self._cursor = 0
        out = self.indices[self._cursor:self._cursor + self.batch]
        self._cursor += self.batch
        return out


def tokens_seen(step: int, config: TrainConfig, vocab: int) -> int:
    return step * config.physical_batch * config.grad_accum * vocab


def train(model_config: ModelConfig, matrix: ExpressionMatrix,
          config: TrainConfig, run_dir: Path | str | None = None) -> RunRecord:
    """Train one model; returns the run record and (optionally) persists
    history.jsonl, metadata.json and the best checkpoint under run_dir."""
    if matrix.stage != NORMALIZED:
        raise CorpusError("training expects a normalized corpus")
    if matrix.split is None:
        raise CorpusError("corpus has no split assignment")
    train_idx = matrix.split.indices("train")
    val_idx = matrix.split.indices("val")
    if len(val_idx) == 0:
        raise TrainerError("validation split is empty")
    v = matrix.n_genes
    if v != model_config.vocab:
        raise CorpusError(
            f"corpus has {v} genes but model vocab is {model_config.vocab}")

    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)

    params = init(model_config, config.seed)
    arrays = {name: t.data for name, t in params.items()}
    state = adamw_state(arrays)
    mask_rng = Rng(config.seed, "train-mask")
    sampler = _EpochSampler(train_idx, config.physical_batch,
                            Rng(config.seed, "epoch-shuffle"))
    val_values = matrix.values[val_idx]
    val_masks = _fixed_eval_masks(len(val_idx), v, config.mask_rate, config.seed)

    record = RunRecord(config_hash=config.config_hash(), seed=config.seed,
                       param_count=param_count(model_config))

    def flush_best(step, val_mse):
        if run_dir is not None:
            save_checkpoint(params, run_dir / "ckpt_best", {
                "seed": config.seed, "step": step, "best_val_mse": val_mse,
            })

    for step in range(1, config.total_steps + 1):
        accum: dict[str, np.ndarray] | None = None
        micro_losses = []
        for _ in range(config.grad_accum):
            batch_idx = sampler.next_batch()
            targets = matrix.values[batch_idx]
            masks = np.stack([sample_mask(v, config.mask_rate, mask_rng)
                              for _ in range(config.physical_batch)])
            try:
                with Tape() as tape:
                    pred, _ = forward_batch(params, targets, masks)
                    loss = masked_mse_loss(pred, targets, masks)
                grads = tape.gradients(loss)
            except NumericError as err:
                raise TrainerError(f"non-finite loss at step {step}: {err}") from err
            micro_losses.append(loss.item())
            if accum is None:
                accum = {name: grads[t] for name, t in params.items()}
            else:
                for name, t in params.items():
                    accum[name] += grads[t]
        inv = np.float32(1.0 / config.grad_accum)
        for g in accum.values():
            g *= inv
        clip_global_norm(accum, config.clip_norm)
        adamw_step(arrays, accum, state, config, step)
        train_mse = sum(micro_losses) / len(micro_losses)

        if step % config.eval_every == 0 or step == config.total_steps:
            val_mse, val_mae = evaluate(params, val_values, val_masks)
            record.history.append({
                "step": step,
                "train_mse": train_mse,
                "val_mse": val_mse,
                "val_mae": val_mae,
                "tokens_seen": tokens_seen(step, config, v),
            })
            if val_mse < record.best_val_mse:
                record.best_val_mse = val_mse
                record.best_step = step
                flush_best(step, val_mse)

    if run_dir is not None:
        write_run_files(run_dir, model_config, config, record)
    return record


def write_run_files(run_dir: Path, model_config: ModelConfig,
                    config: TrainConfig, record: RunRecord) -> None:
    run_dir = Path(run_dir)
    with open(run_dir / "history.jsonl", "w") as fh:
        for row in record.history:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    metadata = {
        "model": model_config.to_dict(),
        "train": config.to_dict(),
        "config_hash": record.config_hash,
        "seed": record.seed,
        "param_count": record.param_count,
        "best_val_mse": record.best_val_mse,
        "best_step": record.best_step,
        "precision": "float32",
        "weight_decay_exempt": "biases and layer-norm parameters",
    }
    (run_dir / "metadata.json").write_text(
        json.dumps(metadata, sort_keys=True, indent=2) + "\n")
