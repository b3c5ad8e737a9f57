"""Supervised training: Adam, inverse-square-root warmup, label smoothing,
per-epoch dev BLEU, checkpointing, and best-model selection.

Selection defaults to dev BLEU. The original evaluation protocol picked
the epoch with the highest *test* BLEU; that is reproduced only when
``selection_metric="test_bleu"`` is requested explicitly.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import ParallelCorpus, make_batches
from .decoding import DecodeConfig, translate_lines
from .evaluation import corpus_bleu
from .tokenization import PAD_ID, MergeTable, Vocabulary, apply_bpe
from .transformer import (TransformerConfig, TransformerModel, build_model,
                          decoder_forward, encode_source)

logger = logging.getLogger(__name__)

SELECTION_METRICS = ("dev_bleu", "test_bleu")


class TrainingError(Exception):
    pass


@dataclass
class TokenizerSetup:
    """Everything needed to turn raw lines into model ids and back."""

    mode: str  # "word" or "bpe"
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary
    merges: Optional[MergeTable] = None

    def __post_init__(self):
        if self.mode not in ("word", "bpe"):
            raise TrainingError(f"tokenizer mode must be word or bpe, got {self.mode!r}")
        if self.mode == "bpe" and self.merges is None:
            raise TrainingError("bpe mode requires a merge table")

    def transform(self) -> Optional[Callable[[list[str]], list[str]]]:
        if self.mode == "word":
            return None
        cache: dict = {}
        return lambda tokens: apply_bpe(tokens, self.merges, _cache=cache)


@dataclass
class TrainConfig:
    epochs: int = 200
    token_budget: int = 4096
    max_len: int = 100
    lr_factor: float = 1.0
    warmup_steps: int = 4000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    label_smoothing: float = 0.1
    grad_clip: float = 1.0
    seed: int = 0
    selection_metric: str = "dev_bleu"
    checkpoint_every: int = 0  # extra per-epoch archive files; 0 = best/last only

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainingError("epochs must be >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise TrainingError("label_smoothing must be in [0, 1)")
        if self.selection_metric not in SELECTION_METRICS:
            raise TrainingError(f"selection_metric must be one of {SELECTION_METRICS}")
        if self.warmup_steps < 1:
            raise TrainingError("warmup_steps must be >= 1")


@dataclass
class OptimizerState:
    """Adam moment buffers, shape-matched to the parameters."""

    first_moment: dict[str, np.ndarray]
    second_moment: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_model(cls, model: TransformerModel) -> "OptimizerState":
        params = model.named_parameters()
        return cls(first_moment={n: np.zeros_like(p.data) for n, p in params.items()},
                   second_moment={n: np.zeros_like(p.data) for n, p in params.items()})


def lr_at(step: int, embed_dim: int, warmup: int, factor: float = 1.0) -> float:
    """factor * embed_dim^-0.5 * min(step^-0.5, step * warmup^-1.5)."""
    if step < 1:
        raise TrainingError(f"schedule step must be >= 1, got {step}")
    return factor * embed_dim ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def adam_step(params: dict[str, T.Tensor], state: OptimizerState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update; missing grads count as zero."""
    state.step += 1
    t = state.step
    for name, param in params.items():
        grad = param.grad if param.grad is not None else np.zeros_like(param.data)
        if not np.all(np.isfinite(grad)):
            raise TrainingError(f"non-finite gradient in parameter group {name}")
        m = state.first_moment[name]
        v = state.second_moment[name]
        m += (1.0 - beta1) * (grad - m)
        v += (1.0 - beta2) * (grad * grad - v)
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        param.data = param.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def clip_gradient_norm(params: dict[str, T.Tensor], max_norm: float) -> float:
    """Scale all grads so the global L2 norm is at most max_norm."""
    total = 0.0
    for param in params.values():
        if param.grad is not None:
            total += float((param.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for param in params.values():
            if param.grad is not None:
                param.grad = param.grad * scale
    return norm


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    dev_bleu: float
    lr: float
    test_bleu: Optional[float] = None

    def line(self) -> str:
        return f"epoch={self.epoch}\tloss={self.loss:.6f}\tdev_bleu={self.dev_bleu:.4f}\tlr={self.lr:.8f}"


@dataclass
class TrainedRun:
    records: list[EpochRecord]
    best_epoch: int
    best_metric: float
    best_checkpoint: str
    final_checkpoint: str
    step_losses: list[float] = field(default_factory=list)
    dropped_pairs: int = 0
    aborted: bool = False


def _batch_loss(model, batch, smoothing, rng):
    memory = encode_source(model, batch.src_ids, src_mask=batch.src_mask,
                           train=True, rng=rng)
    tgt_in = batch.tgt_ids[:, :-1]
    tgt_in_mask = batch.tgt_mask[:, :-1]
    logits = decoder_forward(model, memory, tgt_in, src_mask=batch.src_mask,
                             tgt_mask=tgt_in_mask, train=True, rng=rng)
    n, t, vocab = logits.shape
    flat = T.reshape(logits, (n * t, vocab))
    targets = batch.tgt_ids[:, 1:].reshape(-1)
    return T.cross_entropy_smoothed(flat, targets, smoothing, PAD_ID), int((targets != PAD_ID).sum())


def train(train_cfg: TrainConfig, model_cfg: TransformerConfig,
          splits: dict[str, ParallelCorpus], tokenizer: TokenizerSetup,
          out_dir, log_file: bool = True) -> TrainedRun:
    """Run the full supervised loop and return the per-epoch record.

    ``splits`` must contain "train"; "dev" falls back to the train split
    (toy overfit runs), and "test" is required only under test-BLEU
    selection. Checkpoints land in ``out_dir`` as best.ckpt / last.ckpt.
    """
    train_split = splits.get("train")
    if train_split is None or len(train_split) == 0:
        raise TrainingError("empty train split")
    dev_split = splits.get("dev") or train_split
    test_split = splits.get("test")
    if train_cfg.selection_metric == "test_bleu" and test_split is None:
        raise TrainingError("test_bleu selection requires a test split")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train.log"
    log_lines: list[str] = []

    transform = tokenizer.transform()
    batches, dropped = make_batches(
        train_split, tokenizer.src_vocab, tokenizer.tgt_vocab,
        token_budget=train_cfg.token_budget, max_len=train_cfg.max_len,
        seed=train_cfg.seed, src_transform=transform, tgt_transform=transform)
    if not batches:
        raise TrainingError("no training batches survive the length limit")
    logger.info("training on %d batches (%d pairs dropped as over-length)",
                len(batches), dropped)

    model = build_model(model_cfg, seed=train_cfg.seed)
    state = OptimizerState.for_model(model)
    params = model.named_parameters()
    dropout_rng = np.random.default_rng([train_cfg.seed, 999])
    # dev decoding may not outgrow the position table
    decode_cfg = DecodeConfig(max_len=min(train_cfg.max_len, model_cfg.max_positions - 1),
                              beam_size=1)

    def evaluate(split: ParallelCorpus) -> float:
        hyps = translate_lines(model, split.sources(), tokenizer.src_vocab,
                               tokenizer.tgt_vocab, decode_cfg,
                               merge_table=tokenizer.merges if tokenizer.mode == "bpe" else None)
        return corpus_bleu(hyps, split.targets()).bleu

    records: list[EpochRecord] = []
    step_losses: list[float] = []
    best_epoch, best_metric = 0, -1.0
    best_path = out_dir / "best.ckpt"
    last_path = out_dir / "last.ckpt"
    aborted = False
    global_step = 0
    last_lr = 0.0

    for epoch in range(1, train_cfg.epochs + 1):
        t0 = time.monotonic()
        order = np.random.default_rng([train_cfg.seed, epoch]).permutation(len(batches))
        token_total, loss_total = 0, 0.0
        try:
            for index in order:
                batch = batches[index]
                global_step += 1
                model.zero_grad()
                loss, n_tokens = _batch_loss(model, batch, train_cfg.label_smoothing,
                                             dropout_rng)
                loss.backward()
                clip_gradient_norm(params, train_cfg.grad_clip)
                last_lr = lr_at(global_step, model_cfg.embed_dim,
                                train_cfg.warmup_steps, train_cfg.lr_factor)
                adam_step(params, state, last_lr, train_cfg.adam_beta1,
                          train_cfg.adam_beta2, train_cfg.adam_eps)
                value = loss.item()
                if math.isnan(value):
                    raise TrainingError("NaN loss")
                step_losses.append(value)
                loss_total += value * n_tokens
                token_total += n_tokens
        except (T.NonFiniteError, TrainingError) as err:
            logger.error("aborting at epoch %d: %s (last good checkpoint kept)", epoch, err)
            aborted = True
            break

        dev_bleu = evaluate(dev_split)
        test_bleu = evaluate(test_split) if train_cfg.selection_metric == "test_bleu" else None
        record = EpochRecord(epoch=epoch, loss=loss_total / max(token_total, 1),
                             dev_bleu=dev_bleu, lr=last_lr, test_bleu=test_bleu)
        records.append(record)
        log_lines.append(record.line())
        logger.info("%s (%.1fs)", record.line(), time.monotonic() - t0)

        metric = test_bleu if train_cfg.selection_metric == "test_bleu" else dev_bleu
        ckpt_kwargs = dict(
            optimizer_state=state, epoch=epoch,
            metrics={"loss": record.loss, "dev_bleu": dev_bleu,
                     **({"test_bleu": test_bleu} if test_bleu is not None else {})},
            src_vocab_hash=tokenizer.src_vocab.content_hash(),
            tgt_vocab_hash=tokenizer.tgt_vocab.content_hash(),
            extra={"tokenizer_mode": tokenizer.mode,
                   "selection_metric": train_cfg.selection_metric})
        save_checkpoint(last_path, model, **ckpt_kwargs)
        if train_cfg.checkpoint_every and epoch % train_cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"epoch{epoch:04d}.ckpt", model, **ckpt_kwargs)
        if metric > best_metric:
            best_epoch, best_metric = epoch, metric
            save_checkpoint(best_path, model, **ckpt_kwargs)

    if log_file:
        log_path.write_text("\n".join(log_lines) + ("\n" if log_lines else ""),
                            encoding="utf-8")
    if not records:
        raise TrainingError("training aborted before completing one epoch")
    return TrainedRun(records=records, best_epoch=best_epoch, best_metric=best_metric,
                      best_checkpoint=str(best_path), final_checkpoint=str(last_path),
                      step_losses=step_losses, dropped_pairs=dropped, aborted=aborted)
