"""Greedy and beam-search generation from a trained model.

Both decoders are fully deterministic: argmax ties resolve to the lowest
token id and equal beam scores resolve to the lexicographically smallest
id sequence. Beam search ranks finished hypotheses by length-normalized
log-probability, score = logP / ((5 + len) / 6) ** alpha, and only falls
back to an unfinished hypothesis when nothing emitted </s> by max_len.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .tokenization import (BOS_ID, EOS_ID, PAD_ID, MergeTable, Vocabulary,
                           apply_bpe, decode_ids, encode_ids, undo_bpe,
                           whitespace_tokenize)
from .transformer import TransformerModel, decoder_forward, encode_source


class DecodeError(Exception):
    pass


@dataclass(frozen=True)
class DecodeConfig:
    max_len: int = 100
    beam_size: int = 5
    length_penalty_alpha: float = 1.0

    def __post_init__(self):
        if self.max_len < 0:
            raise DecodeError("max_len must be >= 0")
        if self.beam_size < 1:
            raise DecodeError("beam_size must be >= 1")
        if self.length_penalty_alpha < 0:
            raise DecodeError("length_penalty_alpha must be >= 0")


GREEDY = DecodeConfig(beam_size=1)


def _length_penalty(length: int, alpha: float) -> float:
    return ((5.0 + length) / 6.0) ** alpha


def _log_softmax_rows(rows: np.ndarray) -> np.ndarray:
    rows = rows.astype(np.float64)
    shifted = rows - rows.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def greedy_decode(model: TransformerModel, src_ids, cfg: DecodeConfig = GREEDY) -> list[int]:
    """Argmax decoding from <s>; the returned ids exclude sentinels."""
    with T.no_grad():
        memory = encode_source(model, src_ids)
        out: list[int] = []
        while len(out) < cfg.max_len:
            logits = decoder_forward(model, memory, [BOS_ID] + out)
            token = int(np.argmax(logits.data[-1]))
            if token == EOS_ID:
                break
            out.append(token)
    return out


def greedy_decode_batch(model: TransformerModel, src_id_lists,
                        cfg: DecodeConfig = GREEDY) -> list[list[int]]:
    """Greedy decode many sources in lockstep; equals per-sentence greedy."""
    if not src_id_lists:
        return []
    n = len(src_id_lists)
    width = max(len(s) for s in src_id_lists)
    src = np.full((n, width), PAD_ID, dtype=np.int64)
    src_mask = np.zeros((n, width), dtype=bool)
    for i, seq in enumerate(src_id_lists):
        src[i, : len(seq)] = seq
        src_mask[i, : len(seq)] = True
    with T.no_grad():
        memory = encode_source(model, src, src_mask=src_mask)
        tgt = np.full((n, 1), BOS_ID, dtype=np.int64)
        done = np.zeros(n, dtype=bool)
        outputs: list[list[int]] = [[] for _ in range(n)]
        for _ in range(cfg.max_len):
            logits = decoder_forward(model, memory, tgt, src_mask=src_mask)
            step = logits.data[:, -1, :].argmax(axis=-1)
            for i in range(n):
                if done[i]:
                    continue
                if step[i] == EOS_ID:
                    done[i] = True
                else:
                    outputs[i].append(int(step[i]))
            if done.all():
                break
            tgt = np.concatenate([tgt, step[:, None]], axis=1)
    return outputs


def beam_decode(model: TransformerModel, src_ids,
                cfg: DecodeConfig = DecodeConfig()) -> list[int]:
    """Beam search; returns the best finished hypothesis (ids, no sentinels)."""
    if cfg.max_len == 0:
        return []
    vocab = model.config.tgt_vocab_size
    alpha = cfg.length_penalty_alpha
    with T.no_grad():
        memory = encode_source(model, src_ids)
        mem_data = memory.data
        live: list[tuple[float, tuple[int, ...]]] = [(0.0, ())]
        finished: list[tuple[float, tuple[int, ...]]] = []  # (normalized, ids)
        exhausted: list[tuple[float, tuple[int, ...]]] = []
        while live:
            ids = np.array([(BOS_ID, *hyp) for _, hyp in live], dtype=np.int64)
            mem = Tensor(np.broadcast_to(mem_data, (len(live),) + mem_data.shape).copy())
            logits = decoder_forward(model, mem, ids)
            logp = _log_softmax_rows(logits.data[:, -1, :])
            candidates = []
            for (score, hyp), row in zip(live, logp):
                for token in range(vocab):
                    candidates.append((score + row[token], hyp + (token,)))
            candidates.sort(key=lambda c: (-c[0], c[1]))
            live = []
            for score, hyp in candidates[: cfg.beam_size]:
                if hyp[-1] == EOS_ID:
                    norm = score / _length_penalty(len(hyp), alpha)
                    finished.append((norm, hyp[:-1]))
                elif len(hyp) >= cfg.max_len:
                    norm = score / _length_penalty(len(hyp), alpha)
                    exhausted.append((norm, hyp))
                else:
                    live.append((score, hyp))
    pool = finished if finished else exhausted
    if not pool:
        return []
    _, best = min(pool, key=lambda c: (-c[0], c[1]))
    return list(best)


def decode(model: TransformerModel, src_ids, cfg: DecodeConfig) -> list[int]:
    if cfg.beam_size == 1:
        return greedy_decode(model, src_ids, cfg)
    return beam_decode(model, src_ids, cfg)


def translate_lines(model: TransformerModel, lines, src_vocab: Vocabulary,
                    tgt_vocab: Vocabulary, cfg: DecodeConfig = GREEDY,
                    merge_table: MergeTable | None = None,
                    batch_size: int = 32) -> list[str]:
    """Tokenize, (optionally) BPE-segment, decode, and detokenize lines.

    Output lines align one-to-one with the input; BPE subwords are joined
    back into full tokens before writing.
    """
    cache: dict = {}
    encoded = []
    for line in lines:
        tokens = whitespace_tokenize(line)
        if merge_table is not None:
            tokens = apply_bpe(tokens, merge_table, _cache=cache)
        encoded.append(encode_ids(tokens, src_vocab, add_sentinels=True))

    outputs: list[list[int]] = []
    if cfg.beam_size == 1:
        for start in range(0, len(encoded), batch_size):
            outputs.extend(greedy_decode_batch(model, encoded[start:start + batch_size], cfg))
    else:
        outputs = [beam_decode(model, ids, cfg) for ids in encoded]

    rendered = []
    for ids in outputs:
        tokens = decode_ids(ids, tgt_vocab)
        if merge_table is not None:
            tokens = undo_bpe(tokens, merge_table.marker)
        rendered.append(" ".join(tokens))
    return rendered
